//! MMVF: precomputed patch features keyed by image id.
//!
//! ```text
//! "MMVF" | version u32 = 1 | count u32
//! count x ( id_len u16 | id bytes | m u32 | d_v u32 | m*d_v f32 )
//! ```
//! All integers and floats little-endian, patches row-major.

use std::path::Path;

use indexmap::IndexMap;

use super::DataError;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"MMVF";
const VERSION: u32 = 1;

/// `m x d_v` patch feature matrix for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatures {
    m: usize,
    d_v: usize,
    patches: Vec<f32>,
}

impl VisionFeatures {
    pub fn new(m: usize, d_v: usize, patches: Vec<f32>) -> Result<Self, DataError> {
        let err = |message: String| DataError::Format { offset: 0, message };
        if m == 0 || d_v == 0 {
            return Err(err(format!("empty feature matrix {m}x{d_v}")));
        }
        if patches.len() != m * d_v {
            return Err(err(format!("{} values for a {m}x{d_v} matrix", patches.len())));
        }
        if !patches.iter().all(|x| x.is_finite()) {
            return Err(err("non-finite feature value".into()));
        }
        Ok(VisionFeatures { m, d_v, patches })
    }

    pub fn zeros(m: usize, d_v: usize) -> Self {
        VisionFeatures {
            m,
            d_v,
            patches: vec![0.0; m * d_v],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn patches(&self) -> &[f32] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [self.m, self.d_v],
            self.patches.iter().map(|&x| T::of(x as f64)).collect(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.patches.iter().all(|&x| x == 0.0)
    }
}

pub type FeatureMap = IndexMap<String, VisionFeatures>;

pub fn encode_vision_features(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (id, f) in map {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(f.m as u32).to_le_bytes());
        out.extend_from_slice(&(f.d_v as u32).to_le_bytes());
        for x in &f.patches {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_vision_features(bytes: &[u8]) -> Result<FeatureMap, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected \"MMVF\"");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("record count")?;
    let mut map = FeatureMap::with_capacity(count as usize);
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(len, "id")?)
            .map_err(|_| DataError::Format {
                offset: start + 2,
                message: "id is not UTF-8".into(),
            })?
            .to_string();
        let m = r.u32("patch count")? as usize;
        let d_v = r.u32("feature width")? as usize;
        if m == 0 || d_v == 0 {
            return r.fail(format!("record {id:?} has empty shape {m}x{d_v}"));
        }
        let n = m.checked_mul(d_v).filter(|n| n.checked_mul(4).is_some());
        let Some(n) = n else {
            return r.fail(format!("record {id:?} shape {m}x{d_v} overflows"));
        };
        let data_start = r.pos;
        let raw = r.take(n * 4, "feature data")?;
        let mut patches = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(DataError::Format {
                    offset: data_start + 4 * i,
                    message: format!("non-finite value in record {id:?}"),
                });
            }
            patches.push(x);
        }
        if map.contains_key(&id) {
            r.pos = start;
            return r.fail(format!("duplicate image id {id:?}"));
        }
        map.insert(id, VisionFeatures { m, d_v, patches });
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last record");
    }
    Ok(map)
}

pub fn load_vision_features(path: impl AsRef<Path>) -> Result<FeatureMap, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    read_vision_features(&bytes)
}

pub fn write_vision_features(path: impl AsRef<Path>, map: &FeatureMap) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_vision_features(map)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(id: &str, f: VisionFeatures) -> FeatureMap {
        let mut map = FeatureMap::new();
        map.insert(id.to_string(), f);
        map
    }

    #[test]
    fn zero_record_parses() {
        let bytes = encode_vision_features(&one("img0", VisionFeatures::zeros(4, 8)));
        let map = read_vision_features(&bytes).unwrap();
        let f = &map["img0"];
        assert_eq!((f.m(), f.d_v()), (4, 8));
        assert!(f.is_zero());
    }

    #[test]
    fn detr_shaped_record() {
        let f = VisionFeatures::new(100, 256, (0..25600).map(|i| i as f32 * 1e-3).collect()).unwrap();
        let map = read_vision_features(&encode_vision_features(&one("detr", f.clone()))).unwrap();
        assert_eq!(map["detr"], f);
        assert_eq!(map["detr"].to_tensor::<f32>().shape(), &[100, 256]);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let mut bytes = encode_vision_features(&one("a", VisionFeatures::zeros(2, 2)));
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(read_vision_features(&bytes), Err(DataError::Format { offset: 0, .. })));
        let cut = &good[..good.len() - 3];
        match read_vision_features(cut) {
            Err(DataError::Format { offset, message }) => {
                assert_eq!(offset, 4 + 4 + 4 + 2 + 1 + 4 + 4);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_value_is_rejected_with_position() {
        let mut bytes = encode_vision_features(&one("a", VisionFeatures::zeros(1, 3)));
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match read_vision_features(&bytes) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, at),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_read_write_is_identical(
            records in prop::collection::vec((1usize..6, 1usize..6, any::<u64>()), 1..5)
        ) {
            use rand::{Rng, SeedableRng};
            let mut map = FeatureMap::new();
            for (i, (m, d, seed)) in records.into_iter().enumerate() {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data = (0..m * d).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
                map.insert(format!("img{i}"), VisionFeatures::new(m, d, data).unwrap());
            }
            let bytes = encode_vision_features(&map);
            let back = read_vision_features(&bytes).unwrap();
            prop_assert_eq!(&back, &map);
            prop_assert_eq!(encode_vision_features(&back), bytes);
        }
    }
}
