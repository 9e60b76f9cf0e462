//! MMCK: model checkpoints.
//!
//! ```text
//! "MMCK" | version u32 = 1
//! header_len u32 | header: sorted "key=value\n" lines (config, vocab, metadata)
//! count u32 | count x ( name_len u16 | name | rank u8 | dims u32 x rank | f32 data )
//! ```
//! Little-endian throughout. The `vocab` value is the id-ordered token list
//! joined by single spaces.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ModelParameters};
use crate::data::Vocabulary;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;
const VOCAB_KEY: &str = "vocab";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Free-form run metadata (stage, format, vision flag, seed, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn header(&self) -> Result<String, ModelError> {
        let mut kv = self.model.config.to_kv();
        kv.insert(VOCAB_KEY.into(), self.model.vocab.tokens().join(" "));
        for (k, v) in &self.meta {
            let bad = |m: &str| Err(ModelError::Config(format!("metadata {k:?}: {m}")));
            if ModelConfig::is_config_key(k) || k == VOCAB_KEY {
                return bad("collides with a config key");
            }
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return bad("keys need no '=' or newline, values no newline");
            }
            kv.insert(k.clone(), v.clone());
        }
        Ok(kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, ModelError> {
    let header = ckpt.header()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let params = &ckpt.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ModelError> {
        Err(ModelError::Checkpoint {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str, ModelError> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|_| ModelError::Checkpoint {
            offset: start,
            message: format!("{what} is not UTF-8"),
        })
    }
}

fn parse_header(text: &str, offset: usize) -> Result<BTreeMap<String, String>, ModelError> {
    let fail = |message: String| ModelError::Checkpoint { offset, message };
    let mut kv = BTreeMap::new();
    for line in text.split_terminator('\n') {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("header line {line:?} has no '='")))?;
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(fail(format!("duplicate header key {k:?}")));
        }
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(fail("header must end with a newline".into()));
    }
    Ok(kv)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected \"MMCK\"");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let header_len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let mut kv = parse_header(r.utf8(header_len, "header")?, header_at)?;
    let vocab_text = kv.remove(VOCAB_KEY).ok_or_else(|| ModelError::Checkpoint {
        offset: header_at,
        message: "header lacks a vocab entry".into(),
    })?;
    let vocab = Vocabulary::from_tokens(vocab_text.split(' ').map(str::to_string).collect()).map_err(|e| {
        ModelError::Checkpoint {
            offset: header_at,
            message: e.to_string(),
        }
    })?;
    let (config_kv, meta): (BTreeMap<_, _>, BTreeMap<_, _>) =
        kv.into_iter().partition(|(k, _)| ModelConfig::is_config_key(k));
    let config = ModelConfig::from_kv(&config_kv)?;

    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = r.utf8(len, "tensor name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some());
        let Some(n) = n else {
            return r.fail(format!("tensor {name} shape {shape:?} overflows"));
        };
        let data_at = r.pos;
        let raw = r.take(n * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            r.pos = data_at + 4 * i;
            return r.fail(format!("non-finite value in tensor {name}"));
        }
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint {
            offset: data_at,
            message: e.to_string(),
        })?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last tensor");
    }
    let params = ModelParameters::from_named(&config, named)?;
    let model = Model::from_parts(config, vocab, params)?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&bytes)
}
