//! Language-vision interaction and gated fusion.
//!
//! ```text
//! H_vision = F · W_h                                   (m x d)
//! H_attn   = softmax(H_language · H_visionᵀ / √d) · H_vision
//! λ        = sigmoid(H_language · W_l + H_attn · W_v)
//! H_fuse   = (1 - λ) ⊙ H_language + λ ⊙ H_attn
//! ```
//! The attention is single-head with the language states as queries and the
//! projected patches as both keys and values; there are no learned Q/K/V maps.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{AttentionLayout, Graph, NodeId, Real, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T: Real = f32> {
    /// `d_v x d` patch projection.
    pub w_h: Tensor<T>,
    /// `d x d` gate weight on language states.
    pub w_l: Tensor<T>,
    /// `d x d` gate weight on attended vision.
    pub w_v: Tensor<T>,
    /// Optional gate bias of width `d`; absent by default.
    pub gate_bias: Option<Tensor<T>>,
}

impl<T: Real> FusionParams<T> {
    pub fn init<R: Rng + ?Sized>(d_v: usize, d: usize, std: f64, gate_bias: bool, rng: &mut R) -> Self {
        let grad = |t: Tensor<T>| t.with_requires_grad(true);
        FusionParams {
            w_h: grad(Tensor::randn([d_v, d], std, rng)),
            w_l: grad(Tensor::randn([d, d], std, rng)),
            w_v: grad(Tensor::randn([d, d], std, rng)),
            gate_bias: gate_bias.then(|| grad(Tensor::zeros([d]))),
        }
    }

    pub fn d(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn d_v(&self) -> usize {
        self.w_h.shape()[0]
    }

    /// Records the parameters in `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> FusionNodes {
        FusionNodes {
            w_h: g.param(&self.w_h),
            w_l: g.param(&self.w_l),
            w_v: g.param(&self.w_v),
            gate_bias: self.gate_bias.as_ref().map(|b| g.param(b)),
        }
    }

    /// Runs the whole interaction for one instance and returns every
    /// intermediate.
    pub fn trace(&self, h_language: &Tensor<T>, features: &Tensor<T>) -> Result<FusionTrace<T>, TensorError> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let hl = g.constant(h_language.clone());
        let f = g.constant(features.clone());
        let ids = nodes.apply(&mut g, hl, f, None)?;
        Ok(ids.collect(&g, hl))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub w_h: NodeId,
    pub w_l: NodeId,
    pub w_v: NodeId,
    pub gate_bias: Option<NodeId>,
}

/// Node ids of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionIds {
    pub h_vision: NodeId,
    pub h_attn: NodeId,
    pub lambda: NodeId,
    pub h_fuse: NodeId,
}

impl FusionIds {
    pub fn collect<T: Real>(&self, g: &Graph<T>, h_language: NodeId) -> FusionTrace<T> {
        FusionTrace {
            h_language: g.value(h_language).detached(),
            h_vision: g.value(self.h_vision).detached(),
            h_attn: g.value(self.h_attn).detached(),
            lambda: g.value(self.lambda).detached(),
            h_fuse: g.value(self.h_fuse).detached(),
        }
    }
}

impl FusionNodes {
    /// `layout` pairs language rows with patch rows for packed batches;
    /// `None` means one instance (all rows attend all patches).
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        h_language: NodeId,
        features: NodeId,
        layout: Option<Arc<AttentionLayout>>,
    ) -> Result<FusionIds, TensorError> {
        let h_vision = project_vision(g, features, self.w_h)?;
        let layout = match layout {
            Some(l) => l,
            None => Arc::new(AttentionLayout::dense(
                g.value(h_language).shape()[0],
                g.value(h_vision).shape()[0],
            )),
        };
        let h_attn = cross_attention(g, h_language, h_vision, layout)?;
        let (lambda, h_fuse) = gated_fusion(g, h_language, h_attn, self.w_l, self.w_v, self.gate_bias)?;
        Ok(FusionIds {
            h_vision,
            h_attn,
            lambda,
            h_fuse,
        })
    }
}

/// Every intermediate of one fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTrace<T: Real = f32> {
    pub h_language: Tensor<T>,
    pub h_vision: Tensor<T>,
    pub h_attn: Tensor<T>,
    pub lambda: Tensor<T>,
    pub h_fuse: Tensor<T>,
}

/// `features · W_h`. Features are expected to be a constant node.
pub fn project_vision<T: Real>(g: &mut Graph<T>, features: NodeId, w_h: NodeId) -> Result<NodeId, TensorError> {
    g.matmul(features, w_h)
}

/// Single-head attention with queries `h_language` and keys = values =
/// `h_vision`, scaled by `1/√d`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    h_language: NodeId,
    h_vision: NodeId,
    layout: Arc<AttentionLayout>,
) -> Result<NodeId, TensorError> {
    g.attention(h_language, h_vision, h_vision, layout, 1)
}

/// Returns `(λ, H_fuse)`.
pub fn gated_fusion<T: Real>(
    g: &mut Graph<T>,
    h_language: NodeId,
    h_attn: NodeId,
    w_l: NodeId,
    w_v: NodeId,
    gate_bias: Option<NodeId>,
) -> Result<(NodeId, NodeId), TensorError> {
    let from_language = g.matmul(h_language, w_l)?;
    let from_vision = g.matmul(h_attn, w_v)?;
    let mut pre = g.add(from_language, from_vision)?;
    if let Some(b) = gate_bias {
        pre = g.add_row(pre, b)?;
    }
    let lambda = g.sigmoid(pre)?;
    let fused = g.lerp(h_language, h_attn, lambda)?;
    Ok((lambda, fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar-loop evaluation of the attention step.
    fn attention_oracle(hl: &Tensor<f64>, hv: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (n, d) = hl.dims2().unwrap();
        let m = hv.shape()[0];
        (0..n)
            .map(|i| {
                let scores: Vec<f64> = (0..m)
                    .map(|j| (0..d).map(|t| hl.get2(i, t) * hv.get2(j, t)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                (0..d)
                    .map(|t| (0..m).map(|j| scores[j].exp() / z * hv.get2(j, t)).sum())
                    .collect()
            })
            .collect()
    }

    fn params(w_h: Tensor<f64>, w_l: Tensor<f64>, w_v: Tensor<f64>) -> FusionParams<f64> {
        FusionParams {
            w_h,
            w_l,
            w_v,
            gate_bias: None,
        }
    }

    #[test]
    fn zero_projection_gives_zero_vision() {
        let p = params(Tensor::zeros([4, 3]), Tensor::identity(3), Tensor::identity(3));
        let f = Tensor::randn([5, 4], 1.0, &mut rng(0));
        let hl = Tensor::randn([2, 3], 1.0, &mut rng(1));
        let t = p.trace(&hl, &f).unwrap();
        assert!(t.h_vision.data().iter().all(|&x| x == 0.0));
        assert!(t.h_attn.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_projection_passes_features() {
        let p = params(Tensor::identity(3), Tensor::identity(3), Tensor::identity(3));
        let f = Tensor::randn([5, 3], 1.0, &mut rng(2));
        let t = p.trace(&Tensor::randn([2, 3], 1.0, &mut rng(3)), &f).unwrap();
        assert_eq!(t.h_vision, f);
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let f = Tensor::randn([3, 4], 1.0, &mut rng(4));
        let w = Tensor::randn([4, 2], 1.0, &mut rng(5));
        let p = params(w.clone(), Tensor::identity(2), Tensor::identity(2));
        let t = p.trace(&Tensor::randn([1, 2], 1.0, &mut rng(6)), &f).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let e: f64 = (0..4).map(|k| f.get2(i, k) * w.get2(k, j)).sum();
                assert!((t.h_vision.get2(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_patch_attention_copies_patch() {
        let p = params(Tensor::identity(3), Tensor::identity(3), Tensor::identity(3));
        let f = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]);
        let t = p.trace(&Tensor::randn([4, 3], 3.0, &mut rng(7)), &f).unwrap();
        for i in 0..4 {
            assert_eq!(t.h_attn.row(i), f.row(0));
        }
    }

    #[test]
    fn identical_patches_attend_to_that_row() {
        let p = params(Tensor::identity(2), Tensor::identity(2), Tensor::identity(2));
        let f = Tensor::from_rows(&[&[0.5, -0.25], &[0.5, -0.25], &[0.5, -0.25]]);
        let t = p.trace(&Tensor::randn([3, 2], 2.0, &mut rng(8)), &f).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((t.h_attn.get2(i, j) - f.get2(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let hl = Tensor::randn([2, 2], 1.0, &mut rng(9));
        let hv = Tensor::randn([3, 2], 1.0, &mut rng(10));
        let p = params(Tensor::identity(2), Tensor::identity(2), Tensor::identity(2));
        let t = p.trace(&hl, &hv).unwrap();
        let expect = attention_oracle(&hl, &hv);
        for i in 0..2 {
            for j in 0..2 {
                assert!((t.h_attn.get2(i, j) - expect[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_gate_weights_average() {
        let p = params(Tensor::identity(2), Tensor::zeros([2, 2]), Tensor::zeros([2, 2]));
        let hl = Tensor::randn([3, 2], 1.0, &mut rng(11));
        let t = p.trace(&hl, &Tensor::randn([2, 2], 1.0, &mut rng(12))).unwrap();
        assert!(t.lambda.data().iter().all(|&x| x == 0.5));
        for j in 0..6 {
            let avg = (t.h_language.data()[j] + t.h_attn.data()[j]) / 2.0;
            assert!((t.h_fuse.data()[j] - avg).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_hand_example() {
        let mut g = Graph::<f64>::new();
        let hl = g.leaf(Tensor::from_rows(&[&[1.0, 0.0]]));
        let ha = g.leaf(Tensor::from_rows(&[&[0.0, 1.0]]));
        let wl = g.leaf(Tensor::identity(2));
        let wv = g.leaf(Tensor::identity(2));
        let (lambda, fuse) = gated_fusion(&mut g, hl, ha, wl, wv, None).unwrap();
        for (a, b) in g.value(lambda).data().iter().zip([0.7311, 0.7311]) {
            assert!((a - b).abs() < 1e-4);
        }
        for (a, b) in g.value(fuse).data().iter().zip([0.2689, 0.7311]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn equal_inputs_fuse_to_language_exactly() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::randn([3, 4], 1.0, &mut rng(13));
        let hl = g.leaf(x.clone());
        let ha = g.leaf(x.clone());
        let wl = g.leaf(Tensor::randn([4, 4], 1.0, &mut rng(14)));
        let wv = g.leaf(Tensor::randn([4, 4], 1.0, &mut rng(15)));
        let (_, fuse) = gated_fusion(&mut g, hl, ha, wl, wv, None).unwrap();
        assert_eq!(g.value(fuse), &x);
    }

    #[test]
    fn gate_bias_shifts_lambda() {
        let mut p = params(Tensor::identity(2), Tensor::zeros([2, 2]), Tensor::zeros([2, 2]));
        p.gate_bias = Some(Tensor::filled([2], -40.0));
        let hl = Tensor::randn([2, 2], 1.0, &mut rng(16));
        let t = p.trace(&hl, &Tensor::randn([3, 2], 1.0, &mut rng(17))).unwrap();
        assert!(t.h_fuse.max_abs_diff(&hl) < 1e-12);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut r = rng(18);
        let f = Tensor::randn([3, 4], 1.0, &mut r);
        let inputs = vec![
            Tensor::randn([2, 3], 1.0, &mut r),
            Tensor::randn([4, 3], 0.5, &mut r),
            Tensor::randn([3, 3], 0.5, &mut r),
            Tensor::randn([3, 3], 0.5, &mut r),
        ];
        let err = finite_diff_check(
            |g, x| {
                let nodes = FusionNodes {
                    w_h: x[1],
                    w_l: x[2],
                    w_v: x[3],
                    gate_bias: None,
                };
                let fc = g.constant(f.clone());
                let ids = nodes.apply(g, x[0], fc, None)?;
                g.cross_entropy(ids.h_fuse, &[0, 2], usize::MAX)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn permuting_patches_leaves_attention_unchanged() {
        let hl = Tensor::randn([4, 3], 1.0, &mut rng(19));
        let f = Tensor::randn([5, 3], 1.0, &mut rng(20));
        let order = [3, 0, 4, 1, 2];
        let rows: Vec<f64> = order.iter().flat_map(|&i| f.row(i).to_vec()).collect();
        let shuffled = Tensor::from_vec([5, 3], rows);
        let p = params(Tensor::identity(3), Tensor::identity(3), Tensor::identity(3));
        let a = p.trace(&hl, &f).unwrap();
        let b = p.trace(&hl, &shuffled).unwrap();
        assert!(a.h_attn.max_abs_diff(&b.h_attn) <= 1e-12);
    }

    #[test]
    fn saturated_negative_gate_keeps_language() {
        let hl = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, 1.5]]);
        let w = Tensor::filled([2, 2], -20.0);
        let p = params(Tensor::identity(2), w.clone(), w);
        let f = Tensor::from_rows(&[&[0.5, 0.5], &[1.0, 0.25]]);
        let t = p.trace(&hl, &f).unwrap();
        assert!(t.lambda.data().iter().all(|&x| x > 0.0 && x < 1e-12));
        assert!(t.h_fuse.max_abs_diff(&hl) <= 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn gate_is_open_interval_and_fuse_is_between(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let p = FusionParams::<f64>::init(3, 4, 0.5, false, &mut r);
            let t = p.trace(&Tensor::randn([3, 4], 1.0, &mut r), &Tensor::randn([2, 3], 1.0, &mut r)).unwrap();
            for i in 0..t.h_fuse.numel() {
                let l = t.lambda.data()[i];
                proptest::prop_assert!(l > 0.0 && l < 1.0);
                let (a, b) = (t.h_language.data()[i], t.h_attn.data()[i]);
                let x = t.h_fuse.data()[i];
                proptest::prop_assert!(a.min(b) <= x && x <= a.max(b));
            }
        }
    }
}
