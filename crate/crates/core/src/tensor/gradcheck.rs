//! Central-difference gradient checking.

use super::{Graph, NodeId, Tensor, TensorError};

/// Max over all input coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` builds a scalar loss from the recorded `inputs`; it is re-run twice
/// per coordinate with that coordinate shifted by `±eps`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    finite_diff_check_strided(f, inputs, eps, usize::MAX)
}

/// Like [`finite_diff_check`] but probes at most `max_coords` evenly spaced
/// coordinates of each input.
pub fn finite_diff_check_strided<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<NodeId>, NodeId), TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|t| g.leaf(t.detached().with_requires_grad(track)))
            .collect();
        let out = f(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (mut g, ids, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map_or(vec![0.0; t.numel()], |s| s.to_vec()))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = n.div_ceil(max_coords.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (gp, _, op) = eval(&probe, false)?;
            let plus = gp.value(op).item();
            probe[i].data_mut()[j] = orig - eps;
            let (gm, _, om) = eval(&probe, false)?;
            let minus = gm.value(om).item();
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
