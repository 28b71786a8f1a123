//! Central finite-difference oracle for reverse-mode gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaf = g.constant(x.clone());
    let out = f(&mut g, leaf)?;
    scalar_of(&g, out)
}

fn scalar_of(g: &Graph, out: NodeId) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "checked function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares `backward()` against central differences of `f` at `x`.
///
/// `f` receives a graph and the leaf holding `x`, and must return a scalar
/// node. The result is `max_i |g_ad[i] − g_fd[i]| / max(1, |g_fd[i]|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let base = scalar_of(&g, out)?;
    let analytic = g
        .backward(out)?
        .take(leaf)
        .expect("leaf requires grad");

    let again = evaluate(&f, x)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
