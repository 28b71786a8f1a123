use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before `log` and to norms before division.
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Checks that every row of `y: [b, K]` is an exact one-hot vector.
pub fn validate_one_hot(y: &Tensor) -> Result<()> {
    if y.rank() != 2 {
        return Err(Error::Validation(format!("labels must be [b, K], got {:?}", y.shape())));
    }
    let k = y.shape()[1];
    for (i, row) in y.data().chunks(k.max(1)).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Validation(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy `−(1/N) Σᵢ Σₖ yₖ log ŷₖ` over
/// post-softmax probabilities.
pub fn cross_entropy(g: &mut Graph, y_hat: NodeId, y: &Tensor) -> Result<NodeId> {
    validate_one_hot(y)?;
    if g.shape(y_hat) != y.shape() {
        return Err(Error::dim(
            "cross_entropy",
            format!("predictions {:?} vs labels {:?}", g.shape(y_hat), y.shape()),
        ));
    }
    let n = y.shape()[0];
    if n == 0 {
        return Err(Error::dim("cross_entropy", "empty batch"));
    }
    let labels = g.constant(y.clone());
    let p = g.clamp_min(y_hat, CLAMP_FLOOR)?;
    let logp = g.log(p)?;
    let picked = g.mul(logp, labels)?;
    let total = g.sum(picked)?;
    g.mul_scalar(total, -1.0 / n as f64)
}

/// Batch mean of `1 − cos(zᵢ, zₜ)` over rows, in `[0, 2]`.
///
/// Rows with norm below [`CLAMP_FLOOR`] are clamped and counted in
/// [`Graph::clamp_warnings`].
pub fn cosine_consistency(g: &mut Graph, z_a: NodeId, z_b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (g.shape(z_a).to_vec(), g.shape(z_b).to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(Error::dim("cosine_consistency", format!("shapes {sa:?} and {sb:?}")));
    }
    if sa[0] == 0 {
        return Err(Error::dim("cosine_consistency", "empty batch"));
    }
    let dot = g.mul(z_a, z_b)?;
    let dot = g.sum_last(dot)?;
    let na = row_norm(g, z_a)?;
    let nb = row_norm(g, z_b)?;
    let denom = g.mul(na, nb)?;
    let cos = g.div(dot, denom)?;
    let neg = g.mul_scalar(cos, -1.0)?;
    let dist = g.add_scalar(neg, 1.0)?;
    let dist = g.clamp(dist, 0.0, 2.0)?;
    g.mean(dist)
}

fn row_norm(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let sq = g.mul(z, z)?;
    let ss = g.sum_last(sq)?;
    let norm = g.sqrt(ss)?;
    let degenerate = g.value(norm).data().iter().filter(|&&v| v < CLAMP_FLOOR).count();
    if degenerate > 0 {
        g.note_clamp_warning(degenerate);
    }
    g.clamp_min(norm, CLAMP_FLOOR)
}
