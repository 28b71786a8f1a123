use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

use super::Bound;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

fn expect_weights(op: &'static str, p: &Bound, n: usize) -> Result<()> {
    if p.ids.len() != n {
        return Err(Error::dim(op, format!("expected {n} weight tensors, got {}", p.ids.len())));
    }
    Ok(())
}

/// `xW + b` for `x: [b, in]` or `[b, s, in]`.
pub fn linear(g: &mut Graph, x: NodeId, p: &Bound) -> Result<NodeId> {
    expect_weights("linear", p, 2)?;
    linear_raw(g, x, p.ids[0], p.ids[1])
}

pub(crate) fn linear_raw(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let sx = g.shape(x).to_vec();
    let sw = g.shape(w).to_vec();
    if sw.len() != 2 || sx.last() != Some(&sw[0]) {
        return Err(Error::dim(
            "linear",
            format!("input {sx:?} does not match weight {sw:?}"),
        ));
    }
    match sx.len() {
        2 => {
            let y = g.matmul(x, w)?;
            g.add_bias(y, b)
        }
        3 => {
            let flat = g.reshape(x, &[sx[0] * sx[1], sx[2]])?;
            let y = g.matmul(flat, w)?;
            let y = g.add_bias(y, b)?;
            g.reshape(y, &[sx[0], sx[1], sw[1]])
        }
        _ => Err(Error::dim("linear", format!("unsupported input rank {sx:?}"))),
    }
}

/// Convolution with square kernel and symmetric zero padding.
pub fn conv2d(g: &mut Graph, x: NodeId, p: &Bound, stride: usize, pad: usize) -> Result<NodeId> {
    expect_weights("conv2d", p, 2)?;
    g.conv2d(x, p.ids[0], p.ids[1], stride, pad)
}

pub fn max_pool2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.max_pool2(x)
}

/// `[b, ...] -> [b, features]`.
pub fn flatten(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let b = *s.first().ok_or_else(|| Error::dim("flatten", "rank-0 input"))?;
    let features = s[1..].iter().product();
    g.reshape(x, &[b, features])
}

/// Per-row standardization followed by learned gain and bias.
pub fn layer_norm(g: &mut Graph, x: NodeId, p: &Bound) -> Result<NodeId> {
    expect_weights("layer_norm", p, 2)?;
    let n = g.normalize(x, LAYER_NORM_EPS)?;
    let scaled = g.mul_row(n, p.ids[0])?;
    g.add_bias(scaled, p.ids[1])
}

pub fn softmax(g: &mut Graph, x: NodeId, axis: usize) -> Result<NodeId> {
    g.softmax(x, axis)
}

/// Mean over the sequence axis: `[b, s, d] -> [b, d]`.
pub fn mean_pool(g: &mut Graph, s: NodeId) -> Result<NodeId> {
    let shape = g.shape(s);
    if shape.len() != 3 {
        return Err(Error::dim("mean_pool", format!("expected [b, s, d], got {shape:?}")));
    }
    g.mean_axis(s, 1)
}
