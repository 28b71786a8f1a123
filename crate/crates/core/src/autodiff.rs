//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes recorded during one forward
//! pass. Every node stores its output value and the operation that produced
//! it; input ids always refer to earlier nodes, so reverse insertion order is
//! a valid topological order for the backward sweep. Graphs are built per
//! step and dropped afterwards.
//!
//! Elementwise binary operations require equal shapes. The only broadcasting
//! forms are tensor-scalar operations and the explicit last-axis `add_bias` /
//! `mul_row` used by affine layers.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    AddBias(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MeanAxis(NodeId, usize),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Softmax(NodeId, usize),
    Normalize {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_warnings: usize,
}

/// Gradients of a backward sweep, keyed by leaf node.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf that requires grad. Unreached leaves carry zeros.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.leaves.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `data` of shape `shape` to the layout given by `axes`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be at least 1".into()));
    }
    if kernel > padded {
        return Err(Error::Config(format!(
            "kernel {kernel} does not fit padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integer conv output: ({input} + 2*{pad} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Index mapping between one image and its patch matrix `[cin·kh·kw, oh·ow]`.
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Calls `f(patch_row, output_position, input_index)` for every
    /// in-bounds tap; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for i in 0..self.oh {
                        let r = (i * self.stride + ki) as isize - self.pad as isize;
                        if r < 0 || r >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + r as usize) * self.w;
                        for j in 0..self.ow {
                            let col = (j * self.stride + kj) as isize - self.pad as isize;
                            if col >= 0 && col < self.w as isize {
                                f(row, i * self.ow + j, base + col as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let np = self.oh * self.ow;
        self.for_each_tap(|row, p, xi| cols[row * np + p] = x[xi]);
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let np = self.oh * self.ow;
        self.for_each_tap(|row, p, xi| gx[xi] += cols[row * np + p]);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Number of degenerate-norm rows clamped while building this graph.
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings
    }

    pub(crate) fn note_clamp_warning(&mut self, n: usize) {
        self.clamp_warnings += n;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, op_name: &'static str, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        Tensor::new(v.shape().to_vec(), data).expect("shape preserved")
    }

    fn zip_binary(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul", &[a, b])
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::dim("batch_matmul", format!("cannot multiply {sa:?} by {sb:?} (transpose_b={transpose_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &da[bi * m * k..(bi + 1) * m * k];
            let b_blk = &db[bi * k * n..(bi + 1) * k * n];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(a_blk, b_blk, o_blk, m, k, n);
            } else {
                gemm(a_blk, b_blk, o_blk, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(Op::BatchMatMul { a, b, transpose_b }, value, "batch_matmul", &[a, b])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_binary(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v, "add", &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v, "sub", &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v, "mul", &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        if let Some(pos) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::NumericDomain {
                op: "div",
                detail: format!("division by zero at flat index {pos}"),
            });
        }
        let v = self.zip_binary(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v, "div", &[a, b])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.map_unary(a, |x| x + s);
        self.push(Op::AddScalar(a), v, "add_scalar", &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.map_unary(a, |x| x * s);
        self.push(Op::MulScalar(a, s), v, "mul_scalar", &[a])
    }

    pub fn div_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        if s == 0.0 {
            return Err(Error::NumericDomain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map_unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, "relu", &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map_unary(a, f64::exp);
        self.push(Op::Exp(a), v, "exp", &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(pos) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("non-positive argument at flat index {pos}"),
            });
        }
        let v = self.map_unary(a, f64::ln);
        self.push(Op::Log(a), v, "log", &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(pos) = self.value(a).data().iter().position(|&v| v < 0.0) {
            return Err(Error::NumericDomain {
                op: "sqrt",
                detail: format!("negative argument at flat index {pos}"),
            });
        }
        let v = self.map_unary(a, f64::sqrt);
        self.push(Op::Sqrt(a), v, "sqrt", &[a])
    }

    /// `max(x, floor)`; gradient passes only where `x >= floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.clamp(a, floor, f64::INFINITY)
    }

    /// Clips into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.map_unary(a, |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v, "clamp", &[a])
    }

    /// Adds a `[n]` bias to every last-axis row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast("add_bias", x, bias, |a, b| a + b)?;
        self.push(Op::AddBias(x, bias), v, "add_bias", &[x, bias])
    }

    /// Multiplies every last-axis row of `x: [..., n]` by `row: [n]`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        self.push(Op::MulRow(x, row), v, "mul_row", &[x, row])
    }

    fn row_broadcast(&self, op: &'static str, x: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != n {
            return Err(Error::dim(op, format!("row {sr:?} does not match last axis of {sx:?}")));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(sx.to_vec(), data)
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum", &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::dim("mean", "mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean", &[a])
    }

    /// Sums the last axis away: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::dim("sum_last", format!("need rank >= 2, got {sa:?}")));
        }
        let n = sa[sa.len() - 1];
        let data: Vec<f64> = if n == 0 {
            vec![0.0; sa[..sa.len() - 1].iter().product()]
        } else {
            self.value(a).data().chunks(n).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::new(sa[..sa.len() - 1].to_vec(), data)?;
        self.push(Op::SumLast(a), value, "sum_last", &[a])
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 || sa.len() < 2 {
            return Err(Error::dim("mean_axis", format!("cannot average axis {axis} of {sa:?}")));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = sa.clone();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(Op::MeanAxis(a, axis), value, "mean_axis", &[a])
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape).map_err(|_| {
            Error::dim("reshape", format!("cannot reshape {:?} to {shape:?}", self.shape(a)))
        })?;
        self.push(Op::Reshape(a), value, "reshape", &[a])
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("invalid axes {axes:?} for {sa:?}")));
        }
        let (shape, data) = permute_data(self.value(a).data(), &sa, axes);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Permute(a, axes.to_vec()), value, "permute", &[a])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat(parts.to_vec(), axis), value, "concat", parts)
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::dim("narrow", format!("range {start}..{} out of axis {axis} of {sx:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Narrow { x, axis, start }, value, "narrow", &[x])
    }

    // ---- fused neural-network kernels -------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(Error::dim("softmax", format!("cannot normalize axis {axis} of {sa:?}")));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = Tensor::new(sa, out)?;
        self.push(Op::Softmax(a, axis), value, "softmax", &[a])
    }

    /// Standardizes every last-axis row to zero mean and unit variance
    /// (population variance plus `eps`).
    pub fn normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::dim("layer_norm", format!("empty feature axis in {sx:?}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / d);
        for row in src.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(sx, out)?;
        self.push(Op::Normalize { x, inv_std }, value, "layer_norm", &[x])
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [O,C,kh,kw]` plus bias `[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", format!("expected rank-4 input and kernel, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("input channels {} vs kernel channels {}", sx[1], sw[1])));
        }
        if sb != [sw[0]] {
            return Err(Error::dim("conv2d", format!("bias {sb:?} does not match {} filters", sw[0])));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = conv_out_size(h, kh, stride, pad)?;
        let ow = conv_out_size(wd, kw, stride, pad)?;
        let (xd, wdata, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let geo = ConvGeometry { cin, h, w: wd, kh, kw, oh, ow, stride, pad };
        let (ck, np) = (cin * kh * kw, oh * ow);
        let mut out = vec![0.0; batch * cout * np];
        let mut cols = vec![0.0; ck * np];
        for n in 0..batch {
            geo.im2col(&xd[n * cin * h * wd..(n + 1) * cin * h * wd], &mut cols);
            let o = &mut out[n * cout * np..(n + 1) * cout * np];
            for (c, chunk) in o.chunks_mut(np).enumerate() {
                chunk.fill(bd[c]);
            }
            gemm(wdata, &cols, o, cout, ck, np);
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        self.push(Op::Conv2d { x, w, b, stride, pad }, value, "conv2d", &[x, w, b])
    }

    /// Non-overlapping 2×2 max pooling over the two trailing axes.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("max_pool2", format!("expected rank 4, got {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(Op::MaxPool2 { x, argmax }, value, "max_pool2", &[x])
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss with seed gradient 1.0.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with(&[(loss, Tensor::full(v.shape(), 1.0))])
    }

    /// Reverse sweep seeded with explicit output gradients (vector-Jacobian
    /// product). Used by clients that receive gradients over the wire.
    pub fn backward_with(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != self.shape(*id) {
                return Err(Error::Contract(format!(
                    "seed gradient shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.shape(*id)
                )));
            }
            accumulate(&mut grads, *id, g.clone());
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves[idx] = Some(g);
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let with_shape = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(gd, self.value(*b).data(), &mut ga, m, n, k);
                    accumulate(grads, *a, with_shape(sa, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), gd, &mut gb, m, k, n);
                    accumulate(grads, *b, with_shape(sb, gb));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &db[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            gemm(g_blk, b_blk, out, m, n, k);
                        } else {
                            gemm_nt(g_blk, b_blk, out, m, n, k);
                        }
                    }
                    accumulate(grads, *a, with_shape(sa, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &da[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            gemm_tn(g_blk, a_blk, out, m, n, k);
                        } else {
                            gemm_tn(a_blk, g_blk, out, m, k, n);
                        }
                    }
                    accumulate(grads, *b, with_shape(sb, gb));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, with_shape(g.shape(), gd.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, with_shape(g.shape(), gd.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, with_shape(g.shape(), gd.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, with_shape(g.shape(), gd.iter().zip(vb).map(|(g, y)| g / y).collect()));
                }
                if self.wants(*b) {
                    let gb = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    accumulate(grads, *b, with_shape(g.shape(), gb));
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => accumulate(grads, *a, with_shape(g.shape(), gd.iter().map(|v| v * s).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *a, with_shape(g.shape(), ga));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, with_shape(g.shape(), gd.iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, with_shape(g.shape(), gd.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let ga = gd
                    .iter()
                    .zip(y)
                    .map(|(g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                    .collect();
                accumulate(grads, *a, with_shape(g.shape(), ga));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, with_shape(g.shape(), ga));
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut gb = vec![0.0; n];
                    for chunk in gd.chunks(n.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *bias, with_shape(&[n], gb));
                }
            }
            Op::MulRow(x, row) => {
                let n = self.shape(*row)[0];
                let r = self.value(*row).data();
                if self.wants(*x) {
                    let gx = gd
                        .chunks(n.max(1))
                        .flat_map(|c| c.iter().zip(r).map(|(g, r)| g * r))
                        .collect();
                    accumulate(grads, *x, with_shape(g.shape(), gx));
                }
                if self.wants(*row) {
                    let xv = self.value(*x).data();
                    let mut gr = vec![0.0; n];
                    for (gc, xc) in gd.chunks(n.max(1)).zip(xv.chunks(n.max(1))) {
                        for j in 0..n {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(grads, *row, with_shape(&[n], gr));
                }
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, gd[0]));
            }
            Op::Mean(a) => {
                let s = self.shape(*a);
                let n: usize = s.iter().product();
                accumulate(grads, *a, Tensor::full(s, gd[0] / n as f64));
            }
            Op::SumLast(a) => {
                let s = self.shape(*a);
                let n = s[s.len() - 1];
                let ga = gd.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                accumulate(grads, *a, with_shape(s, ga));
            }
            Op::MeanAxis(a, axis) => {
                let s = self.shape(*a);
                let (outer, len, inner) = axis_split(s, *axis);
                let scale = 1.0 / len as f64;
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, *a, with_shape(s, ga));
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, with_shape(self.shape(*a), gd.to_vec()));
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inverse);
                accumulate(grads, *a, with_shape(&shape, data));
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        accumulate(grads, p, with_shape(self.shape(p), gp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, full, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(grads, *x, with_shape(sx, gx));
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, with_shape(node.value.shape(), ga));
            }
            Op::Normalize { x, inv_std } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.len());
                for ((gr, yr), is) in gd.chunks(d).zip(y.chunks(d)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    gx.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mean_g - y * mean_gy)));
                }
                accumulate(grads, *x, with_shape(node.value.shape(), gx));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(node, gd, *x, *w, *b, *stride, *pad, grads);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (g, &src) in gd.iter().zip(argmax) {
                    gx[src] += g;
                }
                accumulate(grads, *x, with_shape(self.shape(*x), gx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        gd: &[f64],
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
        let (xd, wdata) = (self.value(x).data(), self.value(w).data());
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let geo = ConvGeometry { cin, h, w: wd, kh, kw, oh, ow, stride, pad };
        let (ck, np, img) = (cin * kh * kw, oh * ow, cin * h * wd);
        let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
        let mut gw = vec![0.0; if want_w { wdata.len() } else { 0 }];
        let mut gb = vec![0.0; cout];
        let mut cols = vec![0.0; ck * np];
        for n in 0..batch {
            let g_n = &gd[n * cout * np..(n + 1) * cout * np];
            for (o, chunk) in g_n.chunks(np).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
            if want_w {
                geo.im2col(&xd[n * img..(n + 1) * img], &mut cols);
                gemm_nt(g_n, &cols, &mut gw, cout, np, ck);
            }
            if want_x {
                cols.fill(0.0);
                gemm_tn(wdata, g_n, &mut cols, cout, ck, np);
                geo.col2im_add(&cols, &mut gx[n * img..(n + 1) * img]);
            }
        }
        if want_x {
            accumulate(grads, x, Tensor::new(sx.to_vec(), gx).expect("conv grad"));
        }
        if want_w {
            accumulate(grads, w, Tensor::new(sw.to_vec(), gw).expect("conv grad"));
        }
        if self.wants(b) {
            accumulate(grads, b, Tensor::new(vec![cout], gb).expect("conv grad"));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
