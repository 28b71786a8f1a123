//! Scaled dot-product attention and the pre-norm transformer block.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

use super::layers::{layer_norm, linear, linear_raw};
use super::{Bound, LayerParams, Parameterized};

/// `softmax(QKᵀ/√dk)·V` for `[b, s, dk]` queries/keys and `[b, s, dv]` values.
pub fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    attention_with_weights(g, q, k, v).map(|(out, _)| out)
}

/// Same as [`attention`] but also returns the `[b, s, s]` weight node.
pub fn attention_with_weights(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let ok = sq.len() == 3
        && sk.len() == 3
        && sv.len() == 3
        && sq[0] == sk[0]
        && sk[0] == sv[0]
        && sq[2] == sk[2]
        && sk[1] == sv[1]
        && sq[1] == sk[1];
    if !ok {
        return Err(Error::dim(
            "attention",
            format!("incompatible Q {sq:?}, K {sk:?}, V {sv:?}"),
        ));
    }
    let dk = sq[2];
    let scores = g.batch_matmul(q, k, true)?;
    let scaled = g.mul_scalar(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax(scaled, 2)?;
    let out = g.batch_matmul(weights, v, false)?;
    Ok((out, weights))
}

/// `[b, s, d] -> [b·h, s, d/h]`
fn split_heads(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, len, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, len, d / heads])
}

/// `[b·h, s, dh] -> [b, s, h·dh]`
fn merge_heads(g: &mut Graph, x: NodeId, batch: usize, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (len, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, len, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, len, heads * dh])
}

/// Multi-head self-attention with weights `[wq, bq, wk, bk, wv, bv, wo, bo]`.
pub fn multi_head_self_attention(g: &mut Graph, s: NodeId, p: &Bound, heads: usize) -> Result<NodeId> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("multi_head_self_attention", format!("expected [b, s, d], got {shape:?}")));
    }
    if p.ids.len() != 8 {
        return Err(Error::dim("multi_head_self_attention", format!("expected 8 weight tensors, got {}", p.ids.len())));
    }
    let (b, d) = (shape[0], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
    }
    let w = &p.ids;
    let q = linear_raw(g, s, w[0], w[1])?;
    let k = linear_raw(g, s, w[2], w[3])?;
    let v = linear_raw(g, s, w[4], w[5])?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let ctx = attention(g, q, k, v)?;
    let ctx = merge_heads(g, ctx, b, heads)?;
    linear_raw(g, ctx, w[6], w[7])
}

/// Pre-norm encoder block:
/// `h = S + MHSA(LN(S))`, `out = h + W2·relu(W1·LN(h))` with hidden width `4d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: LayerParams,
    pub attn: LayerParams,
    pub ln2: LayerParams,
    pub ff1: LayerParams,
    pub ff2: LayerParams,
}

/// Graph leaves of one bound [`TransformerBlock`].
pub struct BoundBlock {
    ln1: Bound,
    attn: Bound,
    ln2: Bound,
    ff1: Bound,
    ff2: Bound,
}

impl BoundBlock {
    pub fn into_vec(self) -> Vec<Bound> {
        vec![self.ln1, self.attn, self.ln2, self.ff1, self.ff2]
    }
}

impl TransformerBlock {
    pub const FFN_MULTIPLIER: usize = 4;

    pub fn new(prefix: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        let hidden = Self::FFN_MULTIPLIER * dim;
        Ok(TransformerBlock {
            heads,
            ln1: LayerParams::layer_norm(&format!("{prefix}.ln1"), dim, seed),
            attn: LayerParams::attention(&format!("{prefix}.attn"), dim, seed),
            ln2: LayerParams::layer_norm(&format!("{prefix}.ln2"), dim, seed),
            ff1: LayerParams::linear(&format!("{prefix}.ff1"), dim, hidden, seed),
            ff2: LayerParams::linear(&format!("{prefix}.ff2"), hidden, dim, seed),
        })
    }

    /// Zeroes both residual-branch output projections so the block becomes
    /// an exact identity map.
    pub fn zero_output_projections(&mut self) {
        for w in &mut self.attn.weights[6..8] {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.ff2.zero();
    }

    pub fn bind(&self, g: &mut Graph) -> BoundBlock {
        BoundBlock {
            ln1: self.ln1.bind(g),
            attn: self.attn.bind(g),
            ln2: self.ln2.bind(g),
            ff1: self.ff1.bind(g),
            ff2: self.ff2.bind(g),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: NodeId, p: &BoundBlock) -> Result<NodeId> {
        let n1 = layer_norm(g, s, &p.ln1)?;
        let a = multi_head_self_attention(g, n1, &p.attn, self.heads)?;
        let h = g.add(s, a)?;
        let n2 = layer_norm(g, h, &p.ln2)?;
        let f = linear(g, n2, &p.ff1)?;
        let f = g.relu(f)?;
        let f = linear(g, f, &p.ff2)?;
        g.add(h, f)
    }
}

impl Parameterized for TransformerBlock {
    fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.ln1, &self.attn, &self.ln2, &self.ff1, &self.ff2]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.ln1, &mut self.attn, &mut self.ln2, &mut self.ff1, &mut self.ff2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-element evaluation of softmax(QKᵀ/√dk)V.
    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (b, s, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let dv = v.shape()[2];
        let mut out = vec![0.0; b * s * dv];
        for bi in 0..b {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        (0..dk)
                            .map(|t| q.data()[(bi * s + i) * dk + t] * k.data()[(bi * s + j) * dk + t])
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dv {
                    out[(bi * s + i) * dv + c] =
                        (0..s).map(|j| e[j] / z * v.data()[(bi * s + j) * dv + c]).sum();
                }
            }
        }
        Tensor::new(vec![b, s, dv], out).unwrap()
    }

    #[test]
    fn zero_queries_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vt = Tensor::uniform(&[1, 3, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 3, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 4]));
        let v = g.constant(vt.clone());
        let out = attention(&mut g, q, k, v).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mean = (0..3).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 3.0;
                assert!((g.value(out).data()[i * 2 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_returns_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let v = g.constant(Tensor::new(vec![2, 1, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let out = attention(&mut g, q, q, v).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qt = Tensor::uniform(&[2, 4, 3], 2.0, &mut rng);
        let kt = Tensor::uniform(&[2, 4, 3], 2.0, &mut rng);
        let vt = Tensor::uniform(&[2, 4, 5], 2.0, &mut rng);
        let expected = naive_attention(&qt, &kt, &vt);
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
        let (out, w) = attention_with_weights(&mut g, q, k, v).unwrap();
        assert!(g.value(out).max_abs_diff(&expected) < 1e-10);
        for row in g.value(w).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 3, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(matches!(attention(&mut g, q, k, k), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_head_identity_projections_reduce_to_attention() {
        let d = 4;
        let mut p = LayerParams::attention("a", d, 0);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = if i % 2 == 0 { eye.clone() } else { Tensor::zeros(&[d]) };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = Tensor::uniform(&[2, 3, d], 1.0, &mut rng);
        let expected = naive_attention(&st, &st, &st);
        let mut g = Graph::new();
        let s = g.constant(st);
        let bound = p.bind(&mut g);
        let out = multi_head_self_attention(&mut g, s, &bound, 1).unwrap();
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn mhsa_shape_and_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for heads in [1, 2, 3, 6] {
            let p = LayerParams::attention("a", 6, 1);
            let mut g = Graph::new();
            let s = g.constant(Tensor::uniform(&[2, 4, 6], 1.0, &mut rng));
            let bound = p.bind(&mut g);
            let out = multi_head_self_attention(&mut g, s, &bound, heads).unwrap();
            assert_eq!(g.shape(out), &[2, 4, 6]);
        }
        let p = LayerParams::attention("a", 6, 1);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 2, 6]));
        let bound = p.bind(&mut g);
        assert!(matches!(multi_head_self_attention(&mut g, s, &bound, 4), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_projections_make_identity_block() {
        let mut block = TransformerBlock::new("blk", 8, 4, 3).unwrap();
        block.zero_output_projections();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st = Tensor::uniform(&[2, 4, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.constant(st.clone());
        let bound = block.bind(&mut g);
        let out = block.forward(&mut g, s, &bound).unwrap();
        assert_eq!(g.value(out), &st);
    }

    #[test]
    fn block_preserves_shape_at_full_width() {
        let block = TransformerBlock::new("blk", 400, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let s = g.constant(Tensor::uniform(&[1, 4, 400], 1.0, &mut rng));
        let bound = block.bind(&mut g);
        let out = block.forward(&mut g, s, &bound).unwrap();
        assert_eq!(g.shape(out), &[1, 4, 400]);
    }
}
