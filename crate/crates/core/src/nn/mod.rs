//! Layer and loss primitives.
//!
//! Parameters live in [`LayerParams`] outside any graph. Each forward pass
//! binds them into a fresh [`Graph`] as trainable leaves; the resulting
//! [`Bound`] handle maps leaf gradients back onto the parameter list for
//! [`sgd_step`].

mod attention;
mod layers;
mod loss;

pub use attention::{attention, attention_with_weights, multi_head_self_attention, TransformerBlock};
pub use layers::{conv2d, flatten, layer_norm, linear, max_pool2, mean_pool, softmax, LAYER_NORM_EPS};
pub use loss::{cosine_consistency, cross_entropy, validate_one_hot, CLAMP_FLOOR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named group of trainable tensors belonging to one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weights: Vec<Tensor>,
    pub seed: u64,
}

/// Graph leaves for one [`LayerParams`], in weight order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|&id| grads.get(id).cloned().expect("bound leaf requires grad"))
            .collect()
    }
}

/// Mixes a model-level seed with a layer name into a per-layer seed.
pub fn layer_seed(base: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl LayerParams {
    /// Dense layer `W: [in, out]`, `b: [out]`, both uniform in ±√(1/in).
    pub fn linear(name: &str, fan_in: usize, fan_out: usize, base_seed: u64) -> Self {
        let seed = layer_seed(base_seed, name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, &mut rng);
        let b = Tensor::uniform(&[fan_out], bound, &mut rng);
        LayerParams {
            name: name.to_string(),
            weights: vec![w, b],
            seed,
        }
    }

    /// Convolution kernel `[cout, cin, k, k]` plus bias `[cout]`.
    pub fn conv(name: &str, cin: usize, cout: usize, kernel: usize, base_seed: u64) -> Self {
        let seed = layer_seed(base_seed, name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / (cin * kernel * kernel).max(1) as f64).sqrt();
        let w = Tensor::uniform(&[cout, cin, kernel, kernel], bound, &mut rng);
        let b = Tensor::uniform(&[cout], bound, &mut rng);
        LayerParams {
            name: name.to_string(),
            weights: vec![w, b],
            seed,
        }
    }

    /// Layer-norm gain (ones) and bias (zeros).
    pub fn layer_norm(name: &str, dim: usize, base_seed: u64) -> Self {
        LayerParams {
            name: name.to_string(),
            weights: vec![Tensor::ones(&[dim]), Tensor::zeros(&[dim])],
            seed: layer_seed(base_seed, name),
        }
    }

    /// Query, key, value and output projections `[wq, bq, wk, bk, wv, bv, wo, bo]`.
    pub fn attention(name: &str, dim: usize, base_seed: u64) -> Self {
        let seed = layer_seed(base_seed, name);
        let mut weights = Vec::with_capacity(8);
        for part in ["q", "k", "v", "o"] {
            let lin = LayerParams::linear(&format!("{name}.{part}"), dim, dim, base_seed);
            weights.extend(lin.weights);
        }
        LayerParams {
            name: name.to_string(),
            weights,
            seed,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self.weights.iter().map(|w| g.param(w.clone())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Plain SGD: `w ← w − lr·g` for every weight.
///
/// `grads[i]` must hold one tensor per weight of `params[i]`, with matching
/// shapes.
pub fn sgd_step(params: &mut [&mut LayerParams], grads: &[Vec<Tensor>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameter groups but {} gradient groups",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.weights.len() != g.len()
            || p.weights.iter().zip(g).any(|(w, gw)| w.shape() != gw.shape())
        {
            return Err(Error::Contract(format!(
                "gradients for layer {} do not match its weights",
                p.name
            )));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, gw) in p.weights.iter_mut().zip(g) {
            for (v, d) in w.data_mut().iter_mut().zip(gw.data()) {
                *v -= lr * d;
            }
        }
    }
    Ok(())
}

/// Anything that owns trainable layers in a fixed order.
pub trait Parameterized {
    fn layers(&self) -> Vec<&LayerParams>;
    fn layers_mut(&mut self) -> Vec<&mut LayerParams>;

    fn num_scalars(&self) -> usize {
        self.layers().iter().map(|l| l.num_scalars()).sum()
    }

    /// Applies one SGD update from gradients aligned with [`Self::layers`].
    fn apply_sgd(&mut self, grads: &[Vec<Tensor>], lr: f64) -> Result<()> {
        let mut layers = self.layers_mut();
        sgd_step(&mut layers, grads, lr)
    }
}

/// Largest absolute weight difference between two parameter sets with the
/// same layout.
pub fn max_param_diff(a: &[&LayerParams], b: &[&LayerParams]) -> f64 {
    assert_eq!(a.len(), b.len(), "parameter layouts differ");
    a.iter()
        .zip(b)
        .flat_map(|(la, lb)| la.weights.iter().zip(&lb.weights))
        .map(|(wa, wb)| wa.max_abs_diff(wb))
        .fold(0.0, f64::max)
}
