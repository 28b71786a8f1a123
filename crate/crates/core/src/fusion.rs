//! Server-side model: invariant alignment, token-sequence fusion with a
//! transformer encoder, classification and the composite objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::encoders::{EmbeddingBundle, EmbeddingNodes, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, LayerParams, Parameterized, TransformerBlock};
use crate::tensor::Tensor;

/// Number of tokens in the fused sequence.
pub const SEQUENCE_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda_cons: f64,
    pub heads: usize,
    pub blocks: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_cons: 0.1,
            heads: 4,
            blocks: 1,
            num_classes: 7,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl FusionConfig {
    /// Total width of the four transmitted embeddings.
    pub fn embedding_budget(&self) -> usize {
        SEQUENCE_LEN * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cons >= 0.0) || !self.lambda_cons.is_finite() {
            return Err(Error::Config(format!("lambda_cons must be a non-negative number, got {}", self.lambda_cons)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("at least one transformer block is required".into()));
        }
        Ok(())
    }
}

/// Fails unless both bundles carry the same ids in the same order.
pub fn check_aligned(img: &EmbeddingBundle, tab: &EmbeddingBundle) -> Result<()> {
    if img.batch_ids != tab.batch_ids {
        let first = img
            .batch_ids
            .iter()
            .zip(&tab.batch_ids)
            .position(|(a, b)| a != b)
            .unwrap_or(img.batch_ids.len().min(tab.batch_ids.len()));
        return Err(Error::Alignment(format!(
            "batch ids diverge at position {first} ({} vs {} ids)",
            img.batch_ids.len(),
            tab.batch_ids.len()
        )));
    }
    Ok(())
}

/// Stacks `[z_inv^I, z_spec^I, z_inv^T, z_spec^T]` into `[b, 4, d]`.
pub fn build_sequence(g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<NodeId> {
    let tokens = [img.inv, img.spec, tab.inv, tab.spec];
    let shape = g.shape(tokens[0]).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("build_sequence", format!("embeddings must be [b, d], got {shape:?}")));
    }
    let mut lifted = Vec::with_capacity(SEQUENCE_LEN);
    for t in tokens {
        if g.shape(t) != shape.as_slice() {
            return Err(Error::dim("build_sequence", format!("{:?} vs {shape:?}", g.shape(t))));
        }
        lifted.push(g.reshape(t, &[shape[0], 1, shape[1]])?);
    }
    g.concat(&lifted, 1)
}

/// Value-level sequence construction from two received bundles.
pub fn sequence_from_bundles(img: &EmbeddingBundle, tab: &EmbeddingBundle) -> Result<Tensor> {
    check_aligned(img, tab)?;
    let mut g = Graph::new();
    let i = EmbeddingNodes {
        inv: g.constant(img.z_inv.clone()),
        spec: g.constant(img.z_spec.clone()),
    };
    let t = EmbeddingNodes {
        inv: g.constant(tab.z_inv.clone()),
        spec: g.constant(tab.z_spec.clone()),
    };
    let s = build_sequence(&mut g, i, t)?;
    Ok(g.value(s).clone())
}

/// Cosine consistency between the two invariant embeddings only.
pub fn consistency_loss(g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<NodeId> {
    nn::cosine_consistency(g, img.inv, tab.inv)
}

/// `cross_entropy + λ·l_cons`; with no consistency node the term is absent.
pub fn total_loss(g: &mut Graph, y_hat: NodeId, y: &Tensor, l_cons: Option<NodeId>, cfg: &FusionConfig) -> Result<NodeId> {
    if !(cfg.lambda_cons >= 0.0) {
        return Err(Error::Config(format!("lambda_cons must be non-negative, got {}", cfg.lambda_cons)));
    }
    let ce = nn::cross_entropy(g, y_hat, y)?;
    match l_cons {
        Some(l) => {
            let weighted = g.mul_scalar(l, cfg.lambda_cons)?;
            g.add(ce, weighted)
        }
        None => Ok(ce),
    }
}

/// Nodes produced by one server forward pass.
pub struct ServerOutput {
    pub loss: NodeId,
    pub probs: NodeId,
    pub consistency: Option<NodeId>,
    pub bound: Vec<Bound>,
}

/// Server-side model consuming the four embeddings.
pub trait ServerModel: Parameterized + Send {
    fn num_classes(&self) -> usize;

    /// Builds the loss graph; `labels` are one-hot `[b, K]`.
    fn forward(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes, labels: &Tensor) -> Result<ServerOutput>;

    /// Class probabilities without labels.
    fn predict(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<NodeId>;
}

/// Transformer fusion followed by a softmax classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionServer {
    pub cfg: FusionConfig,
    pub blocks: Vec<TransformerBlock>,
    pub classifier: LayerParams,
    /// When false the consistency term is never built, not merely weighted
    /// by zero.
    pub compute_consistency: bool,
}

impl FusionServer {
    pub fn new(cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(&format!("fusion.block{i}"), cfg.embed_dim, cfg.heads, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionServer {
            cfg: cfg.clone(),
            blocks,
            classifier: LayerParams::linear("fusion.classifier", cfg.embed_dim, cfg.num_classes, seed),
            compute_consistency: true,
        })
    }

    /// `mean_pool(F(S))` over all blocks.
    pub fn fuse(&self, g: &mut Graph, seq: NodeId) -> Result<(NodeId, Vec<Bound>)> {
        let mut h = seq;
        let mut bound = Vec::new();
        for block in &self.blocks {
            let b = block.bind(g);
            h = block.forward(g, h, &b)?;
            bound.extend(b.into_vec());
        }
        Ok((nn::mean_pool(g, h)?, bound))
    }

    /// `softmax(h(z_fused))`.
    pub fn classify(&self, g: &mut Graph, z_fused: NodeId) -> Result<(NodeId, Bound)> {
        let b = self.classifier.bind(g);
        let logits = nn::linear(g, z_fused, &b)?;
        Ok((g.softmax(logits, 1)?, b))
    }

    fn fuse_and_classify(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<(NodeId, Vec<Bound>)> {
        let seq = build_sequence(g, img, tab)?;
        let (z, mut bound) = self.fuse(g, seq)?;
        let (probs, cb) = self.classify(g, z)?;
        bound.push(cb);
        Ok((probs, bound))
    }
}

impl Parameterized for FusionServer {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v: Vec<&LayerParams> = self.blocks.iter().flat_map(|b| b.layers()).collect();
        v.push(&self.classifier);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v: Vec<&mut LayerParams> = self.blocks.iter_mut().flat_map(|b| b.layers_mut()).collect();
        v.push(&mut self.classifier);
        v
    }
}

impl ServerModel for FusionServer {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn forward(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes, labels: &Tensor) -> Result<ServerOutput> {
        let consistency = if self.compute_consistency {
            Some(consistency_loss(g, img, tab)?)
        } else {
            None
        };
        let (probs, bound) = self.fuse_and_classify(g, img, tab)?;
        let loss = total_loss(g, probs, labels, consistency, &self.cfg)?;
        Ok(ServerOutput {
            loss,
            probs,
            consistency,
            bound,
        })
    }

    fn predict(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<NodeId> {
        self.fuse_and_classify(g, img, tab).map(|(p, _)| p)
    }
}

/// Baseline head: concatenate the embeddings and classify.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatServer {
    pub num_classes: usize,
    pub classifier: LayerParams,
}

impl ConcatServer {
    pub fn new(embed_dim: usize, num_classes: usize, seed: u64) -> Self {
        ConcatServer {
            num_classes,
            classifier: LayerParams::linear("concat.classifier", SEQUENCE_LEN * embed_dim, num_classes, seed),
        }
    }

    fn probs(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<(NodeId, Bound)> {
        let joined = g.concat(&[img.inv, img.spec, tab.inv, tab.spec], 1)?;
        let b = self.classifier.bind(g);
        let logits = nn::linear(g, joined, &b)?;
        Ok((g.softmax(logits, 1)?, b))
    }
}

impl Parameterized for ConcatServer {
    fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.classifier]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.classifier]
    }
}

impl ServerModel for ConcatServer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes, labels: &Tensor) -> Result<ServerOutput> {
        let (probs, b) = self.probs(g, img, tab)?;
        let loss = nn::cross_entropy(g, probs, labels)?;
        Ok(ServerOutput {
            loss,
            probs,
            consistency: None,
            bound: vec![b],
        })
    }

    fn predict(&self, g: &mut Graph, img: EmbeddingNodes, tab: EmbeddingNodes) -> Result<NodeId> {
        self.probs(g, img, tab).map(|(p, _)| p)
    }
}
