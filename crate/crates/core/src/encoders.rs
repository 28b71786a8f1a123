//! Client-side dual-output encoders.
//!
//! Each client runs a shared spine (a small CNN for images, an MLP for
//! tabular rows) that feeds two independent linear heads: one for the
//! modality-invariant embedding and one for the modality-specific one.
//! The baseline concatenation variant instead uses a single joint head of
//! twice the width, split in half for transport.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, LayerParams, Parameterized};
use crate::tensor::Tensor;

/// Embedding width per transmitted tensor.
pub const DEFAULT_EMBED_DIM: usize = 400;

/// Protocol participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Server,
    ImageClient,
    TabularClient,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Server => 0,
            Role::ImageClient => 1,
            Role::TabularClient => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Server),
            1 => Some(Role::ImageClient),
            2 => Some(Role::TabularClient),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Server => "server",
            Role::ImageClient => "image_client",
            Role::TabularClient => "tabular_client",
        }
    }

    pub fn parse(name: &str) -> Option<Role> {
        [Role::Server, Role::ImageClient, Role::TabularClient]
            .into_iter()
            .find(|r| r.name() == name)
    }
}

/// The `(z_inv, z_spec)` pair one client emits for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub z_inv: Tensor,
    pub z_spec: Tensor,
    pub source: Role,
    pub batch_ids: Vec<u32>,
}

impl EmbeddingBundle {
    pub fn batch_size(&self) -> usize {
        self.batch_ids.len()
    }
}

/// Graph handles of the two embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingNodes {
    pub inv: NodeId,
    pub spec: NodeId,
}

pub struct EncoderOutput {
    pub nodes: EmbeddingNodes,
    pub bound: Vec<Bound>,
}

/// Output heads on top of a spine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// Separate invariant and specific heads, each `embed_dim` wide.
    Disentangled,
    /// One head `2·embed_dim` wide; its halves are transmitted as the pair.
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
enum Heads {
    Dual { inv: LayerParams, spec: LayerParams },
    Joint(LayerParams),
}

impl Heads {
    fn new(prefix: &str, hidden: usize, embed_dim: usize, mode: HeadMode, seed: u64) -> Self {
        match mode {
            HeadMode::Disentangled => Heads::Dual {
                inv: LayerParams::linear(&format!("{prefix}.head_inv"), hidden, embed_dim, seed),
                spec: LayerParams::linear(&format!("{prefix}.head_spec"), hidden, embed_dim, seed),
            },
            HeadMode::Joint => Heads::Joint(LayerParams::linear(&format!("{prefix}.head_joint"), hidden, 2 * embed_dim, seed)),
        }
    }

    fn layers(&self) -> Vec<&LayerParams> {
        match self {
            Heads::Dual { inv, spec } => vec![inv, spec],
            Heads::Joint(p) => vec![p],
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        match self {
            Heads::Dual { inv, spec } => vec![inv, spec],
            Heads::Joint(p) => vec![p],
        }
    }

    fn forward(&self, g: &mut Graph, features: NodeId, embed_dim: usize) -> Result<(EmbeddingNodes, Vec<Bound>)> {
        match self {
            Heads::Dual { inv, spec } => {
                let bi = inv.bind(g);
                let bs = spec.bind(g);
                let z_inv = nn::linear(g, features, &bi)?;
                let z_spec = nn::linear(g, features, &bs)?;
                Ok((EmbeddingNodes { inv: z_inv, spec: z_spec }, vec![bi, bs]))
            }
            Heads::Joint(p) => {
                let b = p.bind(g);
                let z = nn::linear(g, features, &b)?;
                let first = g.narrow(z, 1, 0, embed_dim)?;
                let second = g.narrow(z, 1, embed_dim, embed_dim)?;
                Ok((EmbeddingNodes { inv: first, spec: second }, vec![b]))
            }
        }
    }
}

/// Image-side hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            channels: 3,
            height: 28,
            width: 28,
            conv1: 8,
            conv2: 16,
            hidden: 128,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

/// conv→relu→pool ×2 → flatten → linear → relu.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSpine {
    pub cfg: ImageEncoderConfig,
    pub conv1: LayerParams,
    pub conv2: LayerParams,
    pub fc: LayerParams,
}

impl ImageSpine {
    pub fn new(cfg: &ImageEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.height % 4 != 0 || cfg.width % 4 != 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 4",
                cfg.height, cfg.width
            )));
        }
        let flat = cfg.conv2 * (cfg.height / 4) * (cfg.width / 4);
        Ok(ImageSpine {
            cfg: cfg.clone(),
            conv1: LayerParams::conv("image.conv1", cfg.channels, cfg.conv1, 3, seed),
            conv2: LayerParams::conv("image.conv2", cfg.conv1, cfg.conv2, 3, seed),
            fc: LayerParams::linear("image.fc", flat, cfg.hidden, seed),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<Bound>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::dim(
                "encode_image",
                format!("expected [b, {}, H, W], got {s:?}", self.cfg.channels),
            ));
        }
        if s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(Error::dim(
                "encode_image",
                format!("expected {}x{} images, got {}x{}", self.cfg.height, self.cfg.width, s[2], s[3]),
            ));
        }
        let (b1, b2, b3) = (self.conv1.bind(g), self.conv2.bind(g), self.fc.bind(g));
        let h = nn::conv2d(g, x, &b1, 1, 1)?;
        let h = g.relu(h)?;
        let h = nn::max_pool2(g, h)?;
        let h = nn::conv2d(g, h, &b2, 1, 1)?;
        let h = g.relu(h)?;
        let h = nn::max_pool2(g, h)?;
        let h = nn::flatten(g, h)?;
        let h = nn::linear(g, h, &b3)?;
        let h = g.relu(h)?;
        Ok((h, vec![b1, b2, b3]))
    }

    pub fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.conv1, &self.conv2, &self.fc]
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.conv1, &mut self.conv2, &mut self.fc]
    }
}

/// Tabular-side hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoderConfig {
    pub input_width: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for TabularEncoderConfig {
    fn default() -> Self {
        TabularEncoderConfig {
            input_width: 20,
            hidden: 64,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

/// linear→relu→linear→relu.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularSpine {
    pub cfg: TabularEncoderConfig,
    pub fc1: LayerParams,
    pub fc2: LayerParams,
}

impl TabularSpine {
    pub fn new(cfg: &TabularEncoderConfig, seed: u64) -> Self {
        TabularSpine {
            cfg: cfg.clone(),
            fc1: LayerParams::linear("tabular.fc1", cfg.input_width, cfg.hidden, seed),
            fc2: LayerParams::linear("tabular.fc2", cfg.hidden, cfg.hidden, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<Bound>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.input_width {
            return Err(Error::Validation(format!(
                "tabular rows must be [b, {}] to match fitted preprocessing, got {s:?}",
                self.cfg.input_width
            )));
        }
        let (b1, b2) = (self.fc1.bind(g), self.fc2.bind(g));
        let h = nn::linear(g, x, &b1)?;
        let h = g.relu(h)?;
        let h = nn::linear(g, h, &b2)?;
        let h = g.relu(h)?;
        Ok((h, vec![b1, b2]))
    }

    pub fn layers(&self) -> Vec<&LayerParams> {
        vec![&self.fc1, &self.fc2]
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.fc1, &mut self.fc2]
    }
}

/// Encoder run by one client.
pub trait ClientEncoder: Parameterized + Send {
    fn role(&self) -> Role;
    fn embed_dim(&self) -> usize;
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<EncoderOutput>;

    /// Forward pass outside training, packaged as a bundle.
    fn encode(&self, x: &Tensor, batch_ids: &[u32]) -> Result<EmbeddingBundle> {
        if x.shape().first() != Some(&batch_ids.len()) {
            return Err(Error::Alignment(format!(
                "{} rows but {} batch ids",
                x.shape().first().copied().unwrap_or(0),
                batch_ids.len()
            )));
        }
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, xn)?;
        Ok(EmbeddingBundle {
            z_inv: g.value(out.nodes.inv).clone(),
            z_spec: g.value(out.nodes.spec).clone(),
            source: self.role(),
            batch_ids: batch_ids.to_vec(),
        })
    }
}

/// `E_I`: CNN spine with two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub spine: ImageSpine,
    heads: Heads,
}

impl ImageEncoder {
    pub fn new(cfg: &ImageEncoderConfig, mode: HeadMode, seed: u64) -> Result<Self> {
        Ok(ImageEncoder {
            spine: ImageSpine::new(cfg, seed)?,
            heads: Heads::new("image", cfg.hidden, cfg.embed_dim, mode, seed),
        })
    }

    pub fn head_layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.heads.layers_mut()
    }
}

impl Parameterized for ImageEncoder {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.spine.layers();
        v.extend(self.heads.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.spine.layers_mut();
        v.extend(self.heads.layers_mut());
        v
    }
}

impl ClientEncoder for ImageEncoder {
    fn role(&self) -> Role {
        Role::ImageClient
    }

    fn embed_dim(&self) -> usize {
        self.spine.cfg.embed_dim
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<EncoderOutput> {
        let (h, mut bound) = self.spine.forward(g, x)?;
        let (nodes, head_bound) = self.heads.forward(g, h, self.embed_dim())?;
        bound.extend(head_bound);
        Ok(EncoderOutput { nodes, bound })
    }
}

/// `E_T`: MLP spine with two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularEncoder {
    pub spine: TabularSpine,
    heads: Heads,
}

impl TabularEncoder {
    pub fn new(cfg: &TabularEncoderConfig, mode: HeadMode, seed: u64) -> Self {
        TabularEncoder {
            spine: TabularSpine::new(cfg, seed),
            heads: Heads::new("tabular", cfg.hidden, cfg.embed_dim, mode, seed),
        }
    }

    pub fn head_layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.heads.layers_mut()
    }
}

impl Parameterized for TabularEncoder {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.spine.layers();
        v.extend(self.heads.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.spine.layers_mut();
        v.extend(self.heads.layers_mut());
        v
    }
}

impl ClientEncoder for TabularEncoder {
    fn role(&self) -> Role {
        Role::TabularClient
    }

    fn embed_dim(&self) -> usize {
        self.spine.cfg.embed_dim
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<EncoderOutput> {
        let (h, mut bound) = self.spine.forward(g, x)?;
        let (nodes, head_bound) = self.heads.forward(g, h, self.embed_dim())?;
        bound.extend(head_bound);
        Ok(EncoderOutput { nodes, bound })
    }
}
