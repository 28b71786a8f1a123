//! Protocol messages and their little-endian wire encoding.
//!
//! ```text
//! header   round: u32 | sender: u8 | kind: u8
//! ids      count: u32 | id: u32 × count
//! tensor   rank: u8 | dim: u32 × rank | value: f32 × product(dims)   (×2, uploads/downloads only)
//! ```
//!
//! Kind codes: 0 batch request, 1 embedding upload, 2 gradient download to
//! the image client, 3 gradient download to the tabular client. Values are
//! rounded to nearest `f32` on encode; [`WirePrecision::F64`] keeps full
//! precision for equivalence testing.

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingBundle, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WirePrecision {
    #[default]
    F32,
    F64,
}

impl WirePrecision {
    pub fn bytes_per_value(self) -> usize {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }

    /// Value as it arrives on the other side of the wire.
    pub fn round_trip(self, v: f64) -> f64 {
        match self {
            WirePrecision::F32 => f64::from(v as f32),
            WirePrecision::F64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MessageKind {
    BatchRequest {
        batch_ids: Vec<u32>,
    },
    EmbeddingUpload(EmbeddingBundle),
    GradientDownload {
        recipient: Role,
        grad_inv: Tensor,
        grad_spec: Tensor,
        batch_ids: Vec<u32>,
    },
}

impl MessageKind {
    pub fn code(&self) -> u8 {
        match self {
            MessageKind::BatchRequest { .. } => 0,
            MessageKind::EmbeddingUpload(_) => 1,
            MessageKind::GradientDownload { recipient: Role::TabularClient, .. } => 3,
            MessageKind::GradientDownload { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::BatchRequest { .. } => "batch_request",
            MessageKind::EmbeddingUpload(_) => "embedding_upload",
            MessageKind::GradientDownload { .. } => "gradient_download",
        }
    }

    pub fn batch_ids(&self) -> &[u32] {
        match self {
            MessageKind::BatchRequest { batch_ids } => batch_ids,
            MessageKind::EmbeddingUpload(b) => &b.batch_ids,
            MessageKind::GradientDownload { batch_ids, .. } => batch_ids,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            MessageKind::BatchRequest { .. } => vec![],
            MessageKind::EmbeddingUpload(b) => vec![&b.z_inv, &b.z_spec],
            MessageKind::GradientDownload { grad_inv, grad_spec, .. } => vec![grad_inv, grad_spec],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMessage {
    pub round: u32,
    pub sender: Role,
    pub kind: MessageKind,
}

impl ProtocolMessage {
    /// Bytes of tensor values carried by this message (the embedding or
    /// gradient payload, excluding framing).
    pub fn payload_bytes(&self, precision: WirePrecision) -> usize {
        self.kind.tensors().iter().map(|t| t.numel()).sum::<usize>() * precision.bytes_per_value()
    }

    /// Who the message is addressed to; `None` for the broadcast request.
    pub fn recipient(&self) -> Option<Role> {
        match &self.kind {
            MessageKind::BatchRequest { .. } => None,
            MessageKind::EmbeddingUpload(_) => Some(Role::Server),
            MessageKind::GradientDownload { recipient, .. } => Some(*recipient),
        }
    }

    /// Copy with every tensor value passed through the wire rounding.
    pub fn rounded(&self, precision: WirePrecision) -> ProtocolMessage {
        let round_tensor = |t: &Tensor| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| precision.round_trip(v)).collect())
                .expect("shape preserved")
        };
        let kind = match &self.kind {
            MessageKind::BatchRequest { .. } => self.kind.clone(),
            MessageKind::EmbeddingUpload(b) => MessageKind::EmbeddingUpload(EmbeddingBundle {
                z_inv: round_tensor(&b.z_inv),
                z_spec: round_tensor(&b.z_spec),
                source: b.source,
                batch_ids: b.batch_ids.clone(),
            }),
            MessageKind::GradientDownload { recipient, grad_inv, grad_spec, batch_ids } => MessageKind::GradientDownload {
                recipient: *recipient,
                grad_inv: round_tensor(grad_inv),
                grad_spec: round_tensor(grad_spec),
                batch_ids: batch_ids.clone(),
            },
        };
        ProtocolMessage {
            round: self.round,
            sender: self.sender,
            kind,
        }
    }
}

/// Encodes a message; deterministic for a given precision.
pub fn serialize(m: &ProtocolMessage, precision: WirePrecision) -> Vec<u8> {
    let ids = m.kind.batch_ids();
    let tensors = m.kind.tensors();
    let mut out = Vec::with_capacity(
        HEADER_LEN
            + 4
            + 4 * ids.len()
            + tensors.iter().map(|t| 1 + 4 * t.rank()).sum::<usize>()
            + m.payload_bytes(precision),
    );
    out.extend_from_slice(&m.round.to_le_bytes());
    out.push(m.sender.code());
    out.push(m.kind.code());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for t in tensors {
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match precision {
            WirePrecision::F32 => {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            WirePrecision::F64 => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Codec {
                offset: self.pos,
                detail: format!("truncated buffer: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, precision: WirePrecision) -> Result<Tensor> {
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dim")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Codec {
            offset: self.pos,
            detail: format!("tensor shape {shape:?} overflows"),
        })?;
        let width = precision.bytes_per_value();
        let bytes = n.checked_mul(width).ok_or_else(|| Error::Codec {
            offset: self.pos,
            detail: "tensor too large".into(),
        })?;
        let raw = self.take(bytes, "tensor values")?;
        let data = match precision {
            WirePrecision::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
            WirePrecision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Tensor::new(shape, data)
    }
}

/// Decodes one message; the buffer must contain exactly one message.
pub fn deserialize(bytes: &[u8], precision: WirePrecision) -> Result<ProtocolMessage> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let round = r.u32("round")?;
    let sender_at = r.pos;
    let sender_code = r.u8("sender")?;
    let sender = Role::from_code(sender_code).ok_or_else(|| Error::Codec {
        offset: sender_at,
        detail: format!("unknown sender code {sender_code}"),
    })?;
    let kind_at = r.pos;
    let kind_code = r.u8("kind")?;
    let count = r.u32("id count")? as usize;
    if count > (bytes.len() - r.pos) / 4 {
        return Err(Error::Codec {
            offset: r.pos,
            detail: format!("truncated buffer: {count} ids declared"),
        });
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.u32("id")?);
    }
    let kind = match kind_code {
        0 => MessageKind::BatchRequest { batch_ids: ids },
        1 => {
            let z_inv = r.tensor(precision)?;
            let z_spec = r.tensor(precision)?;
            MessageKind::EmbeddingUpload(EmbeddingBundle {
                z_inv,
                z_spec,
                source: sender,
                batch_ids: ids,
            })
        }
        2 | 3 => {
            let grad_inv = r.tensor(precision)?;
            let grad_spec = r.tensor(precision)?;
            MessageKind::GradientDownload {
                recipient: if kind_code == 2 { Role::ImageClient } else { Role::TabularClient },
                grad_inv,
                grad_spec,
                batch_ids: ids,
            }
        }
        other => {
            return Err(Error::Codec {
                offset: kind_at,
                detail: format!("unknown message kind {other}"),
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Codec {
            offset: r.pos,
            detail: format!("overlong buffer: {} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ProtocolMessage { round, sender, kind })
}
