use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::message::{MessageKind, ProtocolMessage, WirePrecision};
use super::protocol::ProtocolState;

/// A canary value found in a message payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryHit {
    pub message_index: usize,
    pub round: u32,
    pub sender: String,
    pub kind: String,
    /// Byte offset of the match within the encoded message.
    pub offset: usize,
    pub canary: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub messages: usize,
    pub kinds: BTreeMap<String, usize>,
    pub shape_violations: Vec<String>,
    pub protocol_error: Option<String>,
    pub canary_hits: Vec<CanaryHit>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.shape_violations.is_empty() && self.protocol_error.is_none() && self.canary_hits.is_empty()
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("messages={}\n", self.messages);
        for (k, n) in &self.kinds {
            s.push_str(&format!("kind.{k}={n}\n"));
        }
        s.push_str(&format!("shape_violations={}\n", self.shape_violations.len()));
        s.push_str(&format!("protocol_ok={}\n", self.protocol_error.is_none()));
        s.push_str(&format!("canary_hits={}\n", self.canary_hits.len()));
        for h in self.canary_hits.iter().take(20) {
            s.push_str(&format!(
                "hit=message {} round {} {} {} offset {} value {}\n",
                h.message_index, h.round, h.sender, h.kind, h.offset, h.canary
            ));
        }
        s.push_str(&format!("passed={}\n", self.passed()));
        s
    }
}

/// Streaming privacy check over a transcript.
///
/// Each message must be a known kind in protocol order, every tensor must
/// be `[b, embed_dim]` for the message's batch, and no tensor value may
/// encode to the same bytes as a planted raw-input canary.
pub struct PrivacyAuditor {
    embed_dim: usize,
    wire: WirePrecision,
    canaries: HashMap<u64, f64>,
    state: Option<ProtocolState>,
    report: AuditReport,
}

impl PrivacyAuditor {
    pub fn new(canaries: &[f64], embed_dim: usize, wire: WirePrecision) -> Self {
        let canaries = canaries.iter().map(|&c| (pattern(c, wire), c)).collect();
        PrivacyAuditor {
            embed_dim,
            wire,
            canaries,
            state: None,
            report: AuditReport::default(),
        }
    }

    pub fn observe(&mut self, m: &ProtocolMessage) {
        let index = self.report.messages;
        self.report.messages += 1;
        *self.report.kinds.entry(m.kind.name().to_string()).or_default() += 1;

        if self.report.protocol_error.is_none() {
            let state = self.state.get_or_insert_with(|| ProtocolState::new(m.round));
            if let Err(e) = state.accept(m) {
                self.report.protocol_error = Some(format!("message {index}: {e}"));
            }
        }

        let b = m.kind.batch_ids().len();
        for t in m.kind.tensors() {
            if t.shape() != [b, self.embed_dim] {
                self.report.shape_violations.push(format!(
                    "message {index} ({} from {}): tensor {:?}, expected [{b}, {}]",
                    m.kind.name(),
                    m.sender.name(),
                    t.shape(),
                    self.embed_dim
                ));
            }
        }

        if self.canaries.is_empty() || matches!(m.kind, MessageKind::BatchRequest { .. }) {
            return;
        }
        let width = self.wire.bytes_per_value();
        let mut offset = 6 + 4 + 4 * b;
        for t in m.kind.tensors() {
            offset += 1 + 4 * t.rank();
            for (i, &v) in t.data().iter().enumerate() {
                if let Some(&c) = self.canaries.get(&pattern(v, self.wire)) {
                    self.report.canary_hits.push(CanaryHit {
                        message_index: index,
                        round: m.round,
                        sender: m.sender.name().to_string(),
                        kind: m.kind.name().to_string(),
                        offset: offset + i * width,
                        canary: c,
                    });
                }
            }
            offset += t.numel() * width;
        }
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    pub fn finish(self) -> AuditReport {
        self.report
    }
}

fn pattern(v: f64, wire: WirePrecision) -> u64 {
    match wire {
        WirePrecision::F32 => u64::from((v as f32).to_bits()),
        WirePrecision::F64 => v.to_bits(),
    }
}

pub fn privacy_audit(
    transcript: &[ProtocolMessage],
    canaries: &[f64],
    embed_dim: usize,
    wire: WirePrecision,
) -> AuditReport {
    let mut auditor = PrivacyAuditor::new(canaries, embed_dim, wire);
    for m in transcript {
        auditor.observe(m);
    }
    auditor.finish()
}
