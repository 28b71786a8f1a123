//! Three-party training protocol: message codec, round orchestration,
//! communication accounting and transcript auditing.

mod audit;
mod comm;
mod message;
mod monolithic;
mod protocol;
mod round;
mod transcript;

pub use audit::{privacy_audit, AuditReport, CanaryHit, PrivacyAuditor};
pub use comm::{comm_report, upstream_bytes_per_sample, CommReport, RawInputSpec};
pub use message::{deserialize, serialize, MessageKind, ProtocolMessage, WirePrecision};
pub use monolithic::monolithic_step;
pub use protocol::{Phase, ProtocolState};
pub use round::{run_round, ClientParty, FeatureStore, Federation, RoundLog, RoundOutcome, ServerParty};
pub use transcript::{audit_records, read_transcript, write_transcript, RecordAudit, TranscriptRecord};
