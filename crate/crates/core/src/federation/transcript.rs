use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Role;
use crate::error::{Error, Result};

use super::message::{ProtocolMessage, WirePrecision};
use super::protocol::ProtocolState;

/// One line of a transcript dump. Tensor contents are never written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: u32,
    pub sender: String,
    pub kind: String,
    /// `clients` for a batch request.
    pub recipient: String,
    pub payload_bytes: usize,
}

impl TranscriptRecord {
    pub fn from_message(m: &ProtocolMessage, wire: WirePrecision) -> Self {
        TranscriptRecord {
            round: m.round,
            sender: m.sender.name().to_string(),
            kind: m.kind.name().to_string(),
            recipient: m.recipient().map_or("clients", Role::name).to_string(),
            payload_bytes: m.payload_bytes(wire),
        }
    }
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Ingestion(format!("{}: {e}", path.display()))
}

/// Summary of a transcript dump, checked without tensor contents.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordAudit {
    pub messages: usize,
    pub rounds: usize,
    pub upstream_bytes: usize,
    pub downstream_bytes: usize,
    pub protocol_error: Option<String>,
    /// Rounds whose uploads and downloads do not all carry the same payload size.
    pub inconsistent_rounds: Vec<u32>,
}

impl RecordAudit {
    pub fn passed(&self) -> bool {
        self.protocol_error.is_none() && self.inconsistent_rounds.is_empty()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "messages={}\nrounds={}\nupstream_bytes={}\ndownstream_bytes={}\nprotocol_ok={}\n\
             inconsistent_rounds={}\npassed={}\n",
            self.messages,
            self.rounds,
            self.upstream_bytes,
            self.downstream_bytes,
            self.protocol_error.is_none(),
            self.inconsistent_rounds.len(),
            self.passed()
        )
    }
}

pub fn audit_records(records: &[TranscriptRecord]) -> RecordAudit {
    let mut out = RecordAudit {
        messages: records.len(),
        ..Default::default()
    };
    let mut state = records.first().map(|r| ProtocolState::new(r.round));
    let mut sizes: Vec<(u32, usize)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if let (Some(s), None) = (state.as_mut(), &out.protocol_error) {
            let parsed = Role::parse(&r.sender)
                .ok_or_else(|| Error::Protocol(format!("unknown sender {}", r.sender)))
                .and_then(|sender| s.accept_record(r.round, sender, &r.kind, Role::parse(&r.recipient)));
            if let Err(e) = parsed {
                out.protocol_error = Some(format!("record {i}: {e}"));
            }
        }
        match r.kind.as_str() {
            "batch_request" => out.rounds += 1,
            "embedding_upload" => out.upstream_bytes += r.payload_bytes,
            _ => out.downstream_bytes += r.payload_bytes,
        }
        if r.kind != "batch_request" {
            match sizes.iter().find(|(round, _)| *round == r.round) {
                Some(&(_, size)) if size != r.payload_bytes => {
                    if !out.inconsistent_rounds.contains(&r.round) {
                        out.inconsistent_rounds.push(r.round);
                    }
                }
                Some(_) => {}
                None => sizes.push((r.round, r.payload_bytes)),
            }
        }
    }
    out
}
