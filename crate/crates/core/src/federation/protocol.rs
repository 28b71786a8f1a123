use std::collections::BTreeSet;

use crate::encoders::Role;
use crate::error::{Error, Result};

use super::message::ProtocolMessage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Idle,
    AwaitingUploads,
    AwaitingDownloads,
}

/// Validates the order of messages within and across rounds.
///
/// A round is exactly one batch request from the server, one upload from
/// each client (either order), then one gradient download to each client
/// (either order). Every message in a round carries the requested ids.
#[derive(Clone, Debug)]
pub struct ProtocolState {
    round: u32,
    phase: Phase,
    batch_ids: Vec<u32>,
    seen: BTreeSet<Role>,
}

impl Default for ProtocolState {
    fn default() -> Self {
        Self::new(0)
    }
}

impl ProtocolState {
    pub fn new(first_round: u32) -> Self {
        ProtocolState {
            round: first_round,
            phase: Phase::Idle,
            batch_ids: Vec::new(),
            seen: BTreeSet::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn accept(&mut self, m: &ProtocolMessage) -> Result<()> {
        self.check(m.sender, m.kind.code(), m.round, Some(m.kind.batch_ids()), m.recipient())
    }

    /// Same as [`Self::accept`] for a transcript record without the ids.
    pub fn accept_record(&mut self, round: u32, sender: Role, kind: &str, recipient: Option<Role>) -> Result<()> {
        let code = match (kind, recipient) {
            ("batch_request", _) => 0,
            ("embedding_upload", _) => 1,
            ("gradient_download", Some(Role::ImageClient)) => 2,
            ("gradient_download", Some(Role::TabularClient)) => 3,
            _ => return Err(Error::Protocol(format!("unknown record kind {kind} to {recipient:?}"))),
        };
        self.check(sender, code, round, None, recipient)
    }

    fn check(&mut self, sender: Role, code: u8, round: u32, ids: Option<&[u32]>, recipient: Option<Role>) -> Result<()> {
        if round != self.round {
            return Err(Error::Protocol(format!("message for round {round} during round {}", self.round)));
        }
        let unexpected = || {
            Error::Protocol(format!(
                "unexpected message kind {code} from {} in round {round} while {:?}",
                sender.name(),
                self.phase
            ))
        };
        match (self.phase, code) {
            (Phase::Idle, 0) if sender == Role::Server => {
                self.batch_ids = ids.map(<[u32]>::to_vec).unwrap_or_default();
                self.phase = Phase::AwaitingUploads;
            }
            (Phase::AwaitingUploads, 1) if sender != Role::Server => {
                self.check_ids(ids)?;
                if !self.seen.insert(sender) {
                    return Err(Error::Protocol(format!("duplicate upload from {} in round {round}", sender.name())));
                }
                if self.seen.len() == 2 {
                    self.seen.clear();
                    self.phase = Phase::AwaitingDownloads;
                }
            }
            (Phase::AwaitingDownloads, 2 | 3) if sender == Role::Server => {
                self.check_ids(ids)?;
                let to = recipient.ok_or_else(unexpected)?;
                if !self.seen.insert(to) {
                    return Err(Error::Protocol(format!("duplicate download to {} in round {round}", to.name())));
                }
                if self.seen.len() == 2 {
                    self.seen.clear();
                    self.phase = Phase::Idle;
                    self.round += 1;
                }
            }
            _ => return Err(unexpected()),
        }
        Ok(())
    }

    fn check_ids(&self, ids: Option<&[u32]>) -> Result<()> {
        match ids {
            Some(ids) if ids != self.batch_ids.as_slice() => Err(Error::Alignment(format!(
                "batch ids {:?} do not match the requested {:?}",
                preview(ids),
                preview(&self.batch_ids)
            ))),
            _ => Ok(()),
        }
    }
}

fn preview(ids: &[u32]) -> &[u32] {
    &ids[..ids.len().min(8)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EmbeddingBundle;
    use crate::federation::message::MessageKind;
    use crate::tensor::Tensor;

    fn request(round: u32, ids: &[u32]) -> ProtocolMessage {
        ProtocolMessage {
            round,
            sender: Role::Server,
            kind: MessageKind::BatchRequest { batch_ids: ids.to_vec() },
        }
    }

    fn upload(round: u32, from: Role, ids: &[u32]) -> ProtocolMessage {
        ProtocolMessage {
            round,
            sender: from,
            kind: MessageKind::EmbeddingUpload(EmbeddingBundle {
                z_inv: Tensor::zeros(&[ids.len(), 2]),
                z_spec: Tensor::zeros(&[ids.len(), 2]),
                source: from,
                batch_ids: ids.to_vec(),
            }),
        }
    }

    fn download(round: u32, to: Role, ids: &[u32]) -> ProtocolMessage {
        ProtocolMessage {
            round,
            sender: Role::Server,
            kind: MessageKind::GradientDownload {
                recipient: to,
                grad_inv: Tensor::zeros(&[ids.len(), 2]),
                grad_spec: Tensor::zeros(&[ids.len(), 2]),
                batch_ids: ids.to_vec(),
            },
        }
    }

    #[test]
    fn full_round_in_either_upload_order() {
        let ids = [4, 9];
        let mut s = ProtocolState::new(0);
        for (r, first) in [(0, Role::TabularClient), (1, Role::ImageClient)] {
            let second = if first == Role::ImageClient { Role::TabularClient } else { Role::ImageClient };
            s.accept(&request(r, &ids)).unwrap();
            s.accept(&upload(r, first, &ids)).unwrap();
            s.accept(&upload(r, second, &ids)).unwrap();
            s.accept(&download(r, Role::TabularClient, &ids)).unwrap();
            s.accept(&download(r, Role::ImageClient, &ids)).unwrap();
        }
        assert_eq!(s.round(), 2);
        assert_eq!(s.phase(), Phase::Idle);
    }

    #[test]
    fn download_before_uploads_is_rejected() {
        let mut s = ProtocolState::new(0);
        s.accept(&request(0, &[1])).unwrap();
        s.accept(&upload(0, Role::ImageClient, &[1])).unwrap();
        let err = s.accept(&download(0, Role::ImageClient, &[1])).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn duplicates_and_wrong_rounds_are_rejected() {
        let mut s = ProtocolState::new(0);
        assert!(s.accept(&upload(0, Role::ImageClient, &[1])).is_err());
        s.accept(&request(0, &[1])).unwrap();
        s.accept(&upload(0, Role::ImageClient, &[1])).unwrap();
        assert!(s.accept(&upload(0, Role::ImageClient, &[1])).is_err());
        assert!(s.accept(&upload(1, Role::TabularClient, &[1])).is_err());
        assert!(s.accept(&request(0, &[1])).is_err());
    }

    #[test]
    fn mismatched_ids_are_an_alignment_error() {
        let mut s = ProtocolState::new(0);
        s.accept(&request(0, &[1, 2])).unwrap();
        assert!(matches!(s.accept(&upload(0, Role::TabularClient, &[2, 1])), Err(Error::Alignment(_))));
    }

    #[test]
    fn records_replay_without_ids() {
        let mut s = ProtocolState::new(0);
        s.accept_record(0, Role::Server, "batch_request", None).unwrap();
        s.accept_record(0, Role::ImageClient, "embedding_upload", Some(Role::Server)).unwrap();
        s.accept_record(0, Role::TabularClient, "embedding_upload", Some(Role::Server)).unwrap();
        s.accept_record(0, Role::Server, "gradient_download", Some(Role::ImageClient)).unwrap();
        assert!(s.accept_record(0, Role::Server, "gradient_download", Some(Role::ImageClient)).is_err());
    }
}
