use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::message::WirePrecision;
use super::round::RoundLog;

/// Size of one raw image as a client would have to ship it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bytes_per_value: usize,
}

impl Default for RawInputSpec {
    fn default() -> Self {
        RawInputSpec {
            height: 100,
            width: 100,
            channels: 3,
            bytes_per_value: 4,
        }
    }
}

impl RawInputSpec {
    pub fn bytes_per_sample(&self) -> usize {
        self.height * self.width * self.channels * self.bytes_per_value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub rounds: usize,
    pub samples: usize,
    pub total_upstream_bytes: usize,
    pub total_downstream_bytes: usize,
    pub upstream_bytes_per_sample: f64,
    pub downstream_bytes_per_sample: f64,
    pub raw_bytes_per_sample: usize,
    /// Raw bytes per sample over upstream bytes per sample.
    pub reduction_ratio: f64,
}

impl CommReport {
    pub fn to_kv(&self) -> String {
        format!(
            "rounds={}\nsamples={}\ntotal_upstream_bytes={}\ntotal_downstream_bytes={}\n\
             upstream_bytes_per_sample={}\ndownstream_bytes_per_sample={}\n\
             raw_bytes_per_sample={}\nreduction_ratio={}\n",
            self.rounds,
            self.samples,
            self.total_upstream_bytes,
            self.total_downstream_bytes,
            self.upstream_bytes_per_sample,
            self.downstream_bytes_per_sample,
            self.raw_bytes_per_sample,
            self.reduction_ratio
        )
    }
}

/// Upstream bytes one sample costs: two clients × two embeddings.
pub fn upstream_bytes_per_sample(embed_dim: usize, wire: WirePrecision) -> usize {
    4 * embed_dim * wire.bytes_per_value()
}

pub fn comm_report(logs: &[RoundLog], raw: RawInputSpec) -> Result<CommReport> {
    let samples: usize = logs.iter().map(|l| l.batch_size).sum();
    if samples == 0 {
        return Err(Error::Contract("communication report needs at least one non-empty round".into()));
    }
    let up: usize = logs.iter().map(|l| l.upstream_bytes).sum();
    let down: usize = logs.iter().map(|l| l.downstream_bytes).sum();
    let per_sample = up as f64 / samples as f64;
    Ok(CommReport {
        rounds: logs.len(),
        samples,
        total_upstream_bytes: up,
        total_downstream_bytes: down,
        upstream_bytes_per_sample: per_sample,
        downstream_bytes_per_sample: down as f64 / samples as f64,
        raw_bytes_per_sample: raw.bytes_per_sample(),
        reduction_ratio: raw.bytes_per_sample() as f64 / per_sample,
    })
}
