//! Experiment configuration, the four model variants, training runs and
//! result tables.

mod config;
mod models;
mod run;
mod summary;

pub use config::{DataSource, ExperimentConfig, Variant};
pub use models::CentralModel;
pub use run::{build_dataset, run, run_seed, SeedResult};
pub use summary::{mean_std, parse_kv, summarize, SummaryRow, SUMMARY_METRICS};
