use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic, load_ham_style, HamOptions, SyntheticSpec, VerticalDataset};
use crate::encoders::{HeadMode, ImageEncoder, ImageEncoderConfig, TabularEncoder, TabularEncoderConfig};
use crate::error::{Error, Result};
use crate::federation::{
    audit_records, comm_report, write_transcript, AuditReport, ClientParty, CommReport, FeatureStore, Federation, PrivacyAuditor,
    RoundLog, ServerParty, TranscriptRecord,
};
use crate::fusion::{ConcatServer, FusionConfig, FusionServer, ServerModel};
use crate::metrics::{confusion, macro_metrics, MetricsReport};
use crate::tensor::Tensor;

use super::config::{DataSource, ExperimentConfig, Variant};
use super::models::CentralModel;
use super::summary::summarize;

/// Rows per forward pass when evaluating.
const EVAL_CHUNK: usize = 256;

/// Everything one (variant, seed) run produced.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: MetricsReport,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// Mean training-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub round_logs: Vec<RoundLog>,
    pub comm: Option<CommReport>,
    pub audit: Option<AuditReport>,
}

/// Builds the dataset for one seed, with canary values planted.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(VerticalDataset, Vec<f64>)> {
    let mut ds = match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic(&SyntheticSpec {
            seed: spec.seed.wrapping_add(seed),
            ..spec.clone()
        })?,
        DataSource::Ham {
            metadata,
            image_dir,
            options,
        } => load_ham_style(
            metadata,
            image_dir,
            &HamOptions {
                seed: options.seed.wrapping_add(seed),
                ..options.clone()
            },
        )?,
    };
    let canaries = plant_canaries(&mut ds, cfg.audit_canaries, seed);
    Ok((ds, canaries))
}

/// Overwrites a few raw cells of training rows with distinctive values the
/// audit later searches for. Half go to the image table, half to the
/// tabular table.
fn plant_canaries(ds: &mut VerticalDataset, count: usize, seed: u64) -> Vec<f64> {
    if count == 0 || ds.splits.train.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca4a_7e55);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let pixels: usize = ds.image.images.shape()[1..].iter().product();
    let width = ds.tabular_width();
    while out.len() < count {
        let v = f64::from(rng.gen_range(0.05f32..0.95));
        if !seen.insert(v.to_bits()) {
            continue;
        }
        let row = ds.splits.train[rng.gen_range(0..ds.splits.train.len())];
        if out.len() % 2 == 0 {
            let at = row * pixels + rng.gen_range(0..pixels);
            ds.image.images.data_mut()[at] = v;
        } else {
            let at = row * width + rng.gen_range(0..width);
            ds.tabular.features.data_mut()[at] = v;
        }
        out.push(v);
    }
    out
}

enum Learner {
    Central {
        model: CentralModel,
        images: FeatureStore,
        tabular: FeatureStore,
        labels: FeatureStore,
    },
    Federated {
        fed: Box<Federation>,
        auditor: PrivacyAuditor,
        records: Vec<TranscriptRecord>,
        logs: Vec<RoundLog>,
    },
}

impl Learner {
    fn new(cfg: &ExperimentConfig, ds: &VerticalDataset, canaries: &[f64], seed: u64) -> Result<Self> {
        let [channels, height, width] = ds.image_shape();
        let k = ds.num_classes();
        let icfg = ImageEncoderConfig {
            channels,
            height,
            width,
            embed_dim: cfg.embed_dim,
            ..Default::default()
        };
        let tcfg = TabularEncoderConfig {
            input_width: ds.tabular_width(),
            embed_dim: cfg.embed_dim,
            ..Default::default()
        };
        let central = |model| -> Result<Learner> {
            Ok(Learner::Central {
                model,
                images: ds.image_store()?,
                tabular: ds.tabular_store()?,
                labels: ds.label_store()?,
            })
        };
        match cfg.variant {
            Variant::CentralImageOnly => central(CentralModel::image_only(&icfg, k, seed)?),
            Variant::CentralMultimodal => central(CentralModel::multimodal(&icfg, &tcfg, k, seed)?),
            Variant::ConcatVfl | Variant::HybridVfl => {
                let (mode, server): (HeadMode, Box<dyn ServerModel>) = if cfg.variant == Variant::HybridVfl {
                    let fcfg = FusionConfig {
                        lambda_cons: cfg.effective_lambda(),
                        heads: cfg.heads,
                        blocks: cfg.blocks,
                        num_classes: k,
                        embed_dim: cfg.embed_dim,
                    };
                    (HeadMode::Disentangled, Box::new(FusionServer::new(&fcfg, seed)?))
                } else {
                    (HeadMode::Joint, Box::new(ConcatServer::new(cfg.embed_dim, k, seed)))
                };
                let fed = Federation::new(
                    ServerParty::new(server, ds.label_store()?),
                    ClientParty::new(Box::new(ImageEncoder::new(&icfg, mode, seed)?), ds.image_store()?),
                    ClientParty::new(Box::new(TabularEncoder::new(&tcfg, mode, seed)), ds.tabular_store()?),
                    cfg.lr,
                    cfg.wire,
                );
                Ok(Learner::Federated {
                    fed: Box::new(fed),
                    auditor: PrivacyAuditor::new(canaries, cfg.embed_dim, cfg.wire),
                    records: Vec::new(),
                    logs: Vec::new(),
                })
            }
        }
    }

    fn train_batch(&mut self, ids: &[u32], lr: f64) -> Result<f64> {
        match self {
            Learner::Central {
                model,
                images,
                tabular,
                labels,
            } => model.train_step(&images.gather(ids)?, &tabular.gather(ids)?, &labels.gather(ids)?, lr),
            Learner::Federated {
                fed,
                auditor,
                records,
                logs,
            } => {
                let out = fed.run_round(ids)?;
                for m in &out.messages {
                    auditor.observe(m);
                    records.push(TranscriptRecord::from_message(m, fed.wire));
                }
                logs.push(out.log);
                Ok(out.loss)
            }
        }
    }

    fn objective(&self, ids: &[u32]) -> Result<f64> {
        match self {
            Learner::Central {
                model,
                images,
                tabular,
                labels,
            } => model.loss(&images.gather(ids)?, &tabular.gather(ids)?, &labels.gather(ids)?),
            Learner::Federated { fed, .. } => fed.objective(ids),
        }
    }

    fn predict(&self, ids: &[u32]) -> Result<Tensor> {
        match self {
            Learner::Central {
                model,
                images,
                tabular,
                ..
            } => model.predict(&images.gather(ids)?, &tabular.gather(ids)?),
            Learner::Federated { fed, .. } => fed.predict(ids),
        }
    }

    /// Sample-weighted mean objective over `ids`.
    fn mean_objective(&self, ids: &[u32]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in ids.chunks(EVAL_CHUNK) {
            total += self.objective(chunk)? * chunk.len() as f64;
        }
        Ok(total / ids.len() as f64)
    }

    fn predicted_classes(&self, ids: &[u32]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(EVAL_CHUNK) {
            out.extend(self.predict(chunk)?.argmax_rows());
        }
        Ok(out)
    }
}

/// Trains and evaluates one seed, writing its files under
/// `out_dir/<run name>/seed<seed>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    cfg.validate()?;
    let (ds, canaries) = build_dataset(cfg, seed)?;
    let mut learner = Learner::new(cfg, &ds, &canaries, seed)?;
    let train_ids = ds.ids_at(&ds.splits.train);
    if train_ids.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (eval_name, eval_rows) = [("test", &ds.splits.test), ("val", &ds.splits.val), ("train", &ds.splits.train)]
        .into_iter()
        .find(|(_, rows)| !rows.is_empty())
        .expect("train split is non-empty");
    let eval_ids = ds.ids_at(eval_rows);

    let initial_train_loss = learner.mean_objective(&train_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ba7_c4e5);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = train_ids.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += learner.train_batch(batch, cfg.lr)? * batch.len() as f64;
        }
        epoch_losses.push(total / order.len() as f64);
    }
    let final_train_loss = learner.mean_objective(&train_ids)?;

    let truth: Vec<usize> = eval_rows.iter().map(|&r| ds.labels.labels.row(r).iter().position(|&v| v == 1.0).unwrap_or(0)).collect();
    let pred = learner.predicted_classes(&eval_ids)?;
    let metrics = macro_metrics(&confusion(&truth, &pred, ds.num_classes())?)?;

    let dir = cfg.out_dir.join(cfg.run_name()).join(format!("seed{seed}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut head = String::new();
    let _ = write!(
        head,
        "model={}\nvariant={}\nseed={seed}\nlambda_cons={}\nepochs={}\nbatch_size={}\nlr={}\n\
         train_samples={}\neval_split={eval_name}\neval_samples={}\ninitial_train_loss={}\nfinal_train_loss={}\n",
        summary_label(cfg),
        cfg.variant,
        cfg.effective_lambda(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        train_ids.len(),
        eval_ids.len(),
        initial_train_loss,
        final_train_loss
    );
    write_file(&dir.join("metrics.txt"), &(head + &metrics.to_kv()))?;
    let mut losses = String::from("epoch,train_loss\n");
    for (e, l) in epoch_losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l}", e + 1);
    }
    write_file(&dir.join("losses.csv"), &losses)?;
    let config_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("config.toml"), &config_text)?;

    let (mut round_logs, mut comm, mut audit) = (Vec::new(), None, None);
    if let Learner::Federated {
        auditor, records, logs, ..
    } = learner
    {
        write_transcript(&dir.join("transcript.csv"), &records)?;
        let mut rounds = String::from("round,batch_size,upstream_bytes,downstream_bytes,per_sample_upstream_bytes\n");
        for l in &logs {
            let _ = writeln!(
                rounds,
                "{},{},{},{},{}",
                l.round,
                l.batch_size,
                l.upstream_bytes,
                l.downstream_bytes,
                l.per_sample_upstream_bytes()
            );
        }
        write_file(&dir.join("rounds.csv"), &rounds)?;
        let report = auditor.finish();
        write_file(&dir.join("audit.txt"), &report.to_kv())?;
        write_file(&dir.join("transcript_audit.txt"), &audit_records(&records).to_kv())?;
        if !logs.is_empty() {
            let c = comm_report(&logs, cfg.raw_input)?;
            write_file(&dir.join("comm.txt"), &c.to_kv())?;
            comm = Some(c);
        }
        audit = Some(report);
        round_logs = logs;
    }

    Ok(SeedResult {
        seed,
        dir,
        metrics,
        initial_train_loss,
        final_train_loss,
        epoch_losses,
        round_logs,
        comm,
        audit,
    })
}

/// Runs every seed, then rewrites the summary table for `out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    let results = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    summarize(&cfg.out_dir)?;
    Ok(results)
}

fn summary_label(cfg: &ExperimentConfig) -> String {
    match cfg.variant {
        Variant::HybridVfl => format!("{} (lambda={})", cfg.variant.display_name(), cfg.lambda_cons),
        v => v.display_name().to_string(),
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
