use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hybridvfl::data::{HamOptions, SyntheticSpec};
use hybridvfl::experiment::{run, summarize, DataSource, ExperimentConfig, SummaryRow, Variant, SUMMARY_METRICS};
use hybridvfl::federation::{audit_records, read_transcript, WirePrecision};

/// HybridVFL consistency weights tried when neither a flag nor a config
/// file sets one.
const DEFAULT_LAMBDA_SWEEP: [f64; 3] = [0.0, 0.1, 1.0];

#[derive(Parser)]
#[command(name = "hybridvfl", version, about = "Vertical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more variants over several seeds.
    Run(RunArgs),
    /// Aggregate per-seed metrics under a results directory into summary.csv.
    Summarize {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Replay a transcript.csv through the protocol checker.
    Audit {
        #[arg(long, value_name = "FILE")]
        transcript: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Synthetic,
    Ham,
}

#[derive(Clone, Copy, ValueEnum)]
enum Wire {
    F32,
    F64,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file; flags given on the command line override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Variant name (hybrid_vfl, concat_vfl, central_multimodal,
    /// central_image_only) or `all`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_enum)]
    data: Option<DataKind>,
    /// HAM-style metadata CSV (with --data ham).
    #[arg(long, value_name = "FILE")]
    metadata: Option<PathBuf>,
    /// Directory of images named <image_id>.jpg or .png (with --data ham).
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// One weight or a comma-separated sweep [default: 0,0.1,1].
    #[arg(long, value_delimiter = ',')]
    lambda_cons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Synthetic sample count.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    interaction_strength: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Square image side for synthetic data or the HAM resize target.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_enum)]
    wire: Option<Wire>,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => run_command(args),
        Command::Summarize { input } => {
            let rows = summarize(&input)?;
            print_table(&rows);
            println!("wrote {}", input.join("summary.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { transcript } => {
            let records = read_transcript(&transcript)?;
            let report = audit_records(&records);
            print!("{}", report.to_kv());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn base_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    match args.data {
        Some(DataKind::Ham) => {
            let (Some(metadata), Some(image_dir)) = (args.metadata.clone(), args.images.clone()) else {
                bail!("--data ham needs --metadata FILE and --images DIR");
            };
            let options = match &cfg.data {
                DataSource::Ham { options, .. } => options.clone(),
                DataSource::Synthetic(_) => HamOptions::default(),
            };
            cfg.data = DataSource::Ham {
                metadata,
                image_dir,
                options,
            };
        }
        Some(DataKind::Synthetic) if !matches!(cfg.data, DataSource::Synthetic(_)) => {
            cfg.data = DataSource::Synthetic(SyntheticSpec::default());
        }
        _ => {}
    }
    match &mut cfg.data {
        DataSource::Synthetic(spec) => {
            if let Some(n) = args.n {
                spec.n = n;
            }
            if let Some(s) = args.interaction_strength {
                spec.interaction_strength = s;
            }
            if let Some(s) = args.noise {
                spec.noise = s;
            }
            if let Some(s) = args.image_size {
                (spec.height, spec.width) = (s, s);
            }
        }
        DataSource::Ham { options, .. } => {
            if args.n.is_some() || args.interaction_strength.is_some() || args.noise.is_some() {
                bail!("--n, --interaction-strength and --noise apply to synthetic data only");
            }
            if let Some(s) = args.image_size {
                options.target_size = (s, s);
            }
        }
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(w) = args.wire {
        cfg.wire = match w {
            Wire::F32 => WirePrecision::F32,
            Wire::F64 => WirePrecision::F64,
        };
    }
    Ok(cfg)
}

fn run_command(args: RunArgs) -> Result<ExitCode> {
    let base = base_config(&args)?;
    let variants = match args.variant.as_deref() {
        Some("all") => Variant::ALL.to_vec(),
        Some(name) => vec![name.parse::<Variant>()?],
        None => vec![base.variant],
    };
    let lambdas = match (&args.lambda_cons, &args.config) {
        (Some(l), _) => l.clone(),
        (None, Some(_)) => vec![base.lambda_cons],
        (None, None) => DEFAULT_LAMBDA_SWEEP.to_vec(),
    };
    let mut audits_ok = true;
    for variant in variants {
        // λ only changes HybridVFL; other variants run once.
        let sweep: &[f64] = if variant == Variant::HybridVfl { &lambdas } else { &lambdas[..1] };
        for &lambda_cons in sweep {
            let cfg = ExperimentConfig {
                variant,
                lambda_cons,
                ..base.clone()
            };
            cfg.validate()?;
            for r in run(&cfg)? {
                println!(
                    "{} seed {}: balanced_accuracy={:.4} macro_f1={:.4} train_loss {:.4} -> {:.4}",
                    cfg.run_name(),
                    r.seed,
                    r.metrics.balanced_accuracy,
                    r.metrics.macro_f1,
                    r.initial_train_loss,
                    r.final_train_loss
                );
                if let Some(a) = &r.audit {
                    if !a.passed() {
                        audits_ok = false;
                        eprintln!("privacy audit failed, see {}", r.dir.join("audit.txt").display());
                    }
                }
            }
        }
    }
    print_table(&summarize(&base.out_dir)?);
    Ok(if audits_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn print_table(rows: &[SummaryRow]) {
    print!("{:<28} {:>5}", "model", "seeds");
    for (name, _) in SUMMARY_METRICS {
        print!("  {name:>17}");
    }
    println!();
    for r in rows {
        print!("{:<28} {:>5}", r.model, r.seeds);
        for i in 0..SUMMARY_METRICS.len() {
            print!("  {:>17}", r.cell(i));
        }
        println!();
    }
}
