use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use upmnet::aware::AwareKind;
use upmnet::checkpoint::Checkpoint;
use upmnet::dataset::load_dataset;
use upmnet::eval::{full_test_split, split_protocol, Aggregation, TrialSummary};
use upmnet::pipeline::{evaluate_split, fuse_dataset, sweep, sweep_table, write_report, ImageFeatures, ProtocolConfig};
use upmnet::synth::{generate_synthetic, SynthSpec};
use upmnet::trainer::{LogLine, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "upmnet", version, about = "Unsupervised part-based video person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted identities.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one aware network and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the aware kind in the config.
        #[arg(long, value_parser = parse_kind)]
        aware: Option<AwareKind>,
        /// Train only on the training identities of this split.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse local-aware and global-aware features of every image.
    Fuse {
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused features with CMC and mAP.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "max")]
        aggregation: Aggregation,
        /// Evaluate on the test half of seeded splits instead of every
        /// cross-camera identity.
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train and evaluate once per partition scale.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        data: PathBuf,
        /// Base training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value = "max")]
        aggregation: Aggregation,
        /// Also write the table as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<AwareKind, String> {
    match s {
        "local" => Ok(AwareKind::Local),
        "global" => Ok(AwareKind::Global),
        other => Err(format!("unknown aware kind {other:?}, expected local or global")),
    }
}

fn log_line(tag: &str, line: &LogLine) {
    info!("[{tag}] {line}");
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    features: &'a Path,
    data: &'a Path,
    aggregation: Aggregation,
    split_seed: Option<u64>,
    trials: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut spec = SynthSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let manifest = generate_synthetic(&spec, &out)?;
            println!(
                "wrote {} tracklets, {} images to {}",
                manifest.tracklets.len(),
                manifest.num_images(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            aware,
            split_seed,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(kind) = aware {
                cfg.aware_kind = kind;
            }
            let manifest = load_dataset(&data)?;
            let view = match split_seed {
                Some(s) => split_protocol(&manifest, s)?.training_view(&manifest)?,
                None => manifest.training_view(),
            };
            let mut trainer = match resume {
                Some(dir) => {
                    let mut ckpt = Checkpoint::load(&dir)?;
                    if ckpt.config.aware_kind != cfg.aware_kind || ckpt.config.k != cfg.k {
                        bail!(upmnet::Error::Validation(
                            "the resumed checkpoint was trained with a different kind or k".into()
                        ));
                    }
                    ckpt.config.total_iterations = cfg.total_iterations;
                    Trainer::resume(&view, ckpt)?
                }
                None => Trainer::new(&view, cfg)?,
            };
            trainer.run(|l| log_line("train", l))?;
            trainer.checkpoint().save(&out)?;
            println!("checkpoint at iteration {} written to {}", trainer.iteration(), out.display());
        }
        Command::Fuse { local, global, data, out } => {
            let manifest = load_dataset(&data)?;
            let local = Checkpoint::load(&local).context("loading the local checkpoint")?;
            let global = Checkpoint::load(&global).context("loading the global checkpoint")?;
            let feats = fuse_dataset(&manifest, &local, &global)?;
            feats.save(&out)?;
            println!("fused {} images, dim {}, into {}", feats.data.len(), feats.dim, out.display());
        }
        Command::Eval {
            features,
            data,
            report,
            aggregation,
            split_seed,
            trials,
        } => {
            let manifest = load_dataset(&data)?;
            let feats = ImageFeatures::load(&features)?;
            let splits = match split_seed {
                Some(s) => (0..trials as u64)
                    .map(|t| split_protocol(&manifest, s.wrapping_add(t)))
                    .collect::<upmnet::Result<Vec<_>>>()?,
                None if trials == 1 => vec![full_test_split(&manifest)?],
                None => bail!(upmnet::Error::Validation("--trials needs --split-seed".into())),
            };
            let reports = splits
                .iter()
                .map(|s| evaluate_split(&manifest, &feats, s, aggregation))
                .collect::<upmnet::Result<Vec<_>>>()?;
            let summary = TrialSummary::average(reports)?;
            let cfg = EvalConfig {
                features: &features,
                data: &data,
                aggregation,
                split_seed,
                trials,
            };
            write_report(&report, &summary, &cfg)?;
            println!(
                "rank1={:.4} rank5={:.4} rank20={:.4} mAP={:.4}",
                summary.rank1, summary.rank5, summary.rank20, summary.map
            );
        }
        Command::Gradcheck { seed } => {
            let r = upmnet::gradcheck::run(seed)?;
            println!("{} cases, {} coordinates", r.cases, r.coordinates);
            if r.passed() {
                println!("max_rel_err < 1e-4 (max_rel_err = {:.3e})", r.max_rel_err);
            } else {
                println!("max_rel_err = {:.3e} at {}", r.max_rel_err, r.worst);
                bail!("gradient check failed");
            }
        }
        Command::Sweep {
            k,
            data,
            config,
            seed,
            split_seed,
            trials,
            aggregation,
            report,
        } => {
            let mut train = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                train.seed = s;
            }
            let manifest = load_dataset(&data)?;
            let cfg = ProtocolConfig {
                train,
                trials,
                split_seed,
                aggregation,
            };
            let rows = sweep(&manifest, &cfg, &k, log_line)?;
            print!("{}", sweep_table(&rows));
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&rows)? + "\n";
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<upmnet::Error>().is_some_and(upmnet::Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
