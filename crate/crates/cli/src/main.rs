//! Command line for the segmentation workbench: synthetic data generation,
//! training, evaluation, and cost reporting.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ukanep_core::manifest::{save_sample, write_manifest};
use ukanep_core::model::Model;
use ukanep_core::phantom::generate_phantom;

use ukanep_cli::config::TrainConfig;
use ukanep_cli::{eval, train};

#[derive(Parser)]
#[command(name = "ukanep", version, about = "3D tumor segmentation workbench")]
struct Cli {
    /// Override the run seed (model init, data order, augmentation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic labeled volumes plus a manifest.
    Phantom {
        /// Number of cases.
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// Cubic extent per axis (multiple of 16 to be trainable).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained checkpoint against a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics CSV to write.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Report parameter count and forward-pass FLOPs for a config.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Cubic input extent used for the FLOP count.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg =
        TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Phantom { n, size, out } => {
            std::fs::create_dir_all(&out)?;
            let base = cli.seed.unwrap_or(0);
            let entries = (0..n)
                .map(|i| {
                    let sample = generate_phantom(base.wrapping_add(i as u64), [size; 3])?;
                    save_sample(&out, &sample, [1.0; 3])
                })
                .collect::<Result<Vec<_>, _>>()?;
            let manifest = out.join("manifest.csv");
            write_manifest(&manifest, &entries)?;
            println!("wrote {n} cases to {}", manifest.display());
        }
        Cmd::Train { config, resume } => {
            let cfg = load_config(&config, cli.seed)?;
            let epochs = cfg.epochs;
            let progress = |s: &train::EpochStats| {
                eprintln!(
                    "epoch {}/{epochs} lr {:.6} loss {:.4} train_dice {:.4} val_dice {:.4}",
                    s.epoch + 1,
                    s.lr,
                    s.total,
                    s.train_dice,
                    s.val_dice
                );
            };
            let outcome = match resume {
                Some(ckpt) => train::resume_observed(&ckpt, Some(&cfg), progress)?,
                None => train::train_observed(&cfg, progress)?,
            };
            println!(
                "loss log: {}\nfinal checkpoint: {}",
                outcome.csv.display(),
                outcome.final_checkpoint.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let scores = eval::evaluate(&checkpoint, &manifest, &out)?;
            println!("scored {} cases into {}", scores.len(), out.display());
        }
        Cmd::Flops { config, size } => {
            let cfg = load_config(&config, cli.seed)?;
            let model = Model::<f32>::new(&cfg.model)?;
            let report = model.flops(&[1, cfg.model.in_channels, size, size, size])?;
            println!("variant: {}", cfg.model.variant.name());
            println!("parameters: {}", model.param_count());
            for (name, f) in &report.rows {
                println!("{name}: {f}");
            }
            println!("total flops @ {size}^3: {}", report.total());
        }
    }
    Ok(())
}
