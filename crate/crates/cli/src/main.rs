mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mba_core::mba::ModelSlot;
use mba_core::pipeline::{self, TrainRun};
use mba_core::synth::{write_synth, SynthConfig};
use mba_core::{FactorModel32, Manifest, SplitDataset};

use crate::config::{RunArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mba",
    version,
    about = "Multi-behavior alignment for implicit-feedback recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// BPR-pretrain the purchase (f) and click (g) behavior models
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run alignment training from the pretrained behavior models
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train once per alpha in {1, 10, 100, 1000}, each into <outdir>/alpha_<a>/
        #[arg(long)]
        alpha_grid: bool,
        /// Continue an interrupted run from <outdir>/resume/
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation (resumable)
        #[arg(long)]
        stop_after: Option<usize>,
        /// Directory with pretrain_f.mba1 / pretrain_g.mba1 (default: --outdir)
        #[arg(long)]
        pretrain_dir: Option<PathBuf>,
    },
    /// Report Recall@{10,20} and NDCG@{10,20} of the blended score
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory with pretrain_f.mba1 (default: --outdir)
        #[arg(long)]
        pretrain_dir: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted preferences
    Synth {
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        dim_true: usize,
        #[arg(long, default_value_t = 0.3)]
        click_noise: f64,
        #[arg(long, default_value_t = 0.7)]
        exposure: f64,
        #[arg(long, default_value_t = 0.5)]
        purchase_rate: f64,
        #[arg(long, default_value_t = 0.2)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export item embeddings tagged by listed users' clicks and purchases
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated raw user ids
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<i64>,
        /// Checkpoint to read embeddings from: t, hf_pos, hf_neg, hg_pos, hg_neg, pretrain_f, pretrain_g
        #[arg(long, default_value = "t")]
        model: String,
        /// Output CSV (default: <outdir>/embeddings.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(rc: &RunConfig) -> Result<SplitDataset> {
    let manifest = Manifest::load(&rc.manifest)?;
    manifest
        .load_dataset()
        .with_context(|| format!("loading dataset from {}", rc.manifest.display()))
}

fn model_file(name: &str) -> Result<String> {
    let known = ModelSlot::ALL
        .iter()
        .map(|s| s.name())
        .chain(["pretrain_f", "pretrain_g"])
        .any(|n| n == name);
    anyhow::ensure!(known, "unknown model `{name}`");
    Ok(format!("{name}.mba1"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { run } => {
            let rc = run.resolve()?;
            let ds = load(&rc)?;
            let out = pipeline::run_pretrain(&ds, &rc.hyperparams, &rc.outdir)?;
            println!(
                "pretrained f (best epoch {}, val Recall@20 {:.4}) and g (best epoch {}, val Recall@20 {:.4}) into {}",
                out.f.best_epoch,
                out.f.best_recall,
                out.g.best_epoch,
                out.g.best_recall,
                rc.outdir.display()
            );
        }
        Command::Train {
            run,
            alpha_grid,
            resume,
            stop_after,
            pretrain_dir,
        } => {
            let rc = run.resolve()?;
            let ds = load(&rc)?;
            let opts = TrainRun {
                pretrain_dir,
                resume,
                max_session_epochs: stop_after,
            };
            let sessions = if alpha_grid {
                pipeline::run_alpha_grid(&ds, &rc.hyperparams, &rc.outdir, &opts)?
            } else {
                vec![(
                    rc.outdir.clone(),
                    pipeline::run_train(&ds, &rc.hyperparams, &rc.outdir, &opts)?,
                )]
            };
            for (dir, s) in sessions {
                let status = if s.completed { "finished" } else { "paused" };
                println!(
                    "{status} {}: alpha {} epochs {} best epoch {} val Recall@20 {:.4}",
                    dir.display(),
                    s.summary.hyperparams.alpha,
                    s.summary.last_epoch,
                    s.summary.best_epoch,
                    s.summary.best_val_recall20
                );
            }
        }
        Command::Evaluate { run, pretrain_dir } => {
            let rc = run.resolve()?;
            let ds = load(&rc)?;
            let h = &rc.hyperparams;
            let (report, path) =
                pipeline::run_evaluate(&ds, &rc.outdir, pretrain_dir.as_deref(), h.beta, h.eps)?;
            println!("beta = {}", h.beta);
            println!("{report}");
            println!("wrote {}", path.display());
        }
        Command::Synth {
            outdir,
            users,
            items,
            dim_true,
            click_noise,
            exposure,
            purchase_rate,
            split,
            seed,
        } => {
            let cfg = SynthConfig {
                num_users: users,
                num_items: items,
                dim_true,
                click_noise,
                exposure,
                purchase_rate,
                split,
                seed,
            };
            write_synth(&cfg, &outdir)?;
            println!(
                "wrote synthetic dataset to {}",
                outdir.join("manifest.txt").display()
            );
        }
        Command::ExportEmbeddings {
            run,
            users,
            model,
            out,
        } => {
            let rc = run.resolve()?;
            let ds = load(&rc)?;
            let path = rc.outdir.join(model_file(&model)?);
            let m = FactorModel32::load_checkpoint(&path)?;
            let csv = pipeline::export_embeddings(&ds, &m, &users)?;
            let out = out.unwrap_or_else(|| rc.outdir.join("embeddings.csv"));
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
