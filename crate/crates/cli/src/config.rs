//! Run configuration: defaults, then a `key=value` config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mba_core::dataio::parse_key_values;
use mba_core::MbaHyperparams;

/// Flags shared by the training and evaluation subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (clicks=, purchases=, split=, seed=)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub outdir: PathBuf,
    pub hyperparams: MbaHyperparams,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{}: bad value {value:?} for `{key}`: {e}", path.display()))
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut h = MbaHyperparams::default();
        let mut manifest = None;
        let mut outdir = None;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            for (k, v) in parse_key_values(&text, path)? {
                match k.replace('_', "-").as_str() {
                    "alpha" => h.alpha = parse(&k, &v, path)?,
                    "beta" => h.beta = parse(&k, &v, path)?,
                    "c1" => h.c1 = parse(&k, &v, path)?,
                    "c2" => h.c2 = parse(&k, &v, path)?,
                    "lr" => h.lr = parse(&k, &v, path)?,
                    "dim" => h.dim = parse(&k, &v, path)?,
                    "l2" => h.l2 = parse(&k, &v, path)?,
                    "batch-size" => h.batch_size = parse(&k, &v, path)?,
                    "patience" => h.patience = parse(&k, &v, path)?,
                    "max-epochs" => h.max_epochs = parse(&k, &v, path)?,
                    "eps" => h.eps = parse(&k, &v, path)?,
                    "seed" => h.seed = parse(&k, &v, path)?,
                    "manifest" => manifest = Some(base.join(v)),
                    "outdir" => outdir = Some(base.join(v)),
                    _ => bail!("{}: unknown config key `{k}`", path.display()),
                }
            }
        }
        macro_rules! flag {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    h.$field = v;
                }
            )*};
        }
        flag!(alpha, beta, c1, c2, lr, dim, l2, batch_size, patience, max_epochs, eps, seed);
        let manifest = self
            .manifest
            .clone()
            .or(manifest)
            .context("no dataset manifest given (use --manifest or manifest= in --config)")?;
        let outdir = self
            .outdir
            .clone()
            .or(outdir)
            .context("no output directory given (use --outdir or outdir= in --config)")?;
        h.validate()?;
        Ok(RunConfig {
            manifest,
            outdir,
            hyperparams: h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(
            &cfg,
            "alpha=10\nbatch_size=64\nmanifest=data/m.txt\noutdir=out\n",
        )
        .unwrap();
        let args = RunArgs {
            config: Some(cfg),
            alpha: Some(1000.0),
            ..Default::default()
        };
        let rc = args.resolve().unwrap();
        assert_eq!(rc.hyperparams.alpha, 1000.0);
        assert_eq!(rc.hyperparams.batch_size, 64);
        assert_eq!(rc.manifest, dir.path().join("data/m.txt"));
        assert_eq!(rc.outdir, dir.path().join("out"));
    }

    #[test]
    fn invalid_hyperparameter_is_reported() {
        let args = RunArgs {
            manifest: Some("m".into()),
            outdir: Some("o".into()),
            alpha: Some(-1.0),
            ..Default::default()
        };
        let err = args.resolve().unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "gamma=1\n").unwrap();
        let args = RunArgs {
            config: Some(cfg),
            ..Default::default()
        };
        assert!(args.resolve().is_err());
    }
}
