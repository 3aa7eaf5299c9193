//! On-disk stages: pretraining, resumable alignment training, evaluation and
//! embedding export. Every artifact lives under an output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{MbaHyperparams, SplitDataset};
use crate::error::{MbaError, Result};
use crate::eval::{EvalReport, DEFAULT_CUTOFFS};
use crate::mba::{
    evaluate_blended, MbaAdam, MbaModels, MbaOptions, MbaTrainer, ModelSlot, TrainerState,
    EPOCH_LOG_HEADER,
};
use crate::model::{AdamState, FactorModel};
use crate::pretrain::{bpr_pretrain, freeze, BprOutcome};
use crate::schedule::EarlyStopping;

pub const PRETRAIN_F: &str = "pretrain_f.mba1";
pub const PRETRAIN_G: &str = "pretrain_g.mba1";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SUMMARY: &str = "summary.json";
const RESUME_DIR: &str = "resume";
const RESUME_STATE: &str = "state.json";

/// Alpha values swept by the grid option.
pub const ALPHA_GRID: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

type Model = FactorModel<f32>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MbaError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MbaError::io(path, e))
}

pub fn checkpoint_path(outdir: &Path, slot: ModelSlot) -> PathBuf {
    outdir.join(format!("{}.mba1", slot.name()))
}

#[derive(Debug, Clone)]
pub struct PretrainArtifacts {
    pub f: BprOutcome<f32>,
    pub g: BprOutcome<f32>,
}

/// BPR-pretrains `f` on target training pairs and `g` on auxiliary training
/// pairs, writing both checkpoints and a per-epoch log.
pub fn run_pretrain(
    ds: &SplitDataset,
    h: &MbaHyperparams,
    outdir: &Path,
) -> Result<PretrainArtifacts> {
    h.validate()?;
    create_dir(outdir)?;
    let f = bpr_pretrain::<f32>(&ds.train_f, h)?;
    let g = bpr_pretrain::<f32>(&ds.train_g, h)?;
    f.model.save_checkpoint(&outdir.join(PRETRAIN_F))?;
    g.model.save_checkpoint(&outdir.join(PRETRAIN_G))?;
    let mut log = String::from("model,epoch,mean_loss,val_recall@20\n");
    for (name, out) in [("f", &f), ("g", &g)] {
        for e in &out.log {
            log.push_str(&format!(
                "{name},{},{},{}\n",
                e.epoch, e.mean_loss, e.val_recall
            ));
        }
    }
    write_text(&outdir.join(PRETRAIN_LOG), &log)?;
    Ok(PretrainArtifacts { f, g })
}

fn check_shape(model: &Model, ds: &SplitDataset, what: &str) -> Result<()> {
    if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
        return Err(MbaError::ShapeMismatch(format!(
            "{what} is {} users x {} items, dataset is {} users x {} items",
            model.num_users(),
            model.num_items(),
            ds.num_users(),
            ds.num_items()
        )));
    }
    Ok(())
}

/// Loads the two pretrained behavior models from `dir`.
pub fn load_pretrained(dir: &Path, ds: &SplitDataset) -> Result<(Model, Model)> {
    let mut out = Vec::with_capacity(2);
    for name in [PRETRAIN_F, PRETRAIN_G] {
        let path = dir.join(name);
        if !path.exists() {
            return Err(MbaError::InvalidArgument(format!(
                "missing pretrained checkpoint {}; run `mba pretrain` with the same --outdir first",
                path.display()
            )));
        }
        let m = Model::load_checkpoint(&path)?;
        check_shape(&m, ds, &path.display().to_string())?;
        out.push(m);
    }
    let g = out.pop().expect("two models");
    let f = out.pop().expect("two models");
    Ok((f, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub last_epoch: usize,
    pub hyperparams: MbaHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    epoch: usize,
    batches_done: u64,
    best_epoch: usize,
    best_value: f64,
    finished: bool,
    adam_steps: Vec<(String, u64)>,
}

fn save_trainer_state(dir: &Path, state: &TrainerState<f32>) -> Result<()> {
    create_dir(dir)?;
    for slot in ModelSlot::ALL {
        let name = slot.name();
        state
            .models
            .slot(slot)
            .save_checkpoint(&dir.join(format!("{name}.mba1")))?;
        state
            .best
            .slot(slot)
            .save_checkpoint(&dir.join(format!("best_{name}.mba1")))?;
        let adam = state.adam.slot(slot);
        adam.m
            .save_checkpoint(&dir.join(format!("{name}.adam_m.mba1")))?;
        adam.v
            .save_checkpoint(&dir.join(format!("{name}.adam_v.mba1")))?;
    }
    let meta = ResumeState {
        epoch: state.epoch,
        batches_done: state.batches_done,
        best_epoch: state.stopper.best_epoch,
        best_value: state.stopper.best_value,
        finished: state.finished,
        adam_steps: ModelSlot::ALL
            .iter()
            .map(|&s| (s.name().to_string(), state.adam.slot(s).step))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("serializable");
    // state.json last: its presence marks a complete snapshot
    write_text(&dir.join(RESUME_STATE), &json)
}

fn load_trainer_state(
    dir: &Path,
    f: &Model,
    g: &Model,
    h: &MbaHyperparams,
) -> Result<TrainerState<f32>> {
    let path = dir.join(RESUME_STATE);
    let text = fs::read_to_string(&path).map_err(|e| MbaError::io(&path, e))?;
    let meta: ResumeState = serde_json::from_str(&text)
        .map_err(|e| MbaError::Checkpoint(format!("{}: {e}", path.display())))?;
    let load = |file: String| Model::load_checkpoint(&dir.join(file));
    let build = |prefix: &str| -> Result<MbaModels<f32>> {
        Ok(MbaModels {
            t: load(format!("{prefix}t.mba1"))?,
            hf_pos: load(format!("{prefix}hf_pos.mba1"))?,
            hf_neg: load(format!("{prefix}hf_neg.mba1"))?,
            hg_pos: load(format!("{prefix}hg_pos.mba1"))?,
            hg_neg: load(format!("{prefix}hg_neg.mba1"))?,
            f: freeze(f.clone()),
            g: freeze(g.clone()),
            eps: h.eps as f32,
        })
    };
    let models = build("")?;
    let best = build("best_")?;
    let step_of = |name: &str| {
        meta.adam_steps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, s)| s)
            .ok_or_else(|| MbaError::Checkpoint(format!("resume state lacks Adam step for {name}")))
    };
    let adam_for = |slot: ModelSlot| -> Result<AdamState<f32>> {
        let name = slot.name();
        Ok(AdamState::from_moments(
            load(format!("{name}.adam_m.mba1"))?,
            load(format!("{name}.adam_v.mba1"))?,
            step_of(name)?,
        ))
    };
    let adam = MbaAdam {
        t: adam_for(ModelSlot::T)?,
        hf_pos: adam_for(ModelSlot::HfPos)?,
        hf_neg: adam_for(ModelSlot::HfNeg)?,
        hg_pos: adam_for(ModelSlot::HgPos)?,
        hg_neg: adam_for(ModelSlot::HgNeg)?,
        f: None,
        g: None,
    };
    Ok(TrainerState {
        models,
        adam,
        best,
        epoch: meta.epoch,
        batches_done: meta.batches_done,
        stopper: EarlyStopping {
            patience: h.patience,
            best_epoch: meta.best_epoch,
            best_value: meta.best_value,
        },
        finished: meta.finished,
    })
}

/// Options for [`run_train`].
#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    /// Directory holding `pretrain_f.mba1` / `pretrain_g.mba1`; defaults to the output directory.
    pub pretrain_dir: Option<PathBuf>,
    /// Continue from `<outdir>/resume/` when a snapshot exists.
    pub resume: bool,
    /// Stop after this many epochs in this session (the snapshot stays resumable).
    pub max_session_epochs: Option<usize>,
}

/// Outcome of one [`run_train`] session.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub summary: TrainSummary,
    /// Whether training reached its stopping criterion.
    pub completed: bool,
}

/// Alignment training with a per-epoch CSV log and a resumable snapshot after
/// every epoch. On completion writes the five best-validation checkpoints
/// and `summary.json`.
pub fn run_train(
    ds: &SplitDataset,
    h: &MbaHyperparams,
    outdir: &Path,
    run: &TrainRun,
) -> Result<TrainSession> {
    h.validate()?;
    create_dir(outdir)?;
    let pre_dir = run
        .pretrain_dir
        .clone()
        .unwrap_or_else(|| outdir.to_path_buf());
    let (f, g) = load_pretrained(&pre_dir, ds)?;
    let resume_dir = outdir.join(RESUME_DIR);
    let log_path = outdir.join(TRAIN_LOG);
    let resuming = run.resume && resume_dir.join(RESUME_STATE).exists();
    let mut trainer = if resuming {
        let state = load_trainer_state(&resume_dir, &f, &g, h)?;
        MbaTrainer::from_state(ds, state, h, MbaOptions::default())?
    } else {
        write_text(&log_path, &format!("{EPOCH_LOG_HEADER}\n"))?;
        MbaTrainer::new(ds, freeze(f), freeze(g), h, MbaOptions::default())?
    };

    let mut session_epochs = 0;
    while !trainer.is_finished() && run.max_session_epochs.is_none_or(|n| session_epochs < n) {
        let rec = trainer.run_epoch()?;
        session_epochs += 1;
        let mut log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| MbaError::io(&log_path, e))?;
        writeln!(log, "{}", rec.csv_row()).map_err(|e| MbaError::io(&log_path, e))?;
        save_trainer_state(&resume_dir, trainer.state())?;
    }

    let completed = trainer.is_finished();
    let state = trainer.state();
    let summary = TrainSummary {
        best_epoch: state.stopper.best_epoch,
        best_val_recall20: state.stopper.best_value.max(0.0),
        last_epoch: state.epoch,
        hyperparams: h.clone(),
    };
    if completed {
        for slot in ModelSlot::ALL {
            state
                .best
                .slot(slot)
                .save_checkpoint(&checkpoint_path(outdir, slot))?;
        }
        let json = serde_json::to_string_pretty(&summary).expect("serializable");
        write_text(&outdir.join(SUMMARY), &json)?;
    }
    Ok(TrainSession { summary, completed })
}

/// Trains once per alpha in [`ALPHA_GRID`], each into `<outdir>/alpha_<a>/`.
pub fn run_alpha_grid(
    ds: &SplitDataset,
    h: &MbaHyperparams,
    outdir: &Path,
    run: &TrainRun,
) -> Result<Vec<(PathBuf, TrainSession)>> {
    let pretrain_dir = run
        .pretrain_dir
        .clone()
        .unwrap_or_else(|| outdir.to_path_buf());
    ALPHA_GRID
        .iter()
        .map(|&alpha| {
            let dir = outdir.join(format!("alpha_{alpha}"));
            let h = MbaHyperparams { alpha, ..h.clone() };
            let run = TrainRun {
                pretrain_dir: Some(pretrain_dir.clone()),
                ..run.clone()
            };
            run_train(ds, &h, &dir, &run).map(|s| (dir, s))
        })
        .collect()
}

pub fn eval_report_path(outdir: &Path, beta: f64) -> PathBuf {
    outdir.join(format!("eval_beta{beta}.csv"))
}

/// Evaluates the trained `t` blended with pretrained `f` and writes the CSV.
pub fn run_evaluate(
    ds: &SplitDataset,
    outdir: &Path,
    pretrain_dir: Option<&Path>,
    beta: f64,
    eps: f64,
) -> Result<(EvalReport, PathBuf)> {
    if ds.test_f.is_empty() {
        return Err(MbaError::EmptyDataset(
            "the test split is empty; nothing to evaluate".into(),
        ));
    }
    let t_path = checkpoint_path(outdir, ModelSlot::T);
    if !t_path.exists() {
        return Err(MbaError::InvalidArgument(format!(
            "missing trained checkpoint {}; run `mba train` first",
            t_path.display()
        )));
    }
    let t = Model::load_checkpoint(&t_path)?;
    check_shape(&t, ds, &t_path.display().to_string())?;
    let (f, _) = load_pretrained(pretrain_dir.unwrap_or(outdir), ds)?;
    let report = evaluate_blended(&t, &freeze(f), ds, beta, eps, &DEFAULT_CUTOFFS)?;
    let path = eval_report_path(outdir, beta);
    report.write_csv(&path)?;
    Ok((report, path))
}

/// Item embeddings tagged by which listed users clicked (`u<n>c`) or
/// purchased (`u<n>p`) them in training; `n` is the 1-based list position.
pub fn export_embeddings(ds: &SplitDataset, model: &Model, raw_users: &[i64]) -> Result<String> {
    check_shape(model, ds, "embedding model")?;
    let d = model.dim();
    let mut out = String::from("item_id,tag");
    for k in 0..d {
        out.push_str(&format!(",dim_{k}"));
    }
    out.push('\n');
    for (pos, &raw) in raw_users.iter().enumerate() {
        let u = ds
            .users
            .dense(raw)
            .map(crate::domain::UserId)
            .ok_or_else(|| MbaError::InvalidArgument(format!("unknown user id {raw}")))?;
        let n = pos + 1;
        for (set, tag) in [(&ds.train_g, 'c'), (&ds.train_f, 'p')] {
            for &i in set.items_of(u) {
                let raw_item = ds.items.raw(i.0).expect("indexed item");
                out.push_str(&format!("{raw_item},u{n}{tag}"));
                for x in model.item_row(i) {
                    out.push_str(&format!(",{x}"));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}
