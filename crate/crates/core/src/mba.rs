//! Multi-behavior alignment training.
//!
//! A target model `t` of latent true preference is trained jointly with four
//! corruption models linking it to the observed behaviors:
//!
//! * `hf_pos` / `hg_pos`: P(purchase | prefer) and P(click | prefer)
//! * `hf_neg` / `hg_neg`: P(purchase | not prefer) and P(click | not prefer)
//!
//! Training alternates per minibatch between two steps. Step 0 replaces the
//! negative-conditional models by the constant `c1` and updates `t`,
//! `hf_pos`, `hg_pos`; step 1 replaces the positive-conditional models by `c2`
//! and updates `t`, `hf_neg`, `hg_neg`. Both steps add `alpha` times the
//! Bernoulli KL divergence from the frozen behavior models `f`, `g` to `t`.

use std::time::Instant;

use crate::dataio::{sample_epoch, validation_split, Situation, TrainingSample};
use crate::domain::{InteractionSet, ItemId, MbaHyperparams, SplitDataset, UserId};
use crate::error::{MbaError, Result};
use crate::eval::{evaluate_with_mask, EvalReport, Scorer};
use crate::model::{adam_step, prob_and_slope, AdamState, FactorModel, SparseGrad};
use crate::pretrain::{bpr_batch_grad, FrozenModel};
use crate::scalar::Scalar;
use crate::schedule::{derive_seed, epoch_stream, EarlyStopping, StopDecision};

/// `p ln(p/q) + (1-p) ln((1-p)/(1-q))`
#[inline]
pub fn bernoulli_kl<T: Scalar>(p: T, q: T) -> T {
    let one = T::one();
    let kl = p * (p / q).ln() + (one - p) * ((one - p) / (one - q)).ln();
    // rounding can leave a tiny negative residue near p == q
    kl.max(T::zero())
}

/// Derivative of [`bernoulli_kl`] in its second argument.
#[inline]
pub fn bernoulli_kl_dq<T: Scalar>(p: T, q: T) -> T {
    (q - p) / (q * (T::one() - q))
}

/// Which of the two alternating steps a minibatch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepFlag {
    /// Update `t`, `hf_pos`, `hg_pos`.
    Zero,
    /// Update `t`, `hf_neg`, `hg_neg`.
    One,
}

impl StepFlag {
    pub fn from_batch_index(n: u64) -> Self {
        if n.is_multiple_of(2) {
            StepFlag::Zero
        } else {
            StepFlag::One
        }
    }

    pub fn next(self) -> Self {
        match self {
            StepFlag::Zero => StepFlag::One,
            StepFlag::One => StepFlag::Zero,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            StepFlag::Zero => 0,
            StepFlag::One => 1,
        }
    }
}

/// Likelihood terms of the two behaviors (click/purchase x positive/negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchTerm {
    ClickPositive,
    ClickNegative,
    PurchasePositive,
    PurchaseNegative,
}

/// The click term and purchase term a sample of `situation` contributes.
pub fn active_terms(situation: Situation) -> [BranchTerm; 2] {
    let (r_f, r_g) = situation.flags();
    let click = if r_g {
        BranchTerm::ClickPositive
    } else {
        BranchTerm::ClickNegative
    };
    let purchase = if r_f {
        BranchTerm::PurchasePositive
    } else {
        BranchTerm::PurchaseNegative
    };
    [click, purchase]
}

impl BranchTerm {
    fn observed(self) -> bool {
        matches!(
            self,
            BranchTerm::ClickPositive | BranchTerm::PurchasePositive
        )
    }
}

/// Loss contribution of one term and its partials `(∂/∂t, ∂/∂h)`.
///
/// `h` is the active corruption model of the term's behavior: the
/// positive-conditional one under [`StepFlag::Zero`], the negative-conditional
/// one under [`StepFlag::One`].
#[inline]
pub fn term_loss<T: Scalar>(
    term: BranchTerm,
    flag: StepFlag,
    t: T,
    h: T,
    c1: T,
    c2: T,
) -> (T, T, T) {
    let one = T::one();
    match (flag, term.observed()) {
        // -[t ln h - c1 (1 - t)]
        (StepFlag::Zero, true) => (-t * h.ln() + c1 * (one - t), -h.ln() - c1, -t / h),
        // -[t ln(1 - h)]
        (StepFlag::Zero, false) => (-t * (one - h).ln(), -(one - h).ln(), t / (one - h)),
        // -[(1 - t) ln h]
        (StepFlag::One, true) => (-(one - t) * h.ln(), h.ln(), -(one - t) / h),
        // -[-c2 t + (1 - t) ln(1 - h)]
        (StepFlag::One, false) => (
            c2 * t - (one - t) * (one - h).ln(),
            c2 + (one - h).ln(),
            (one - t) / (one - h),
        ),
    }
}

/// All models trained or consulted during alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MbaModels<T> {
    pub t: FactorModel<T>,
    pub hf_pos: FactorModel<T>,
    pub hf_neg: FactorModel<T>,
    pub hg_pos: FactorModel<T>,
    pub hg_neg: FactorModel<T>,
    pub f: FrozenModel<T>,
    pub g: FrozenModel<T>,
    pub eps: T,
}

/// Identifies a trainable model of [`MbaModels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelSlot {
    T,
    HfPos,
    HfNeg,
    HgPos,
    HgNeg,
}

impl ModelSlot {
    pub const ALL: [ModelSlot; 5] = [
        ModelSlot::T,
        ModelSlot::HfPos,
        ModelSlot::HfNeg,
        ModelSlot::HgPos,
        ModelSlot::HgNeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelSlot::T => "t",
            ModelSlot::HfPos => "hf_pos",
            ModelSlot::HfNeg => "hf_neg",
            ModelSlot::HgPos => "hg_pos",
            ModelSlot::HgNeg => "hg_neg",
        }
    }

    /// The slots whose parameters a step with `flag` updates.
    pub fn active(flag: StepFlag) -> [ModelSlot; 3] {
        match flag {
            StepFlag::Zero => [ModelSlot::T, ModelSlot::HfPos, ModelSlot::HgPos],
            StepFlag::One => [ModelSlot::T, ModelSlot::HfNeg, ModelSlot::HgNeg],
        }
    }
}

impl<T: Scalar> MbaModels<T> {
    /// Fresh `t` and corruption models around the given behavior models.
    pub fn init(
        num_users: usize,
        num_items: usize,
        f: FrozenModel<T>,
        g: FrozenModel<T>,
        h: &MbaHyperparams,
    ) -> Result<Self> {
        for (name, m) in [("f", f.model()), ("g", g.model())] {
            if m.num_users() != num_users || m.num_items() != num_items {
                return Err(MbaError::ShapeMismatch(format!(
                    "behavior model {name} is {}x{}, dataset is {num_users}x{num_items}",
                    m.num_users(),
                    m.num_items()
                )));
            }
        }
        let fresh = |slot: ModelSlot| {
            FactorModel::init(
                num_users,
                num_items,
                h.dim,
                derive_seed(h.seed, &format!("mba/init/{}", slot.name())),
            )
        };
        Ok(MbaModels {
            t: fresh(ModelSlot::T)?,
            hf_pos: fresh(ModelSlot::HfPos)?,
            hf_neg: fresh(ModelSlot::HfNeg)?,
            hg_pos: fresh(ModelSlot::HgPos)?,
            hg_neg: fresh(ModelSlot::HgNeg)?,
            f,
            g,
            eps: T::of(h.eps),
        })
    }

    pub fn slot(&self, s: ModelSlot) -> &FactorModel<T> {
        match s {
            ModelSlot::T => &self.t,
            ModelSlot::HfPos => &self.hf_pos,
            ModelSlot::HfNeg => &self.hf_neg,
            ModelSlot::HgPos => &self.hg_pos,
            ModelSlot::HgNeg => &self.hg_neg,
        }
    }

    pub fn slot_mut(&mut self, s: ModelSlot) -> &mut FactorModel<T> {
        match s {
            ModelSlot::T => &mut self.t,
            ModelSlot::HfPos => &mut self.hf_pos,
            ModelSlot::HfNeg => &mut self.hf_neg,
            ModelSlot::HgPos => &mut self.hg_pos,
            ModelSlot::HgNeg => &mut self.hg_neg,
        }
    }

    fn corruption_models(&self, flag: StepFlag) -> (&FactorModel<T>, &FactorModel<T>) {
        match flag {
            StepFlag::Zero => (&self.hg_pos, &self.hf_pos),
            StepFlag::One => (&self.hg_neg, &self.hf_neg),
        }
    }

    /// Blended inference score for one pair.
    pub fn blended_score(&self, u: UserId, i: ItemId, beta: T) -> T {
        blended_score(&self.t, &self.f, u, i, beta, self.eps)
    }
}

/// `beta * P_t(u, i) + (1 - beta) * P_f(u, i)`
pub fn blended_score<T: Scalar>(
    t: &FactorModel<T>,
    f: &FrozenModel<T>,
    u: UserId,
    i: ItemId,
    beta: T,
    eps: T,
) -> T {
    beta * t.prob(u, i, eps) + (T::one() - beta) * f.prob(u, i, eps)
}

/// Ranks by [`blended_score`].
pub struct Blended<'a, T> {
    pub t: &'a FactorModel<T>,
    pub f: &'a FrozenModel<T>,
    pub beta: T,
    pub eps: T,
}

impl<T: Scalar> Scorer for Blended<'_, T> {
    fn num_items(&self) -> usize {
        self.t.num_items()
    }

    fn score(&self, u: UserId, i: ItemId) -> f64 {
        blended_score(self.t, self.f, u, i, self.beta, self.eps).as_f64()
    }
}

/// Likelihood loss of one sample under `flag` (two terms, see [`active_terms`]).
pub fn branch_loss<T: Scalar>(
    models: &MbaModels<T>,
    sample: &TrainingSample,
    flag: StepFlag,
    c1: T,
    c2: T,
) -> T {
    let (u, i, eps) = (sample.user, sample.item, models.eps);
    let t = models.t.prob(u, i, eps);
    let (hg, hf) = models.corruption_models(flag);
    let [click, purchase] = active_terms(sample.situation);
    let (lc, _, _) = term_loss(click, flag, t, hg.prob(u, i, eps), c1, c2);
    let (lp, _, _) = term_loss(purchase, flag, t, hf.prob(u, i, eps), c1, c2);
    lc + lp
}

/// `alpha * Σ [KL(f || t) + KL(g || t)]` over the batch's pairs.
pub fn kl_term<T: Scalar>(models: &MbaModels<T>, batch: &[TrainingSample], alpha: T) -> T {
    alpha * kl_sum(models, batch)
}

fn kl_sum<T: Scalar>(models: &MbaModels<T>, batch: &[TrainingSample]) -> T {
    let eps = models.eps;
    batch
        .iter()
        .map(|s| {
            let t = models.t.prob(s.user, s.item, eps);
            bernoulli_kl(models.f.prob(s.user, s.item, eps), t)
                + bernoulli_kl(models.g.prob(s.user, s.item, eps), t)
        })
        .sum()
}

/// Loss weights as scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub c1: T,
    pub c2: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn from_hyperparams(h: &MbaHyperparams) -> Self {
        LossWeights {
            alpha: T::of(h.alpha),
            c1: T::of(h.c1),
            c2: T::of(h.c2),
        }
    }
}

/// Minibatch objective: mean branch loss plus `kl_term / batch_len`.
pub fn batch_objective<T: Scalar>(
    models: &MbaModels<T>,
    batch: &[TrainingSample],
    flag: StepFlag,
    w: LossWeights<T>,
) -> T {
    let n = T::of(batch.len() as f64);
    let branch: T = batch
        .iter()
        .map(|s| branch_loss(models, s, flag, w.c1, w.c2))
        .sum();
    (branch + kl_term(models, batch, w.alpha)) / n
}

/// Gradients of [`batch_objective`] for the three models active under a flag.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    pub flag: StepFlag,
    pub t: SparseGrad<T>,
    /// Active click corruption model (`hg_pos` or `hg_neg`).
    pub hg: SparseGrad<T>,
    /// Active purchase corruption model (`hf_pos` or `hf_neg`).
    pub hf: SparseGrad<T>,
    /// Summed branch loss (not normalized).
    pub branch_sum: T,
    /// Summed unweighted KL (not normalized).
    pub kl_sum: T,
}

impl<T: Scalar> BatchGrads<T> {
    pub fn objective(&self, alpha: T, batch_len: usize) -> T {
        (self.branch_sum + alpha * self.kl_sum) / T::of(batch_len as f64)
    }

    /// Slot receiving each gradient.
    pub fn slots(&self) -> [(ModelSlot, &SparseGrad<T>); 3] {
        let [t, hf, hg] = ModelSlot::active(self.flag);
        [(t, &self.t), (hf, &self.hf), (hg, &self.hg)]
    }
}

/// Analytic gradients of the minibatch objective.
///
/// The frozen behavior models enter the KL terms as constants, so only `t`
/// receives KL gradient.
pub fn batch_gradients<T: Scalar>(
    models: &MbaModels<T>,
    batch: &[TrainingSample],
    flag: StepFlag,
    w: LossWeights<T>,
) -> BatchGrads<T> {
    let d = models.t.dim();
    let eps = models.eps;
    let inv_n = T::one() / T::of(batch.len() as f64);
    let (hg_model, hf_model) = models.corruption_models(flag);
    let mut out = BatchGrads {
        flag,
        t: SparseGrad::new(d),
        hg: SparseGrad::new(hg_model.dim()),
        hf: SparseGrad::new(hf_model.dim()),
        branch_sum: T::zero(),
        kl_sum: T::zero(),
    };
    for s in batch {
        let (u, i) = (s.user, s.item);
        let (t, dt_ds) = prob_and_slope(models.t.dot(u, i), eps);
        let (hg, dhg_ds) = prob_and_slope(hg_model.dot(u, i), eps);
        let (hf, dhf_ds) = prob_and_slope(hf_model.dot(u, i), eps);
        let [click, purchase] = active_terms(s.situation);
        let (lc, dc_dt, dc_dh) = term_loss(click, flag, t, hg, w.c1, w.c2);
        let (lp, dp_dt, dp_dh) = term_loss(purchase, flag, t, hf, w.c1, w.c2);

        let pf = models.f.prob(u, i, eps);
        let pg = models.g.prob(u, i, eps);
        out.branch_sum += lc + lp;
        out.kl_sum += bernoulli_kl(pf, t) + bernoulli_kl(pg, t);

        let dkl_dt = w.alpha * (bernoulli_kl_dq(pf, t) + bernoulli_kl_dq(pg, t));
        let dl_dt = dc_dt + dp_dt + dkl_dt;
        out.t.add_score_grad(&models.t, u, i, dl_dt * dt_ds * inv_n);
        out.hg
            .add_score_grad(hg_model, u, i, dc_dh * dhg_ds * inv_n);
        out.hf
            .add_score_grad(hf_model, u, i, dp_dh * dhf_ds * inv_n);
    }
    out
}

/// Optional behaviour switches for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MbaOptions {
    /// Train `f` and `g` alongside the other models (BPR on each batch's
    /// pairs) instead of keeping them fixed. Off by default.
    pub cotrain_behavior_models: bool,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Flag of the epoch's first minibatch.
    pub flag_parity: u8,
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub val_recall20: f64,
    pub elapsed_s: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,flag_parity,mean_loss,mean_kl,val_recall@20,elapsed_s";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.flag_parity,
            self.mean_loss,
            self.mean_kl,
            self.val_recall20,
            self.elapsed_s
        )
    }
}

/// Optimizer state for every trainable model.
#[derive(Debug, Clone, PartialEq)]
pub struct MbaAdam<T> {
    pub t: AdamState<T>,
    pub hf_pos: AdamState<T>,
    pub hf_neg: AdamState<T>,
    pub hg_pos: AdamState<T>,
    pub hg_neg: AdamState<T>,
    /// Present only when co-training the behavior models.
    pub f: Option<AdamState<T>>,
    pub g: Option<AdamState<T>>,
}

impl<T: Scalar> MbaAdam<T> {
    pub fn new(models: &MbaModels<T>, opts: MbaOptions) -> Self {
        let behavior = |m: &FrozenModel<T>| {
            opts.cotrain_behavior_models
                .then(|| AdamState::new(m.model()))
        };
        MbaAdam {
            t: AdamState::new(&models.t),
            hf_pos: AdamState::new(&models.hf_pos),
            hf_neg: AdamState::new(&models.hf_neg),
            hg_pos: AdamState::new(&models.hg_pos),
            hg_neg: AdamState::new(&models.hg_neg),
            f: behavior(&models.f),
            g: behavior(&models.g),
        }
    }

    pub fn slot_mut(&mut self, s: ModelSlot) -> &mut AdamState<T> {
        match s {
            ModelSlot::T => &mut self.t,
            ModelSlot::HfPos => &mut self.hf_pos,
            ModelSlot::HfNeg => &mut self.hf_neg,
            ModelSlot::HgPos => &mut self.hg_pos,
            ModelSlot::HgNeg => &mut self.hg_neg,
        }
    }

    pub fn slot(&self, s: ModelSlot) -> &AdamState<T> {
        match s {
            ModelSlot::T => &self.t,
            ModelSlot::HfPos => &self.hf_pos,
            ModelSlot::HfNeg => &self.hf_neg,
            ModelSlot::HgPos => &self.hg_pos,
            ModelSlot::HgNeg => &self.hg_neg,
        }
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<T> {
    pub models: MbaModels<T>,
    pub adam: MbaAdam<T>,
    pub best: MbaModels<T>,
    /// Last completed epoch.
    pub epoch: usize,
    /// Minibatches applied so far; its parity is the next flag.
    pub batches_done: u64,
    pub stopper: EarlyStopping,
    pub finished: bool,
}

/// Result of a completed alignment run.
#[derive(Debug, Clone)]
pub struct MbaOutcome<T> {
    /// Models from the best validation epoch.
    pub models: MbaModels<T>,
    pub best_epoch: usize,
    pub best_recall20: f64,
    pub last_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Epoch-by-epoch alignment trainer with early stopping on validation
/// Recall@20 of the blended score.
pub struct MbaTrainer<T> {
    train: SplitDataset,
    val: InteractionSet,
    h: MbaHyperparams,
    opts: MbaOptions,
    weights: LossWeights<T>,
    state: TrainerState<T>,
}

impl<T: Scalar> MbaTrainer<T> {
    /// Holds out the target validation pairs (same split as target
    /// pretraining) and initializes all trainable models.
    pub fn new(
        ds: &SplitDataset,
        f: FrozenModel<T>,
        g: FrozenModel<T>,
        h: &MbaHyperparams,
        opts: MbaOptions,
    ) -> Result<Self> {
        h.validate()?;
        let models = MbaModels::init(ds.num_users(), ds.num_items(), f, g, h)?;
        let adam = MbaAdam::new(&models, opts);
        let state = TrainerState {
            best: models.clone(),
            models,
            adam,
            epoch: 0,
            batches_done: 0,
            stopper: EarlyStopping::new(h.patience),
            finished: false,
        };
        Self::from_state(ds, state, h, opts)
    }

    /// Continues from a saved state.
    pub fn from_state(
        ds: &SplitDataset,
        state: TrainerState<T>,
        h: &MbaHyperparams,
        opts: MbaOptions,
    ) -> Result<Self> {
        h.validate()?;
        let (train_f, val) = validation_split(&ds.train_f, h.seed);
        if train_f.is_empty() && ds.train_g.is_empty() {
            return Err(MbaError::EmptyDataset("no training interactions".into()));
        }
        Ok(MbaTrainer {
            train: ds.with_train_f(train_f),
            val,
            h: h.clone(),
            opts,
            weights: LossWeights::from_hyperparams(h),
            state,
        })
    }

    pub fn state(&self) -> &TrainerState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainerState<T> {
        self.state
    }

    /// Training view: target pairs minus the validation holdout.
    pub fn train_view(&self) -> &SplitDataset {
        &self.train
    }

    pub fn validation(&self) -> &InteractionSet {
        &self.val
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn validate_recall(&self, models: &MbaModels<T>) -> Result<f64> {
        if self.val.is_empty() {
            // no holdout: keep the latest epoch
            return Ok(-(self.state.epoch as f64 + 1.0).recip());
        }
        let scorer = Blended {
            t: &models.t,
            f: &models.f,
            beta: T::of(self.h.beta),
            eps: models.eps,
        };
        Ok(evaluate_with_mask(&scorer, &self.train.train_f, &self.val, &[20])?.recall(20))
    }

    fn step(&mut self, batch: &[TrainingSample], epoch: usize, batch_no: usize) -> Result<(T, T)> {
        let flag = StepFlag::from_batch_index(self.state.batches_done);
        let grads = batch_gradients(&self.state.models, batch, flag, self.weights);
        let non_finite = |term: &str| MbaError::NonFinite {
            epoch,
            batch: batch_no,
            term: term.to_string(),
        };
        if !grads.branch_sum.is_finite() {
            return Err(non_finite(&format!("branch loss (flag {})", flag.bit())));
        }
        if !grads.kl_sum.is_finite() {
            return Err(non_finite("kl term"));
        }
        let (lr, l2) = (T::of(self.h.lr), T::of(self.h.l2));
        for (slot, g) in grads.slots() {
            adam_step(
                self.state.models.slot_mut(slot),
                self.state.adam.slot_mut(slot),
                g,
                lr,
                l2,
            )
            .map_err(|e| match e {
                MbaError::NonFiniteGradient(_) => {
                    non_finite(&format!("gradient of {}", slot.name()))
                }
                other => other,
            })?;
        }
        if self.opts.cotrain_behavior_models {
            self.cotrain_step(batch, lr, l2).map_err(|e| match e {
                MbaError::NonFiniteGradient(m) => non_finite(&format!("gradient of {m}")),
                other => other,
            })?;
        }
        self.state.batches_done += 1;
        Ok((grads.branch_sum, grads.kl_sum))
    }

    /// BPR updates of `f` (purchases) and `g` (clicks) on the batch's
    /// (positive, sampled negative) pairs.
    fn cotrain_step(&mut self, batch: &[TrainingSample], lr: T, l2: T) -> Result<()> {
        let mut f_triples = Vec::new();
        let mut g_triples = Vec::new();
        for w in batch.windows(2) {
            let (p, n) = (w[0], w[1]);
            if p.situation == Situation::III || n.situation != Situation::III || p.user != n.user {
                continue;
            }
            g_triples.push((p.user, p.item, n.item));
            if p.situation == Situation::I {
                f_triples.push((p.user, p.item, n.item));
            }
        }
        let d = self.h.dim;
        let models = &mut self.state.models;
        let adam = &mut self.state.adam;
        for (triples, frozen, state, name) in [
            (&f_triples, &mut models.f, adam.f.as_mut(), "f"),
            (&g_triples, &mut models.g, adam.g.as_mut(), "g"),
        ] {
            let (Some(state), false) = (state, triples.is_empty()) else {
                continue;
            };
            let mut grads = SparseGrad::new(d);
            bpr_batch_grad(frozen.model(), triples, &mut grads);
            adam_step(frozen.model_mut(), state, &grads, lr, l2).map_err(|e| match e {
                MbaError::NonFiniteGradient(_) => MbaError::NonFiniteGradient(name.into()),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Trains one epoch, validates, and updates the early-stopping state.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.state.finished {
            return Err(MbaError::InvalidArgument(
                "training already finished".into(),
            ));
        }
        let start = Instant::now();
        let epoch = self.state.epoch + 1;
        let flag_parity = StepFlag::from_batch_index(self.state.batches_done).bit();
        let mut rng = epoch_stream(self.h.seed, "mba/sampler", epoch);
        let samples = sample_epoch(&self.train, &mut rng)?;
        let (mut branch, mut kl) = (0.0, 0.0);
        for (b, batch) in samples.chunks(self.h.batch_size).enumerate() {
            let (bs, ks) = self.step(batch, epoch, b)?;
            branch += bs.as_f64();
            kl += ks.as_f64();
        }
        let n = samples.len() as f64;
        let val_recall20 = self.validate_recall(&self.state.models)?;
        self.state.epoch = epoch;
        match self.state.stopper.observe(epoch, val_recall20) {
            StopDecision::Improved => self.state.best.clone_from(&self.state.models),
            StopDecision::Continue => {}
            StopDecision::Stop => self.state.finished = true,
        }
        if epoch >= self.h.max_epochs {
            self.state.finished = true;
        }
        Ok(EpochRecord {
            epoch,
            flag_parity,
            mean_loss: (branch + self.h.alpha * kl) / n,
            mean_kl: kl / n,
            val_recall20,
            elapsed_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs to completion, calling `on_epoch` after every epoch.
    pub fn train_with(
        mut self,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<MbaOutcome<T>> {
        let mut log = Vec::new();
        while !self.state.finished {
            let rec = self.run_epoch()?;
            on_epoch(&self, &rec)?;
            log.push(rec);
        }
        Ok(self.finish(log))
    }

    pub fn finish(self, log: Vec<EpochRecord>) -> MbaOutcome<T> {
        MbaOutcome {
            best_epoch: self.state.stopper.best_epoch,
            best_recall20: self.state.stopper.best_value.max(0.0),
            last_epoch: self.state.epoch,
            models: self.state.best,
            log,
        }
    }
}

/// Runs alignment training to completion with default options.
pub fn mba_train<T: Scalar>(
    ds: &SplitDataset,
    f: FrozenModel<T>,
    g: FrozenModel<T>,
    h: &MbaHyperparams,
) -> Result<MbaOutcome<T>> {
    mba_train_with(ds, f, g, h, MbaOptions::default())
}

pub fn mba_train_with<T: Scalar>(
    ds: &SplitDataset,
    f: FrozenModel<T>,
    g: FrozenModel<T>,
    h: &MbaHyperparams,
    opts: MbaOptions,
) -> Result<MbaOutcome<T>> {
    MbaTrainer::new(ds, f, g, h, opts)?.train_with(|_, _| Ok(()))
}

/// Target-behavior report of the blended score.
pub fn evaluate_blended<T: Scalar>(
    t: &FactorModel<T>,
    f: &FrozenModel<T>,
    ds: &SplitDataset,
    beta: f64,
    eps: f64,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MbaError::InvalidArgument(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    let scorer = Blended {
        t,
        f,
        beta: T::of(beta),
        eps: T::of(eps),
    };
    crate::eval::evaluate(&scorer, ds, cutoffs)
}
