//! BPR pretraining of the behavior models and the read-only handle used once
//! they are fixed.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::validation_split;
use crate::domain::{Behavior, InteractionSet, ItemId, MbaHyperparams, UserId};
use crate::error::{MbaError, Result};
use crate::eval::{evaluate_with_mask, Scorer};
use crate::model::{adam_step, AdamState, FactorModel, SparseGrad};
use crate::scalar::{sigmoid, Scalar};
use crate::schedule::{epoch_stream, EarlyStopping, StopDecision};

/// A behavior model whose parameters can no longer be updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel<T>(FactorModel<T>);

pub fn freeze<T>(m: FactorModel<T>) -> FrozenModel<T> {
    FrozenModel(m)
}

impl<T: Scalar> FrozenModel<T> {
    pub fn model(&self) -> &FactorModel<T> {
        &self.0
    }

    #[inline]
    pub fn dot(&self, u: UserId, i: ItemId) -> T {
        self.0.dot(u, i)
    }

    pub fn raw_score(&self, u: UserId, i: ItemId) -> Result<T> {
        self.0.raw_score(u, i)
    }

    #[inline]
    pub fn prob(&self, u: UserId, i: ItemId, eps: T) -> T {
        self.0.prob(u, i, eps)
    }

    pub fn into_inner(self) -> FactorModel<T> {
        self.0
    }

    /// Only the co-training ablation may move a behavior model.
    pub(crate) fn model_mut(&mut self) -> &mut FactorModel<T> {
        &mut self.0
    }
}

impl<T: Scalar> Scorer for FrozenModel<T> {
    fn num_items(&self) -> usize {
        self.0.num_items()
    }

    fn score(&self, u: UserId, i: ItemId) -> f64 {
        self.0.dot(u, i).as_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone)]
pub struct BprOutcome<T> {
    pub model: FactorModel<T>,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub log: Vec<BprEpoch>,
}

fn stream_label(behavior: Behavior) -> &'static str {
    match behavior {
        Behavior::Target => "bpr/target",
        Behavior::Auxiliary => "bpr/auxiliary",
    }
}

/// `-ln σ(x)` without overflow.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Adds the gradient of the mean BPR loss over `triples` to `grads` and
/// returns the summed loss.
pub fn bpr_batch_grad<T: Scalar>(
    model: &FactorModel<T>,
    triples: &[(UserId, ItemId, ItemId)],
    grads: &mut SparseGrad<T>,
) -> f64 {
    let scale = T::one() / T::of(triples.len() as f64);
    let mut loss = 0.0;
    for &(u, i, j) in triples {
        let x = model.dot(u, i) - model.dot(u, j);
        loss += neg_log_sigmoid(x.as_f64());
        // d/dx −ln σ(x) = −σ(−x)
        let coef = -sigmoid(-x) * scale;
        let (ui, uj) = (model.item_row(i), model.item_row(j));
        let diff: Vec<T> = ui.iter().zip(uj).map(|(&a, &b)| a - b).collect();
        grads.add_user(u, coef, &diff);
        grads.add_item(i, coef, model.user_row(u));
        grads.add_item(j, -coef, model.user_row(u));
    }
    loss
}

/// Uniform negative for `u` outside `positives` (and `also_exclude`, if given).
pub(crate) fn sample_bpr_negative<R: Rng + ?Sized>(
    positives: &InteractionSet,
    also_exclude: Option<&InteractionSet>,
    u: UserId,
    rng: &mut R,
) -> Result<ItemId> {
    let ni = positives.num_items();
    let mut excluded = positives.items_of(u).len();
    if let Some(x) = also_exclude {
        excluded += x
            .items_of(u)
            .iter()
            .filter(|&&i| !positives.contains(u, i))
            .count();
    }
    if excluded >= ni {
        return Err(MbaError::SaturatedUser { user: u.index() });
    }
    loop {
        let j = ItemId(rng.random_range(0..ni as u32));
        if !positives.contains(u, j) && !also_exclude.is_some_and(|x| x.contains(u, j)) {
            return Ok(j);
        }
    }
}

/// Trains a matrix-factorization model on one behavior with the BPR loss.
///
/// A seeded 10% of `data` is held out; training stops once Recall@20 on it
/// has not improved for `h.patience` epochs and the best model is returned.
pub fn bpr_pretrain<T: Scalar>(data: &InteractionSet, h: &MbaHyperparams) -> Result<BprOutcome<T>> {
    h.validate()?;
    if data.is_empty() {
        return Err(MbaError::EmptyDataset(
            "no interactions to pretrain on".into(),
        ));
    }
    let (train, val) = validation_split(data, h.seed);
    let label = stream_label(data.behavior());
    let mut model = FactorModel::<T>::init(
        data.num_users(),
        data.num_items(),
        h.dim,
        crate::schedule::derive_seed(h.seed, &format!("{label}/init")),
    )?;
    let mut adam = AdamState::new(&model);
    let (lr, l2) = (T::of(h.lr), T::of(h.l2));
    let mut stopper = EarlyStopping::new(h.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let pairs: Vec<(UserId, ItemId)> = train.pairs().collect();

    for epoch in 1..=h.max_epochs {
        let mut rng = epoch_stream(h.seed, label, epoch);
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(h.batch_size) {
            let mut triples = Vec::with_capacity(chunk.len());
            for &(u, i) in chunk {
                triples.push((u, i, sample_bpr_negative(&train, Some(&val), u, &mut rng)?));
            }
            let mut grads = SparseGrad::new(h.dim);
            total += bpr_batch_grad(&model, &triples, &mut grads);
            adam_step(&mut model, &mut adam, &grads, lr, l2)?;
        }
        let mean_loss = total / pairs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(MbaError::NonFinite {
                epoch,
                batch: 0,
                term: "bpr loss".into(),
            });
        }
        let val_recall = if val.is_empty() {
            -(epoch as f64).recip() // no holdout: the latest epoch is always best
        } else {
            evaluate_with_mask(&model, &train, &val, &[20])?.recall(20)
        };
        log.push(BprEpoch {
            epoch,
            mean_loss,
            val_recall,
        });
        match stopper.observe(epoch, val_recall) {
            StopDecision::Improved => best.clone_from(&model),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(BprOutcome {
        model: best,
        best_epoch: stopper.best_epoch,
        best_recall: stopper.best_value.max(0.0),
        log,
    })
}
