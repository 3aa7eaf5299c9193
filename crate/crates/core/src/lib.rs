//! Multi-behavior alignment for implicit-feedback recommendation.
//!
//! A latent true-preference model is learned from two noisy behaviors
//! (auxiliary clicks and target purchases) by maximizing their likelihood
//! under Bernoulli corruption models while keeping the behavior-specific
//! preference models close to it in KL divergence.
//!
//! Numerical code is generic over [`Scalar`]; `f32` is used for training and
//! checkpoints, `f64` for gradient checks.

pub mod dataio;
pub mod domain;
pub mod error;
pub mod eval;
pub mod mba;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod scalar;
pub mod schedule;
pub mod synth;

pub use dataio::{load_dataset, sample_epoch, Manifest, Situation, TrainingSample};
pub use domain::{
    validate_hyperparams, Behavior, IdMap, InteractionSet, ItemId, MbaHyperparams, SplitDataset,
    UserId,
};
pub use error::{MbaError, Result};
pub use eval::{evaluate, EvalReport, Scorer};
pub use mba::{
    bernoulli_kl, blended_score, branch_loss, kl_term, mba_train, Blended, MbaModels, MbaOptions,
    MbaTrainer, StepFlag,
};
pub use model::{adam_step, AdamState, FactorModel, SparseGrad};
pub use pretrain::{bpr_pretrain, freeze, FrozenModel};
pub use scalar::Scalar;
pub use synth::{generate, oracle_recall, GroundTruth, SynthConfig};

/// Training precision.
pub type FactorModel32 = FactorModel<f32>;
/// Gradient-check precision.
pub type FactorModel64 = FactorModel<f64>;
pub type FrozenModel32 = FrozenModel<f32>;
pub type FrozenModel64 = FrozenModel<f64>;
pub type MbaModels32 = MbaModels<f32>;
pub type MbaModels64 = MbaModels<f64>;
pub type AdamState32 = AdamState<f32>;
pub type AdamState64 = AdamState<f64>;
