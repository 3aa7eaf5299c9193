#![allow(dead_code)]

use mba_core::{MbaHyperparams, SynthConfig};

/// Hyperparameters for the 50 x 40 synthetic toy.
pub fn toy_hyperparams(seed: u64) -> MbaHyperparams {
    MbaHyperparams {
        alpha: 100.0,
        beta: 0.8,
        c1: 100.0,
        c2: 100.0,
        lr: 0.01,
        dim: 16,
        l2: 1e-4,
        batch_size: 64,
        patience: 20,
        max_epochs: 300,
        eps: 1e-7,
        seed,
    }
}

pub fn toy_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_users: 50,
        num_items: 40,
        dim_true: 4,
        click_noise: 0.3,
        exposure: 0.7,
        purchase_rate: 0.5,
        split: 0.2,
        seed,
    }
}
