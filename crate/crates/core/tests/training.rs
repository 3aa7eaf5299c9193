mod common;

use common::{toy_config, toy_hyperparams};
use mba_core::mba::{mba_train_with, MbaTrainer};
use mba_core::pretrain::bpr_pretrain;
use mba_core::{freeze, generate, mba_train, FactorModel, MbaHyperparams, MbaOptions};

fn bits(m: &FactorModel<f32>) -> Vec<u32> {
    m.user_table()
        .iter()
        .chain(m.item_table())
        .map(|x| x.to_bits())
        .collect()
}

fn pretrained(
    seed: u64,
    h: &MbaHyperparams,
) -> (mba_core::SplitDataset, FactorModel<f32>, FactorModel<f32>) {
    let (ds, _) = generate(&toy_config(seed)).unwrap();
    let f = bpr_pretrain::<f32>(&ds.train_f, h).unwrap().model;
    let g = bpr_pretrain::<f32>(&ds.train_g, h).unwrap().model;
    (ds, f, g)
}

#[test]
fn degenerate_weights_still_train() {
    let h = MbaHyperparams {
        alpha: 0.0,
        c1: 0.0,
        c2: 0.0,
        max_epochs: 15,
        ..toy_hyperparams(3)
    };
    let (ds, f, g) = pretrained(3, &h);
    let out = mba_train(&ds, freeze(f), freeze(g), &h).unwrap();
    assert!(out.models.t.is_finite());
    assert!(out
        .log
        .iter()
        .all(|r| r.mean_loss.is_finite() && r.mean_kl.is_finite()));
    assert!(out.last_epoch <= 15);
}

#[test]
fn stops_within_patience_of_best() {
    let h = MbaHyperparams {
        patience: 5,
        ..toy_hyperparams(1)
    };
    let (ds, f, g) = pretrained(1, &h);
    let out = mba_train(&ds, freeze(f), freeze(g), &h).unwrap();
    assert!(out.last_epoch - out.best_epoch <= 5);
    assert!(
        out.last_epoch < h.max_epochs,
        "expected an early stop on the toy"
    );
    let best = out
        .log
        .iter()
        .map(|r| r.val_recall20)
        .fold(f64::MIN, f64::max);
    assert_eq!(out.best_recall20, best);
}

#[test]
fn training_is_bitwise_deterministic() {
    let h = MbaHyperparams {
        max_epochs: 10,
        ..toy_hyperparams(2)
    };
    let (ds, f, g) = pretrained(2, &h);
    let run = || mba_train(&ds, freeze(f.clone()), freeze(g.clone()), &h).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(bits(&a.models.t), bits(&b.models.t));
    assert_eq!(bits(&a.models.hg_neg), bits(&b.models.hg_neg));
    assert_eq!(
        a.log.iter().map(|r| r.mean_loss).collect::<Vec<_>>(),
        b.log.iter().map(|r| r.mean_loss).collect::<Vec<_>>()
    );
}

#[test]
fn frozen_models_are_untouched() {
    let h = MbaHyperparams {
        max_epochs: 5,
        ..toy_hyperparams(4)
    };
    let (ds, f, g) = pretrained(4, &h);
    let out = mba_train(&ds, freeze(f.clone()), freeze(g.clone()), &h).unwrap();
    assert_eq!(bits(out.models.f.model()), bits(&f));
    assert_eq!(bits(out.models.g.model()), bits(&g));
}

#[test]
fn cotraining_moves_behavior_models() {
    let h = MbaHyperparams {
        max_epochs: 3,
        ..toy_hyperparams(4)
    };
    let (ds, _) = generate(&toy_config(4)).unwrap();
    let f = FactorModel::<f32>::init(ds.num_users(), ds.num_items(), h.dim, 11).unwrap();
    let g = FactorModel::<f32>::init(ds.num_users(), ds.num_items(), h.dim, 12).unwrap();
    let opts = MbaOptions {
        cotrain_behavior_models: true,
    };
    let out = mba_train_with(&ds, freeze(f.clone()), freeze(g.clone()), &h, opts).unwrap();
    assert_ne!(bits(out.models.f.model()), bits(&f));
    assert_ne!(bits(out.models.g.model()), bits(&g));
}

#[test]
fn validation_is_disjoint_from_training_view() {
    let h = toy_hyperparams(5);
    let (ds, f, g) = pretrained(5, &h);
    let trainer = MbaTrainer::new(&ds, freeze(f), freeze(g), &h, MbaOptions::default()).unwrap();
    let val = trainer.validation();
    assert!(!val.is_empty());
    for (u, i) in val.pairs() {
        assert!(!trainer.train_view().train_f.contains(u, i));
        assert!(ds.train_f.contains(u, i));
    }
    assert_eq!(
        val.len() + trainer.train_view().train_f.len(),
        ds.train_f.len()
    );
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let h = toy_hyperparams(6);
    let (ds, _) = generate(&toy_config(6)).unwrap();
    let a = bpr_pretrain::<f32>(&ds.train_g, &h).unwrap();
    let b = bpr_pretrain::<f32>(&ds.train_g, &h).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    let first = a.log.first().unwrap().mean_loss;
    let last = a.log.last().unwrap().mean_loss;
    assert!(last < first, "BPR loss did not fall: {first} -> {last}");
    assert!(a.best_recall > 0.0);
}
