//! Compares alignment training with plain MF on the synthetic toy.
//!
//! Usage: `cargo run --release --example toy_sweep -- [seeds] [key=value ...]`

use mba_core::mba::{evaluate_blended, mba_train_with};
use mba_core::pretrain::bpr_pretrain;
use mba_core::{
    evaluate, freeze, generate, oracle_recall, Blended, MbaHyperparams, MbaOptions, SynthConfig,
};

fn main() -> mba_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut h = MbaHyperparams {
        dim: 16,
        lr: 0.01,
        batch_size: 256,
        max_epochs: 300,
        l2: 1e-4,
        ..Default::default()
    };
    let mut cfg = SynthConfig::default();
    let mut cotrain = false;
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k {
            "alpha" => h.alpha = v.parse().unwrap(),
            "beta" => h.beta = v.parse().unwrap(),
            "c1" => h.c1 = v.parse().unwrap(),
            "c2" => h.c2 = v.parse().unwrap(),
            "lr" => h.lr = v.parse().unwrap(),
            "dim" => h.dim = v.parse().unwrap(),
            "l2" => h.l2 = v.parse().unwrap(),
            "batch" => h.batch_size = v.parse().unwrap(),
            "patience" => h.patience = v.parse().unwrap(),
            "epochs" => h.max_epochs = v.parse().unwrap(),
            "noise" => cfg.click_noise = v.parse().unwrap(),
            "exposure" => cfg.exposure = v.parse().unwrap(),
            "purchase" => cfg.purchase_rate = v.parse().unwrap(),
            "cotrain" => cotrain = v.parse().unwrap(),
            _ => panic!("unknown key {k}"),
        }
    }
    for seed in 0..seeds {
        let cfg = SynthConfig {
            seed,
            ..cfg.clone()
        };
        let (ds, truth) = generate(&cfg)?;
        let h = MbaHyperparams { seed, ..h.clone() };
        let f = bpr_pretrain::<f32>(&ds.train_f, &h)?;
        let g = bpr_pretrain::<f32>(&ds.train_g, &h)?;
        let mf = evaluate(&f.model, &ds, &[10, 20])?;
        let mf_or = oracle_recall(&f.model, &truth, 10)?;
        let out = if cotrain {
            let rf =
                mba_core::FactorModel::init(ds.num_users(), ds.num_items(), h.dim, seed + 1000)?;
            let rg =
                mba_core::FactorModel::init(ds.num_users(), ds.num_items(), h.dim, seed + 2000)?;
            mba_train_with(
                &ds,
                freeze(rf),
                freeze(rg),
                &h,
                MbaOptions {
                    cotrain_behavior_models: true,
                },
            )?
        } else {
            mba_train_with(
                &ds,
                freeze(f.model.clone()),
                freeze(g.model.clone()),
                &h,
                MbaOptions::default(),
            )?
        };
        let rep = evaluate_blended(&out.models.t, &out.models.f, &ds, h.beta, h.eps, &[10, 20])?;
        let scorer = Blended {
            t: &out.models.t,
            f: &out.models.f,
            beta: h.beta as f32,
            eps: h.eps as f32,
        };
        let mba_or = oracle_recall(&scorer, &truth, 10)?;
        let t_only = evaluate(&out.models.t, &ds, &[10])?;
        println!(
            "seed {seed}: MF R@10 {:.4} (ep {}) | MBA R@10 {:.4} t-only {:.4} (best ep {}, last {}) | oracle MF {:.4} MBA {:.4} | g R@10 {:.4}",
            mf.recall(10), f.best_epoch, rep.recall(10), t_only.recall(10), out.best_epoch, out.last_epoch, mf_or, mba_or,
            evaluate(&g.model, &ds, &[10])?.recall(10)
        );
    }
    Ok(())
}
