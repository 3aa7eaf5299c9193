//! Synthetic two-behavior data with a planted true-preference matrix.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{build_dataset, write_behavior_file, Manifest};
use crate::domain::{Behavior, InteractionSet, ItemId, SplitDataset, UserId};
use crate::error::{MbaError, Result};
use crate::eval::{rank_items, recall_at_k, Scorer};
use crate::schedule::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Dimension of the planted user/item factors.
    pub dim_true: usize,
    /// Probability that a non-preferred pair is clicked anyway.
    pub click_noise: f64,
    /// Probability that a preferred pair is clicked.
    pub exposure: f64,
    /// Probability that a clicked, preferred pair is purchased.
    pub purchase_rate: f64,
    /// Test fraction of each user's purchases.
    pub split: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 50,
            num_items: 40,
            dim_true: 4,
            click_noise: 0.3,
            exposure: 0.7,
            purchase_rate: 0.5,
            split: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("click_noise", self.click_noise),
            ("exposure", self.exposure),
            ("purchase_rate", self.purchase_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MbaError::InvalidArgument(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if self.num_users == 0 || self.num_items == 0 || self.dim_true == 0 {
            return Err(MbaError::InvalidArgument(
                "synthetic sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Items per user with planted preference (top quartile, rounded up).
    pub fn preferred_per_user(&self) -> usize {
        self.num_items.div_ceil(4)
    }
}

/// Raw generated pairs, indexed by the generator's own ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRaw {
    pub clicks: Vec<(i64, i64)>,
    pub purchases: Vec<(i64, i64)>,
    pub preferred: Vec<(i64, i64)>,
    /// Planted affinity, `num_users x num_items` row-major.
    pub affinity: Vec<f64>,
}

/// Planted preferences in a dataset's dense index space.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub preferred: InteractionSet,
    affinity: Vec<f64>,
    num_items: usize,
}

impl GroundTruth {
    pub fn affinity(&self, u: UserId, i: ItemId) -> f64 {
        self.affinity[u.index() * self.num_items + i.index()]
    }

    /// Scores pairs by planted affinity.
    pub fn affinity_scorer(&self) -> impl Scorer + '_ {
        AffinityScorer(self)
    }
}

struct AffinityScorer<'a>(&'a GroundTruth);

impl Scorer for AffinityScorer<'_> {
    fn num_items(&self) -> usize {
        self.0.num_items
    }

    fn score(&self, u: UserId, i: ItemId) -> f64 {
        self.0.affinity(u, i)
    }
}

/// Samples planted factors and both behaviors.
pub fn generate_raw(cfg: &SynthConfig) -> Result<SynthRaw> {
    cfg.validate()?;
    let (nu, ni, d) = (cfg.num_users, cfg.num_items, cfg.dim_true);
    let mut rng = stream(cfg.seed, "synth/factors");
    let mut factors = |n: usize| -> Vec<f64> {
        (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    };
    let users = factors(nu);
    let items = factors(ni);
    let mut affinity = vec![0.0; nu * ni];
    for u in 0..nu {
        for i in 0..ni {
            affinity[u * ni + i] = (0..d).map(|k| users[u * d + k] * items[i * d + k]).sum();
        }
    }

    let top = cfg.preferred_per_user();
    let mut rng = stream(cfg.seed, "synth/behaviors");
    let mut raw = SynthRaw {
        clicks: Vec::new(),
        purchases: Vec::new(),
        preferred: Vec::new(),
        affinity,
    };
    for u in 0..nu {
        let row = &raw.affinity[u * ni..(u + 1) * ni];
        let mut order: Vec<usize> = (0..ni).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut preferred = vec![false; ni];
        for &i in &order[..top] {
            preferred[i] = true;
        }
        for (i, &pref) in preferred.iter().enumerate() {
            let pair = (u as i64, i as i64);
            if pref {
                raw.preferred.push(pair);
                if rng.random_bool(cfg.exposure) {
                    raw.clicks.push(pair);
                    if rng.random_bool(cfg.purchase_rate) {
                        raw.purchases.push(pair);
                    }
                }
            } else if rng.random_bool(cfg.click_noise) {
                raw.clicks.push(pair);
            }
        }
    }
    Ok(raw)
}

/// Generates a split dataset together with its planted preferences.
pub fn generate(cfg: &SynthConfig) -> Result<(SplitDataset, GroundTruth)> {
    let raw = generate_raw(cfg)?;
    if raw.clicks.is_empty() || raw.purchases.is_empty() {
        return Err(MbaError::EmptyDataset(
            "synthetic configuration produced no interactions".into(),
        ));
    }
    let ds = build_dataset(&raw.clicks, &raw.purchases, cfg.split, cfg.seed)?;
    let truth = ground_truth(&ds, &raw, cfg.num_items);
    Ok((ds, truth))
}

fn ground_truth(ds: &SplitDataset, raw: &SynthRaw, raw_items: usize) -> GroundTruth {
    let (nu, ni) = (ds.num_users(), ds.num_items());
    let mut preferred = InteractionSet::new(Behavior::Target, nu, ni);
    for &(u, i) in &raw.preferred {
        if let (Some(du), Some(di)) = (ds.users.dense(u), ds.items.dense(i)) {
            preferred
                .insert(UserId(du), ItemId(di))
                .expect("dense ids in range");
        }
    }
    let mut affinity = vec![0.0; nu * ni];
    for du in 0..nu {
        let ru = ds.users.raw(du as u32).expect("dense user") as usize;
        for di in 0..ni {
            let ri = ds.items.raw(di as u32).expect("dense item") as usize;
            affinity[du * ni + di] = raw.affinity[ru * raw_items + ri];
        }
    }
    GroundTruth {
        preferred,
        affinity,
        num_items: ni,
    }
}

/// Writes `clicks.txt`, `purchases.txt`, `truth.txt` and `manifest.txt`.
/// The file stores relative paths; the returned manifest has them resolved.
pub fn write_synth(cfg: &SynthConfig, outdir: &Path) -> Result<Manifest> {
    let raw = generate_raw(cfg)?;
    std::fs::create_dir_all(outdir).map_err(|e| MbaError::io(outdir, e))?;
    write_behavior_file(&outdir.join("clicks.txt"), raw.clicks.iter().copied())?;
    write_behavior_file(&outdir.join("purchases.txt"), raw.purchases.iter().copied())?;
    write_behavior_file(&outdir.join("truth.txt"), raw.preferred.iter().copied())?;
    let manifest = Manifest {
        clicks: "clicks.txt".into(),
        purchases: "purchases.txt".into(),
        split: cfg.split,
        seed: cfg.seed,
    };
    manifest.write(&outdir.join("manifest.txt"))?;
    Ok(Manifest {
        clicks: outdir.join(&manifest.clicks),
        purchases: outdir.join(&manifest.purchases),
        ..manifest
    })
}

/// Recall@k against planted preferences, over all items (nothing masked),
/// averaged over users with at least one preferred item.
pub fn oracle_recall<S: Scorer>(scorer: &S, truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MbaError::InvalidArgument("k must be ≥ 1".into()));
    }
    let mut scores = Vec::new();
    let mut total = 0.0;
    let mut n = 0usize;
    for u in (0..truth.preferred.num_users() as u32).map(UserId) {
        let positives = truth.preferred.items_of(u);
        if positives.is_empty() {
            continue;
        }
        scorer.score_all(u, &mut scores);
        let top = rank_items(&scores, &[], k);
        total += recall_at_k(&top, positives).expect("non-empty");
        n += 1;
    }
    if n == 0 {
        return Err(MbaError::EmptyDataset(
            "ground truth has no preferred pairs".into(),
        ));
    }
    Ok(total / n as f64)
}
