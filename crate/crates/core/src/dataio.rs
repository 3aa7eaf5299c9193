//! Behavior files, dataset manifests, the per-user train/test split and the
//! three-situation epoch sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{Behavior, IdMap, InteractionSet, ItemId, SplitDataset, UserId};
use crate::error::{MbaError, Result};

/// Which observed behaviors a training pair carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Situation {
    /// Clicked and purchased.
    I,
    /// Clicked but not purchased.
    II,
    /// Neither clicked nor purchased (sampled negative).
    III,
}

impl Situation {
    /// `(r_f, r_g)` flags implied by the situation.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Situation::I => (true, true),
            Situation::II => (false, true),
            Situation::III => (false, false),
        }
    }

    pub const ALL: [Situation; 3] = [Situation::I, Situation::II, Situation::III];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingSample {
    pub user: UserId,
    pub item: ItemId,
    pub situation: Situation,
}

impl TrainingSample {
    /// Target (purchase) flag.
    pub fn r_f(&self) -> bool {
        self.situation.flags().0
    }

    /// Auxiliary (click) flag.
    pub fn r_g(&self) -> bool {
        self.situation.flags().1
    }
}

/// Reads `<user> <item>` integer pairs; blank lines and `#` comments are skipped.
pub fn read_behavior_file(path: &Path) -> Result<Vec<(i64, i64)>> {
    let text = fs::read_to_string(path).map_err(|e| MbaError::io(path, e))?;
    parse_behavior_text(&text, path)
}

pub fn parse_behavior_text(text: &str, path: &Path) -> Result<Vec<(i64, i64)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| MbaError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(err(format!("expected 2 tokens, found {}", tokens.len())));
        }
        let u = tokens[0]
            .parse::<i64>()
            .map_err(|e| err(format!("bad user id {:?}: {e}", tokens[0])))?;
        let i = tokens[1]
            .parse::<i64>()
            .map_err(|e| err(format!("bad item id {:?}: {e}", tokens[1])))?;
        pairs.push((u, i));
    }
    Ok(pairs)
}

pub fn write_behavior_file(path: &Path, pairs: impl IntoIterator<Item = (i64, i64)>) -> Result<()> {
    let mut out = String::new();
    for (u, i) in pairs {
        out.push_str(&format!("{u} {i}\n"));
    }
    fs::write(path, out).map_err(|e| MbaError::io(path, e))
}

/// Parses flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MbaError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected key=value".into(),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Dataset manifest: behavior file locations plus split parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub clicks: PathBuf,
    pub purchases: PathBuf,
    pub split: f64,
    pub seed: u64,
}

impl Manifest {
    /// Relative paths are resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MbaError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut clicks = None;
        let mut purchases = None;
        let mut split = 0.2;
        let mut seed = 42;
        let bad = |msg: String| MbaError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        };
        for (k, v) in parse_key_values(&text, path)? {
            match k.as_str() {
                "clicks" => clicks = Some(base.join(v)),
                "purchases" => purchases = Some(base.join(v)),
                "split" => split = v.parse().map_err(|_| bad(format!("bad split {v:?}")))?,
                "seed" => seed = v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?,
                other => return Err(bad(format!("unknown manifest key {other:?}"))),
            }
        }
        Ok(Manifest {
            clicks: clicks.ok_or_else(|| bad("missing `clicks`".into()))?,
            purchases: purchases.ok_or_else(|| bad("missing `purchases`".into()))?,
            split,
            seed,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = format!(
            "clicks={}\npurchases={}\nsplit={}\nseed={}\n",
            self.clicks.display(),
            self.purchases.display(),
            self.split,
            self.seed
        );
        fs::write(path, text).map_err(|e| MbaError::io(path, e))
    }

    pub fn load_dataset(&self) -> Result<SplitDataset> {
        let clicks = read_behavior_file(&self.clicks)?;
        let purchases = read_behavior_file(&self.purchases)?;
        build_dataset(&clicks, &purchases, self.split, self.seed)
    }
}

/// Loads both behavior files and builds the split dataset.
pub fn load_dataset(
    click_file: &Path,
    purchase_file: &Path,
    split_ratio: f64,
    seed: u64,
) -> Result<SplitDataset> {
    let clicks = read_behavior_file(click_file)?;
    let purchases = read_behavior_file(purchase_file)?;
    build_dataset(&clicks, &purchases, split_ratio, seed)
}

/// Number of test items for a user with `n` target interactions.
fn test_count(n: usize, ratio: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Builds a [`SplitDataset`] from raw `(user, item)` pairs.
///
/// Users without interactions in both behaviors are dropped. Each remaining
/// user's purchases are shuffled and split `1 - split_ratio : split_ratio`
/// into train and test. Training purchases without a matching click are added
/// to the click set.
pub fn build_dataset(
    clicks: &[(i64, i64)],
    purchases: &[(i64, i64)],
    split_ratio: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(MbaError::InvalidArgument(format!(
            "split ratio must be in (0, 1), got {split_ratio}"
        )));
    }
    let mut click_rows: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
    for &(u, i) in clicks {
        click_rows.entry(u).or_default().insert(i);
    }
    let mut purchase_rows: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
    for &(u, i) in purchases {
        purchase_rows.entry(u).or_default().insert(i);
    }
    purchase_rows.retain(|u, _| click_rows.contains_key(u));
    click_rows.retain(|u, _| purchase_rows.contains_key(u));
    if purchase_rows.is_empty() {
        return Err(MbaError::EmptyDataset(
            "no user has interactions in both behaviors".into(),
        ));
    }

    let users = IdMap::from_raw_ids(purchase_rows.keys().copied());
    let items = IdMap::from_raw_ids(
        click_rows
            .values()
            .chain(purchase_rows.values())
            .flat_map(|s| s.iter().copied()),
    );
    let (nu, ni) = (users.len(), items.len());
    let uid = |u: i64| UserId(users.dense(u).expect("user indexed"));
    let iid = |i: i64| ItemId(items.dense(i).expect("item indexed"));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_f = InteractionSet::new(Behavior::Target, nu, ni);
    let mut test_f = InteractionSet::new(Behavior::Target, nu, ni);
    let mut train_g = InteractionSet::new(Behavior::Auxiliary, nu, ni);
    for (&u, row) in &purchase_rows {
        let mut its: Vec<i64> = row.iter().copied().collect();
        its.shuffle(&mut rng);
        let n_test = test_count(its.len(), split_ratio);
        for (k, &i) in its.iter().enumerate() {
            if k < n_test {
                test_f.insert(uid(u), iid(i))?;
            } else {
                train_f.insert(uid(u), iid(i))?;
                train_g.insert(uid(u), iid(i))?;
            }
        }
    }
    for (&u, row) in &click_rows {
        for &i in row {
            train_g.insert(uid(u), iid(i))?;
        }
    }
    Ok(SplitDataset {
        train_f,
        test_f,
        train_g,
        users,
        items,
    })
}

/// Fraction of a behavior's training pairs held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Seeded early-stopping holdout of a behavior's training pairs.
///
/// The same `(set, seed)` always yields the same split, so pretraining of the
/// target model and alignment training validate on identical pairs.
pub fn validation_split(set: &InteractionSet, seed: u64) -> (InteractionSet, InteractionSet) {
    let label = match set.behavior() {
        Behavior::Target => "validation/target",
        Behavior::Auxiliary => "validation/auxiliary",
    };
    set.holdout(
        VALIDATION_FRACTION,
        &mut crate::schedule::stream(seed, label),
    )
}

/// Draws an item uniformly among those the user has neither clicked nor
/// purchased in training.
pub fn sample_negative<R: Rng + ?Sized>(
    ds: &SplitDataset,
    user: UserId,
    rng: &mut R,
) -> Result<ItemId> {
    let ni = ds.num_items();
    let clicked = ds.train_g.items_of(user);
    let extra = ds
        .train_f
        .items_of(user)
        .iter()
        .filter(|&&i| !ds.train_g.contains(user, i))
        .count();
    if clicked.len() + extra >= ni {
        return Err(MbaError::SaturatedUser { user: user.index() });
    }
    loop {
        let j = ItemId(rng.random_range(0..ni as u32));
        if !ds.train_g.contains(user, j) && !ds.train_f.contains(user, j) {
            return Ok(j);
        }
    }
}

/// One epoch of training samples.
///
/// Every training click appears once (situation I when also purchased,
/// situation II otherwise), each immediately followed by one situation-III
/// negative for the same user. Positive order is shuffled by `rng`.
pub fn sample_epoch<R: Rng + ?Sized>(
    ds: &SplitDataset,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    let mut positives: Vec<TrainingSample> = ds
        .train_g
        .pairs()
        .map(|(user, item)| TrainingSample {
            user,
            item,
            situation: if ds.train_f.contains(user, item) {
                Situation::I
            } else {
                Situation::II
            },
        })
        .collect();
    // purchases missing from the click set count as clicked
    positives.extend(
        ds.train_f
            .pairs()
            .filter(|&(u, i)| !ds.train_g.contains(u, i))
            .map(|(user, item)| TrainingSample {
                user,
                item,
                situation: Situation::I,
            }),
    );
    if positives.is_empty() {
        return Err(MbaError::EmptyDataset("no training interactions".into()));
    }
    positives.shuffle(rng);
    let mut out = Vec::with_capacity(positives.len() * 2);
    for p in positives {
        let neg = sample_negative(ds, p.user, rng)?;
        out.push(p);
        out.push(TrainingSample {
            user: p.user,
            item: neg,
            situation: Situation::III,
        });
    }
    Ok(out)
}
