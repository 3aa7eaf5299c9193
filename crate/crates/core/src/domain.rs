//! Identifier spaces, interaction sets and hyperparameters shared by every stage.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbaError, Result};

/// Dense 0-based user index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

/// Dense 0-based item index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl UserId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    /// Dense, noisy behavior (clicks).
    Auxiliary,
    /// Sparse behavior to predict (purchases).
    Target,
}

/// Bijection between raw dataset ids and dense indices `0..n`.
///
/// Dense indices follow ascending raw-id order, so building the map from the
/// same set of ids always yields the same assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<i64>,
    dense: HashMap<i64, u32>,
}

impl IdMap {
    pub fn from_raw_ids(ids: impl IntoIterator<Item = i64>) -> Self {
        let mut raw: Vec<i64> = ids.into_iter().collect();
        raw.sort_unstable();
        raw.dedup();
        let dense = raw
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i as u32))
            .collect();
        IdMap { raw, dense }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: i64) -> Option<u32> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: u32) -> Option<i64> {
        self.raw.get(dense as usize).copied()
    }

    pub fn raw_ids(&self) -> &[i64] {
        &self.raw
    }
}

/// Sparse binary user-item matrix for one behavior type.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    behavior: Behavior,
    num_users: usize,
    num_items: usize,
    rows: Vec<Vec<ItemId>>,
    members: HashSet<(u32, u32)>,
}

impl PartialEq for InteractionSet {
    fn eq(&self, other: &Self) -> bool {
        self.behavior == other.behavior
            && self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.rows == other.rows
    }
}

impl InteractionSet {
    pub fn new(behavior: Behavior, num_users: usize, num_items: usize) -> Self {
        InteractionSet {
            behavior,
            num_users,
            num_items,
            rows: vec![Vec::new(); num_users],
            members: HashSet::new(),
        }
    }

    /// Builds a set from pairs, dropping duplicates. Fails on out-of-range indices.
    pub fn from_pairs(
        behavior: Behavior,
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (UserId, ItemId)>,
    ) -> Result<Self> {
        let mut set = Self::new(behavior, num_users, num_items);
        for (u, i) in pairs {
            set.insert(u, i)?;
        }
        Ok(set)
    }

    /// Inserts a pair; returns whether it was new.
    pub fn insert(&mut self, u: UserId, i: ItemId) -> Result<bool> {
        if u.index() >= self.num_users {
            return Err(MbaError::IndexOutOfRange {
                kind: "user",
                index: u.index(),
                bound: self.num_users,
            });
        }
        if i.index() >= self.num_items {
            return Err(MbaError::IndexOutOfRange {
                kind: "item",
                index: i.index(),
                bound: self.num_items,
            });
        }
        if !self.members.insert((u.0, i.0)) {
            return Ok(false);
        }
        let row = &mut self.rows[u.index()];
        let pos = row.partition_point(|&x| x < i);
        row.insert(pos, i);
        Ok(true)
    }

    #[inline]
    pub fn contains(&self, u: UserId, i: ItemId) -> bool {
        self.members.contains(&(u.0, i.0))
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Items of user `u`, ascending.
    pub fn items_of(&self, u: UserId) -> &[ItemId] {
        &self.rows[u.index()]
    }

    /// All pairs in (user, item) ascending order.
    pub fn pairs(&self) -> impl Iterator<Item = (UserId, ItemId)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&i| (UserId(u as u32), i)))
    }

    /// Splits off roughly `fraction` of all pairs, chosen by `rng`, while
    /// leaving every user that had a pair with at least one remaining pair.
    ///
    /// Returns `(kept, held_out)`.
    pub fn holdout<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut pairs: Vec<(UserId, ItemId)> = self.pairs().collect();
        pairs.shuffle(rng);
        let target = (fraction * pairs.len() as f64).ceil() as usize;
        let mut remaining: Vec<usize> = self.rows.iter().map(Vec::len).collect();
        let mut kept = Self::new(self.behavior, self.num_users, self.num_items);
        let mut held = Self::new(self.behavior, self.num_users, self.num_items);
        for (u, i) in pairs {
            if held.len() < target && remaining[u.index()] > 1 {
                remaining[u.index()] -= 1;
                held.insert(u, i).expect("indices already validated");
            } else {
                kept.insert(u, i).expect("indices already validated");
            }
        }
        (kept, held)
    }
}

/// Target/auxiliary training data plus the target test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train_f: InteractionSet,
    pub test_f: InteractionSet,
    pub train_g: InteractionSet,
    pub users: IdMap,
    pub items: IdMap,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Replaces the target training pairs, keeping the auxiliary and test sets.
    pub fn with_train_f(&self, train_f: InteractionSet) -> Self {
        SplitDataset {
            train_f,
            ..self.clone()
        }
    }
}

/// Hyperparameters for pretraining and alignment training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbaHyperparams {
    /// Weight of the two KL alignment terms.
    pub alpha: f64,
    /// Weight of the aligned model in the inference score.
    pub beta: f64,
    /// Stand-in for `-ln h` of the negative-conditional models in the first step.
    pub c1: f64,
    /// Stand-in for `-ln(1 - h)` of the positive-conditional models in the second step.
    pub c2: f64,
    pub lr: f64,
    pub dim: usize,
    pub l2: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Probability clamp: every model probability lies in `[eps, 1 - eps]`.
    pub eps: f64,
    pub seed: u64,
}

impl Default for MbaHyperparams {
    fn default() -> Self {
        MbaHyperparams {
            alpha: 100.0,
            beta: 0.8,
            c1: 100.0,
            c2: 100.0,
            lr: 0.001,
            dim: 32,
            l2: 1e-6,
            batch_size: 2048,
            patience: 20,
            max_epochs: 500,
            eps: 1e-7,
            seed: 42,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> MbaError {
    MbaError::InvalidHyperparam {
        field,
        reason: reason.into(),
    }
}

impl MbaHyperparams {
    pub fn validate(&self) -> Result<()> {
        validate_hyperparams(self)
    }
}

/// Checks every range constraint, naming the first offending field.
pub fn validate_hyperparams(h: &MbaHyperparams) -> Result<()> {
    if !(h.alpha >= 0.0 && h.alpha.is_finite()) {
        return Err(invalid("alpha", "alpha must be ≥ 0"));
    }
    if !(0.0..=1.0).contains(&h.beta) {
        return Err(invalid("beta", "beta must be in [0, 1]"));
    }
    if !(h.c1 >= 0.0 && h.c1.is_finite()) {
        return Err(invalid("c1", "c1 must be ≥ 0"));
    }
    if !(h.c2 >= 0.0 && h.c2.is_finite()) {
        return Err(invalid("c2", "c2 must be ≥ 0"));
    }
    if !(h.lr > 0.0 && h.lr.is_finite()) {
        return Err(invalid("lr", "lr must be > 0"));
    }
    if h.dim == 0 {
        return Err(invalid("dim", "dim must be ≥ 1"));
    }
    if !(h.l2 >= 0.0 && h.l2.is_finite()) {
        return Err(invalid("l2", "l2 must be ≥ 0"));
    }
    if h.batch_size == 0 {
        return Err(invalid("batch_size", "batch_size must be ≥ 1"));
    }
    if h.max_epochs == 0 {
        return Err(invalid("max_epochs", "max_epochs must be ≥ 1"));
    }
    if !(h.eps > 0.0 && h.eps < 0.5) {
        return Err(invalid("eps", "eps must be in (0, 0.5)"));
    }
    Ok(())
}
