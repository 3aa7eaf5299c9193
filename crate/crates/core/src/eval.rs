//! Full-ranking top-k evaluation with Recall@k and NDCG@k.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{InteractionSet, ItemId, SplitDataset, UserId};
use crate::error::{MbaError, Result};
use crate::model::FactorModel;
use crate::scalar::Scalar;

/// Cutoffs reported by default.
pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];

/// Anything that can score a (user, item) pair for ranking.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    fn score(&self, u: UserId, i: ItemId) -> f64;

    fn score_all(&self, u: UserId, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_items()).map(|i| self.score(u, ItemId(i as u32))));
    }
}

/// Plain matrix factorization ranks by raw dot product.
impl<T: Scalar> Scorer for FactorModel<T> {
    fn num_items(&self) -> usize {
        FactorModel::num_items(self)
    }

    fn score(&self, u: UserId, i: ItemId) -> f64 {
        self.dot(u, i).as_f64()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn num_items(&self) -> usize {
        (**self).num_items()
    }

    fn score(&self, u: UserId, i: ItemId) -> f64 {
        (**self).score(u, i)
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    }
}

/// The `k` highest-scoring items not in `mask`, best first; ties go to the
/// lower item index. Returns every unmasked item when fewer than `k` exist.
pub fn rank_items(scores: &[f64], mask: &[ItemId], k: usize) -> Vec<ItemId> {
    let mut masked = vec![false; scores.len()];
    for &i in mask {
        if let Some(m) = masked.get_mut(i.index()) {
            *m = true;
        }
    }
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|&i| !masked[i as usize])
        .collect();
    let cmp = by_score_then_index(scores);
    if k < cand.len() {
        if k == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(k - 1, &cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(&cmp);
    cand.into_iter().map(ItemId).collect()
}

fn hit(test_items: &[ItemId], i: ItemId) -> bool {
    test_items.contains(&i)
}

/// `|topk ∩ test| / |test|`, or `None` when there are no test items.
pub fn recall_at_k(topk: &[ItemId], test_items: &[ItemId]) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    let hits = topk.iter().filter(|&&i| hit(test_items, i)).count();
    Some(hits as f64 / test_items.len() as f64)
}

/// Binary-relevance NDCG with the ideal ranking truncated at
/// `min(|topk|, |test|)`; `None` when there are no test items.
pub fn ndcg_at_k(topk: &[ItemId], test_items: &[ItemId]) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = topk
        .iter()
        .enumerate()
        .filter(|(_, &i)| hit(test_items, i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=topk.len().min(test_items.len())).map(discount).sum();
    if ideal == 0.0 {
        return Some(0.0);
    }
    Some(dcg / ideal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Per-cutoff metrics averaged over users with a non-empty test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users_evaluated: usize,
    pub cutoffs: Vec<CutoffMetrics>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.ndcg)
    }

    /// `metric,k,value,users` rows, recall first then ndcg.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value,users\n");
        for c in &self.cutoffs {
            out.push_str(&format!(
                "recall,{},{},{}\n",
                c.k, c.recall, self.users_evaluated
            ));
        }
        for c in &self.cutoffs {
            out.push_str(&format!(
                "ndcg,{},{},{}\n",
                c.k, c.ndcg, self.users_evaluated
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| MbaError::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>6} {:>10}", "metric", "k", "value")?;
        for c in &self.cutoffs {
            writeln!(f, "{:>8} {:>6} {:>10.4}", "recall", c.k, c.recall)?;
        }
        for c in &self.cutoffs {
            writeln!(f, "{:>8} {:>6} {:>10.4}", "ndcg", c.k, c.ndcg)?;
        }
        write!(f, "users evaluated: {}", self.users_evaluated)
    }
}

/// Parallelism cap for evaluation, from `MBA_THREADS`.
pub fn eval_threads() -> Option<usize> {
    std::env::var("MBA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn run_in_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match eval_threads() {
        Some(1) => f(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Ranks all items for every user with test items, masking `mask` positives.
///
/// Per-user results are reduced in user order, so the report does not depend
/// on the thread count.
pub fn evaluate_with_mask<S: Scorer>(
    scorer: &S,
    mask: &InteractionSet,
    test: &InteractionSet,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(MbaError::InvalidArgument(
            "cutoffs must be non-empty and ≥ 1".into(),
        ));
    }
    if scorer.num_items() != test.num_items() {
        return Err(MbaError::ShapeMismatch(format!(
            "scorer has {} items, dataset has {}",
            scorer.num_items(),
            test.num_items()
        )));
    }
    let users: Vec<UserId> = (0..test.num_users() as u32)
        .map(UserId)
        .filter(|&u| !test.items_of(u).is_empty())
        .collect();
    if users.is_empty() {
        return Err(MbaError::EmptyDataset("no user has test items".into()));
    }
    let kmax = *cutoffs.iter().max().expect("non-empty");
    let per_user: Vec<Vec<(f64, f64)>> = run_in_pool(|| {
        users
            .par_iter()
            .map_init(Vec::new, |scores, &u| {
                scorer.score_all(u, scores);
                let top = rank_items(scores, mask.items_of(u), kmax);
                let test_items = test.items_of(u);
                cutoffs
                    .iter()
                    .map(|&k| {
                        let topk = &top[..k.min(top.len())];
                        (
                            recall_at_k(topk, test_items).expect("non-empty test"),
                            ndcg_at_k(topk, test_items).expect("non-empty test"),
                        )
                    })
                    .collect()
            })
            .collect()
    });
    let n = users.len() as f64;
    let cutoffs = cutoffs
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let (r, g) = per_user
                .iter()
                .fold((0.0, 0.0), |(r, g), row| (r + row[c].0, g + row[c].1));
            CutoffMetrics {
                k,
                recall: r / n,
                ndcg: g / n,
            }
        })
        .collect();
    Ok(EvalReport {
        users_evaluated: users.len(),
        cutoffs,
    })
}

/// Evaluates on `test_f`, masking each user's `train_f` positives.
pub fn evaluate<S: Scorer>(scorer: &S, ds: &SplitDataset, cutoffs: &[usize]) -> Result<EvalReport> {
    evaluate_with_mask(scorer, &ds.train_f, &ds.test_f, cutoffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn rank_examples() {
        let s = [0.9, 0.1, 0.5];
        assert_eq!(rank_items(&s, &[], 2), ids(&[0, 2]));
        assert_eq!(rank_items(&s, &ids(&[0]), 2), ids(&[2, 1]));
        assert_eq!(rank_items(&s, &ids(&[0]), 5), ids(&[2, 1]));
    }

    #[test]
    fn ties_break_by_index() {
        let s = [0.5, 0.7, 0.5, 0.7];
        assert_eq!(rank_items(&s, &[], 4), ids(&[1, 3, 0, 2]));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&ids(&[1, 2, 3]), &ids(&[1, 3])), Some(1.0));
        assert_eq!(recall_at_k(&ids(&[1, 2]), &ids(&[5])), Some(0.0));
        assert_eq!(recall_at_k(&ids(&[1, 2]), &ids(&[2, 7, 8, 9])), Some(0.25));
        assert_eq!(recall_at_k(&ids(&[1]), &[]), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&ids(&[4, 1]), &ids(&[4])), Some(1.0));
        let second = ndcg_at_k(&ids(&[1, 4]), &ids(&[4])).unwrap();
        assert!((second - 0.630930).abs() < 1e-6);
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ids(&[1, 2]), &ids(&[4])), Some(0.0));
    }
}
