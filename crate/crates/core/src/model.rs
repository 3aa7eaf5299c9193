//! Matrix-factorization scorer with a sigmoid Bernoulli head, sparse Adam and
//! the `MBA1` checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::{ItemId, UserId};
use crate::error::{MbaError, Result};
use crate::scalar::{sigmoid, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBA1";
const HEADER_LEN: usize = 16;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// User and item embedding tables, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    num_users: usize,
    num_items: usize,
    dim: usize,
    user_emb: Vec<T>,
    item_emb: Vec<T>,
}

impl<T: Scalar> FactorModel<T> {
    /// Entries drawn i.i.d. from N(0, (0.1/√dim)²).
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::init_with_std(num_users, num_items, dim, 0.1 / (dim as f64).sqrt(), seed)
    }

    pub fn init_with_std(
        num_users: usize,
        num_items: usize,
        dim: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 || dim == 0 {
            return Err(MbaError::InvalidArgument(format!(
                "model shape must be positive, got {num_users} users x {num_items} items x dim {dim}"
            )));
        }
        let normal = Normal::new(0.0, std)
            .map_err(|e| MbaError::InvalidArgument(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |n: usize| -> Vec<T> { (0..n).map(|_| T::of(normal.sample(&mut rng))).collect() };
        let user_emb = draw(num_users * dim);
        let item_emb = draw(num_items * dim);
        Ok(FactorModel {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
        })
    }

    pub fn from_tables(
        num_users: usize,
        num_items: usize,
        dim: usize,
        user_emb: Vec<T>,
        item_emb: Vec<T>,
    ) -> Result<Self> {
        if user_emb.len() != num_users * dim || item_emb.len() != num_items * dim {
            return Err(MbaError::ShapeMismatch(format!(
                "tables of length {}/{} do not match {num_users}x{dim} / {num_items}x{dim}",
                user_emb.len(),
                item_emb.len()
            )));
        }
        Ok(FactorModel {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
        })
    }

    pub fn zeros_like(&self) -> Self {
        FactorModel {
            num_users: self.num_users,
            num_items: self.num_items,
            dim: self.dim,
            user_emb: vec![T::zero(); self.user_emb.len()],
            item_emb: vec![T::zero(); self.item_emb.len()],
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_table(&self) -> &[T] {
        &self.user_emb
    }

    pub fn item_table(&self) -> &[T] {
        &self.item_emb
    }

    pub fn user_table_mut(&mut self) -> &mut [T] {
        &mut self.user_emb
    }

    pub fn item_table_mut(&mut self) -> &mut [T] {
        &mut self.item_emb
    }

    #[inline]
    pub fn user_row(&self, u: UserId) -> &[T] {
        let d = self.dim;
        &self.user_emb[u.index() * d..(u.index() + 1) * d]
    }

    #[inline]
    pub fn item_row(&self, i: ItemId) -> &[T] {
        let d = self.dim;
        &self.item_emb[i.index() * d..(i.index() + 1) * d]
    }

    pub fn user_row_mut(&mut self, u: UserId) -> &mut [T] {
        let d = self.dim;
        &mut self.user_emb[u.index() * d..(u.index() + 1) * d]
    }

    pub fn item_row_mut(&mut self, i: ItemId) -> &mut [T] {
        let d = self.dim;
        &mut self.item_emb[i.index() * d..(i.index() + 1) * d]
    }

    fn check(&self, u: UserId, i: ItemId) -> Result<()> {
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
        Ok(())
    }

    /// Dot product of the user and item rows. Panics on out-of-range indices.
    #[inline]
    pub fn dot(&self, u: UserId, i: ItemId) -> T {
        self.user_row(u)
            .iter()
            .zip(self.item_row(i))
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn raw_score(&self, u: UserId, i: ItemId) -> Result<T> {
        self.check(u, i)?;
        Ok(self.dot(u, i))
    }

    /// Clamped Bernoulli parameter `sigmoid(raw_score)`.
    #[inline]
    pub fn prob(&self, u: UserId, i: ItemId, eps: T) -> T {
        clamped_sigmoid(self.dot(u, i), eps)
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb
            .iter()
            .chain(&self.item_emb)
            .all(|x| x.is_finite())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FactorModel<U> {
        FactorModel {
            num_users: self.num_users,
            num_items: self.num_items,
            dim: self.dim,
            user_emb: self.user_emb.iter().map(|x| U::of(x.as_f64())).collect(),
            item_emb: self.item_emb.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Serializes in the `MBA1` layout with `f32` little-endian entries.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * (self.user_emb.len() + self.item_emb.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for n in [self.num_users, self.num_items, self.dim] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for &x in self.user_emb.iter().chain(&self.item_emb) {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(MbaError::Checkpoint("not an MBA1 checkpoint".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(MbaError::Checkpoint("truncated checkpoint header".into()));
        }
        let field = |k: usize| {
            let s = 4 + 4 * k;
            u32::from_le_bytes(bytes[s..s + 4].try_into().expect("4 bytes")) as usize
        };
        let (nu, ni, dim) = (field(0), field(1), field(2));
        let expected = nu
            .checked_add(ni)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| MbaError::Checkpoint("checkpoint dimension overflow".into()))?;
        if bytes.len() != expected {
            return Err(MbaError::Checkpoint(format!(
                "truncated checkpoint: expected {expected} bytes for {nu}x{ni}x{dim}, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));
        let user_emb: Vec<T> = values.by_ref().take(nu * dim).collect();
        let item_emb: Vec<T> = values.collect();
        Ok(FactorModel {
            num_users: nu,
            num_items: ni,
            dim,
            user_emb,
            item_emb,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| MbaError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MbaError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|e| match e {
            MbaError::Checkpoint(msg) => MbaError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Byte length of an `MBA1` checkpoint.
pub fn checkpoint_len(num_users: usize, num_items: usize, dim: usize) -> usize {
    HEADER_LEN + 4 * dim * (num_users + num_items)
}

#[inline]
pub fn clamped_sigmoid<T: Scalar>(x: T, eps: T) -> T {
    let p = sigmoid(x);
    p.max(eps).min(T::one() - eps)
}

/// Clamped probability and its derivative with respect to the raw score
/// (zero where the clamp is active).
#[inline]
pub fn prob_and_slope<T: Scalar>(x: T, eps: T) -> (T, T) {
    let p = sigmoid(x);
    if p <= eps {
        (eps, T::zero())
    } else if p >= T::one() - eps {
        (T::one() - eps, T::zero())
    } else {
        (p, p * (T::one() - p))
    }
}

/// Row-sparse gradient of a [`FactorModel`].
///
/// Rows are kept in index order so that application order is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad<T> {
    dim: usize,
    users: BTreeMap<u32, Vec<T>>,
    items: BTreeMap<u32, Vec<T>>,
}

impl<T: Scalar> SparseGrad<T> {
    pub fn new(dim: usize) -> Self {
        SparseGrad {
            dim,
            users: BTreeMap::new(),
            items: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    /// `user_grad[u] += scale * v`
    pub fn add_user(&mut self, u: UserId, scale: T, v: &[T]) {
        let row = self
            .users
            .entry(u.0)
            .or_insert_with(|| vec![T::zero(); self.dim]);
        for (r, &x) in row.iter_mut().zip(v) {
            *r += scale * x;
        }
    }

    /// `item_grad[i] += scale * v`
    pub fn add_item(&mut self, i: ItemId, scale: T, v: &[T]) {
        let row = self
            .items
            .entry(i.0)
            .or_insert_with(|| vec![T::zero(); self.dim]);
        for (r, &x) in row.iter_mut().zip(v) {
            *r += scale * x;
        }
    }

    /// Accumulates the gradient of `coef * dot(u, i)` for `model`.
    pub fn add_score_grad(&mut self, model: &FactorModel<T>, u: UserId, i: ItemId, coef: T) {
        self.add_user(u, coef, model.item_row(i));
        self.add_item(i, coef, model.user_row(u));
    }

    pub fn user_rows(&self) -> impl Iterator<Item = (UserId, &[T])> {
        self.users.iter().map(|(&u, v)| (UserId(u), v.as_slice()))
    }

    pub fn item_rows(&self) -> impl Iterator<Item = (ItemId, &[T])> {
        self.items.iter().map(|(&i, v)| (ItemId(i), v.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .values()
            .chain(self.items.values())
            .flatten()
            .all(|x| x.is_finite())
    }
}

/// Adam moments shaped like a [`FactorModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: FactorModel<T>,
    pub v: FactorModel<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &FactorModel<T>) -> Self {
        Self::from_moments(model.zeros_like(), model.zeros_like(), 0)
    }

    pub fn from_moments(m: FactorModel<T>, v: FactorModel<T>, step: u64) -> Self {
        AdamState {
            m,
            v,
            step,
            beta1: T::of(ADAM_BETA1),
            beta2: T::of(ADAM_BETA2),
            eps: T::of(ADAM_EPS),
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_rows<T: Scalar>(
    param: &mut [T],
    m: &mut [T],
    v: &mut [T],
    grad: &[T],
    state: (T, T, T),
    lr: T,
    l2: T,
    bias: (T, T),
) {
    let (b1, b2, eps) = state;
    let (bc1, bc2) = bias;
    for k in 0..param.len() {
        let g = grad[k] + l2 * param[k];
        m[k] = b1 * m[k] + (T::one() - b1) * g;
        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One bias-corrected Adam update on the rows present in `grads`.
///
/// `l2 * param` is added to each touched gradient entry. Untouched rows keep
/// both their parameters and their moments.
pub fn adam_step<T: Scalar>(
    model: &mut FactorModel<T>,
    state: &mut AdamState<T>,
    grads: &SparseGrad<T>,
    lr: T,
    l2: T,
) -> Result<()> {
    if grads.dim != model.dim {
        return Err(MbaError::ShapeMismatch(format!(
            "gradient dim {} vs model dim {}",
            grads.dim, model.dim
        )));
    }
    if !grads.is_finite() {
        return Err(MbaError::NonFiniteGradient("sparse gradient".into()));
    }
    for (u, _) in grads.user_rows() {
        if u.index() >= model.num_users {
            return Err(MbaError::IndexOutOfRange {
                kind: "user",
                index: u.index(),
                bound: model.num_users,
            });
        }
    }
    for (i, _) in grads.item_rows() {
        if i.index() >= model.num_items {
            return Err(MbaError::IndexOutOfRange {
                kind: "item",
                index: i.index(),
                bound: model.num_items,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias = (
        T::one() - state.beta1.powi(t),
        T::one() - state.beta2.powi(t),
    );
    let consts = (state.beta1, state.beta2, state.eps);
    let d = model.dim;
    for (u, g) in grads.user_rows() {
        let r = u.index() * d..(u.index() + 1) * d;
        adam_rows(
            &mut model.user_emb[r.clone()],
            &mut state.m.user_emb[r.clone()],
            &mut state.v.user_emb[r],
            g,
            consts,
            lr,
            l2,
            bias,
        );
    }
    for (i, g) in grads.item_rows() {
        let r = i.index() * d..(i.index() + 1) * d;
        adam_rows(
            &mut model.item_emb[r.clone()],
            &mut state.m.item_emb[r.clone()],
            &mut state.v.item_emb[r],
            g,
            consts,
            lr,
            l2,
            bias,
        );
    }
    Ok(())
}
