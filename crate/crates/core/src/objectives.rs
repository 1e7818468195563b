//! Contrastive and supervised objectives and the contrastive weight schedule.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Augmented,
    #[serde(alias = "multi_step")]
    Multistep,
    None,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmented" => Ok(Strategy::Augmented),
            "multistep" | "multi-step" | "multi_step" => Ok(Strategy::Multistep),
            "none" => Ok(Strategy::None),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Augmented => "augmented",
            Strategy::Multistep => "multistep",
            Strategy::None => "none",
        })
    }
}

/// Which terms the softmax denominator sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Positive plus negatives (standard InfoNCE).
    #[default]
    WithPositive,
    /// Negatives only; undefined for an empty negative set.
    NegativesOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub mask_ratio: f64,
    pub offset: usize,
    pub use_moco: bool,
    pub queue_size: usize,
    pub momentum: f64,
    pub denominator: Denominator,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Augmented,
            tau: 0.07,
            mask_ratio: 0.3,
            offset: 3,
            use_moco: true,
            queue_size: 512,
            momentum: 0.999,
            denominator: Denominator::WithPositive,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must lie in (0, 1)".into()));
        }
        if !(1..=6).contains(&self.offset) {
            return Err(Error::Config("offset must lie in 1..=6".into()));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("queue_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSchedule {
    pub warmup_epochs: f64,
    pub kappa: f64,
    pub theta: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { warmup_epochs: 20.0, kappa: 10.0, theta: 2.0 }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs > 0.0 && self.kappa > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config("lambda schedule needs warmup > 0 and kappa > 0".into()));
        }
        Ok(())
    }

    /// `min(1, e / E_warmup) · gate`, with gate 0 at epoch 0 and
    /// `σ(κ·(MAE_{e−1} − θ))` afterwards.
    pub fn value(&self, epoch: usize, previous_mae: f64) -> f64 {
        if epoch == 0 {
            return 0.0;
        }
        let warm = (epoch as f64 / self.warmup_epochs).min(1.0);
        let gate = 1.0 / (1.0 + (-self.kappa * (previous_mae - self.theta)).exp());
        warm * gate
    }
}

/// [`LambdaSchedule::value`] at the default constants.
pub fn lambda_value(epoch: usize, previous_mae: f64) -> f64 {
    LambdaSchedule::default().value(epoch, previous_mae)
}

pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", (1, a.len()), (1, b.len())));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// FIFO of L2-normalized key embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MoCoQueue<T> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<T>>,
}

impl<T: Scalar> MoCoQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends every row of `keys`, evicting the oldest entries beyond
    /// capacity. Zero rows are skipped.
    pub fn push(&mut self, keys: &Matrix<T>) -> Result<()> {
        if keys.cols() != self.dim {
            return Err(Error::dim("queue_push", keys.shape(), (keys.rows(), self.dim)));
        }
        for i in 0..keys.rows() {
            let row = keys.row(i);
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm == T::zero() {
                continue;
            }
            self.entries.push_back(row.iter().map(|&x| x / norm).collect());
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// `len × dim` matrix of the current entries, oldest first.
    pub fn to_matrix(&self) -> Matrix<T> {
        let data = self.entries.iter().flatten().copied().collect();
        Matrix::from_raw(self.entries.len(), self.dim, data)
    }
}

/// InfoNCE against a fixed negative set. `q` (query, tracked) and `k`
/// (positives) are `n × d`; `negatives` holds unit rows. Returns the mean
/// over the `n` rows.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    negatives: &Matrix<T>,
    tau: T,
    denominator: Denominator,
) -> Result<Var> {
    let (n, d) = tape.shape(q);
    if tape.shape(k) != (n, d) {
        return Err(Error::dim("info_nce", (n, d), tape.shape(k)));
    }
    if negatives.rows() > 0 && negatives.cols() != d {
        return Err(Error::dim("info_nce negatives", negatives.shape(), (negatives.rows(), d)));
    }
    if denominator == Denominator::NegativesOnly && negatives.rows() == 0 {
        return Err(Error::Config("empty negative set with a negatives-only denominator".into()));
    }
    let qn = tape.row_normalize(q);
    let kn = tape.row_normalize(k);
    let pos = tape.row_dot(qn, kn)?;
    let pos = tape.scale(pos, T::one() / tau);
    let lse = if negatives.rows() == 0 {
        pos
    } else {
        let negt = tape.constant(negatives.transpose());
        let neg = tape.matmul(qn, negt)?;
        let neg = tape.scale(neg, T::one() / tau);
        let logits = match denominator {
            Denominator::WithPositive => tape.concat_cols(pos, neg)?,
            Denominator::NegativesOnly => neg,
        };
        tape.logsumexp_rows(logits)
    };
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row))
}

/// InfoNCE with in-window negatives: row `i` of `q` is scored against every
/// row of `keys`, with `keys[positive[i]]` as its positive.
pub fn info_nce_in_window<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    keys: Var,
    positive: &Arc<[usize]>,
    tau: T,
    denominator: Denominator,
) -> Result<Var> {
    let (n, d) = tape.shape(q);
    let (m, dk) = tape.shape(keys);
    if d != dk || positive.len() != n {
        return Err(Error::dim("info_nce_in_window", (n, d), (m, dk)));
    }
    let qn = tape.row_normalize(q);
    let kn = tape.row_normalize(keys);
    let kt = tape.transpose(kn);
    let logits = tape.matmul(qn, kt)?;
    let logits = tape.scale(logits, T::one() / tau);
    let kp = tape.gather_rows(kn, positive)?;
    let pos = tape.row_dot(qn, kp)?;
    let pos = tape.scale(pos, T::one() / tau);
    let lse = match denominator {
        Denominator::WithPositive => tape.logsumexp_rows(logits),
        Denominator::NegativesOnly => {
            if m < 2 {
                return Err(Error::Config("no in-window negatives".into()));
            }
            // Push the positive column to -inf by subtracting a large mask.
            let mut mask = Matrix::zeros(n, m);
            for (i, &p) in positive.iter().enumerate() {
                mask.set(i, p, T::lit(-1e30));
            }
            let mask = tape.constant(mask);
            let masked = tape.add(logits, mask)?;
            tape.logsumexp_rows(masked)
        }
    };
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row))
}

/// Augmented-view loss: node `i`'s query embedding against the key embedding
/// of its masked view, negatives from the queue.
pub fn augmented_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    h_masked: Var,
    queue: &MoCoQueue<T>,
    tau: T,
    denominator: Denominator,
) -> Result<Var> {
    info_nce(tape, h, h_masked, &queue.to_matrix(), tau, denominator)
}

/// Multi-step loss: virtual-node query embeddings at `t` against the key
/// embeddings of their paired real nodes at `t + offset`.
pub fn multistep_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h_virtual: Var,
    h_real_paired: Var,
    queue: &MoCoQueue<T>,
    tau: T,
    denominator: Denominator,
) -> Result<Var> {
    info_nce(tape, h_virtual, h_real_paired, &queue.to_matrix(), tau, denominator)
}

/// `(1/|V_r|) Σ_i ‖ŷ_i − y_i‖²`.
pub fn supervised_mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Matrix<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim("supervised_mse", tape.shape(pred), target.shape()));
    }
    if !target.is_finite() {
        return Err(Error::Contract("non-finite supervised target".into()));
    }
    let y = tape.constant(target.clone());
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / T::lit(target.rows().max(1) as f64)))
}

/// `L_sup + λ·L_contrast`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, sup: Var, contrast: Option<Var>, lambda: T) -> Result<Var> {
    match contrast {
        Some(c) if lambda != T::zero() => {
            let c = tape.scale(c, lambda);
            tape.add(sup, c)
        }
        _ => Ok(sup),
    }
}

/// Mean cosine distances `1 − cos` of positive pairs and of query/negative
/// pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDistances {
    pub pos_dist: f64,
    pub neg_dist: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl PairDistances {
    pub fn merge(&mut self, other: &PairDistances) {
        let np = (self.n_pos + other.n_pos).max(1) as f64;
        let nn = (self.n_neg + other.n_neg).max(1) as f64;
        self.pos_dist = (self.pos_dist * self.n_pos as f64 + other.pos_dist * other.n_pos as f64) / np;
        self.neg_dist = (self.neg_dist * self.n_neg as f64 + other.neg_dist * other.n_neg as f64) / nn;
        self.n_pos += other.n_pos;
        self.n_neg += other.n_neg;
    }
}

/// Distances between rows of `q` and `k` (positives) and between every row
/// of `q` and every negative.
pub fn pair_distances<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, negatives: &Matrix<T>) -> PairDistances {
    let unit = |row: &[T]| -> Vec<f64> {
        let n = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt().max(crate::numerics::NORM_EPS);
        row.iter().map(|x| x.as_f64() / n).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let negs: Vec<Vec<f64>> = (0..negatives.rows()).map(|j| unit(negatives.row(j))).collect();
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..q.rows() {
        let qi = unit(q.row(i));
        pos += 1.0 - dot(&qi, &unit(k.row(i)));
        for nj in &negs {
            neg += 1.0 - dot(&qi, nj);
        }
    }
    let n_pos = q.rows();
    let n_neg = q.rows() * negs.len();
    PairDistances {
        pos_dist: if n_pos > 0 { pos / n_pos as f64 } else { 0.0 },
        neg_dist: if n_neg > 0 { neg / n_neg as f64 } else { 0.0 },
        n_pos,
        n_neg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_sim::<f64>(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn lambda_probe_points() {
        assert_eq!(lambda_value(0, 123.0), 0.0);
        assert!((lambda_value(10, 2.0) - 0.25).abs() < 1e-15);
        assert!((lambda_value(40, 3.0) - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let sup = tape.constant(Matrix::scalar(1.5));
        let c = tape.constant(Matrix::scalar(0.8));
        let t = total_loss(&mut tape, sup, Some(c), 0.25).unwrap();
        assert!((tape.value(t).item().unwrap() - 1.7).abs() < 1e-15);
        let t0 = total_loss(&mut tape, sup, Some(c), 0.0).unwrap();
        assert_eq!(tape.value(t0).item().unwrap(), 1.5);
    }

    #[test]
    fn queue_is_fifo_with_unit_rows() {
        let mut q = MoCoQueue::<f64>::new(2, 2);
        for row in [[3.0, 4.0], [0.0, 2.0], [1.0, 1.0]] {
            q.push(&Matrix::row_vector(row.to_vec())).unwrap();
        }
        let m = q.to_matrix();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(0), &[0.0, 1.0]);
        let r = 0.5f64.sqrt();
        assert!((m.get(1, 0) - r).abs() < 1e-15);
        for i in 0..2 {
            let n: f64 = m.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_queue_loss_is_zero() {
        let mut tape = Tape::new();
        let h = tape.variable(Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]).unwrap());
        let k = tape.constant(Matrix::from_rows(&[vec![0.1, 0.9], vec![-1.0, 0.2]]).unwrap());
        let q = MoCoQueue::new(4, 2);
        let l = augmented_loss(&mut tape, h, k, &q, 0.07, Denominator::WithPositive).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        assert!(augmented_loss(&mut tape, h, k, &q, 0.07, Denominator::NegativesOnly).is_err());
    }

    #[test]
    fn equal_negative_gives_log_two() {
        let mut tape = Tape::new();
        let h = tape.variable(Matrix::row_vector(vec![1.0, 0.0]));
        let k = tape.constant(Matrix::row_vector(vec![0.6, 0.8]));
        let mut q = MoCoQueue::new(4, 2);
        q.push(&Matrix::row_vector(vec![0.6, -0.8])).unwrap();
        let l = augmented_loss(&mut tape, h, k, &q, 0.07, Denominator::WithPositive).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_mse_examples() {
        let mut tape = Tape::new();
        let y = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let p = tape.variable(y.clone());
        let l = supervised_mse(&mut tape, p, &y).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let p = tape.variable(Matrix::scalar(3.0));
        let l = supervised_mse(&mut tape, p, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 4.0);
        let bad = Matrix::from_raw(1, 1, vec![f64::NAN]);
        assert!(matches!(supervised_mse(&mut tape, p, &bad), Err(Error::Contract(_))));
    }
}
