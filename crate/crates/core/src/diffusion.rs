//! Personalized-PageRank diffusion over the base graph, type-aware edge
//! reweighting and per-row top-k sparsification.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_graph::{Adjacency, NodeKind};
use crate::numerics::linalg::{condition_inf, Lu};
use crate::numerics::{Matrix, SparseMatrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionParams {
    /// Teleport (restart) probability of the random walk.
    pub alpha_ppr: f64,
    /// Multiplier for real↔virtual entries.
    pub gamma: f64,
    /// Multiplier for virtual↔virtual entries.
    pub delta: f64,
    pub top_k: usize,
    /// Rescale kept entries of each row to sum to one.
    pub renormalize: bool,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            alpha_ppr: 0.15,
            gamma: 3.0,
            delta: 0.3,
            top_k: 8,
            renormalize: true,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_ppr > 0.0 && self.alpha_ppr < 1.0) {
            return Err(Error::Config(format!("alpha_ppr must lie in (0, 1), got {}", self.alpha_ppr)));
        }
        if !(self.gamma > 0.0 && self.delta > 0.0) {
            return Err(Error::Config("gamma and delta must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `T = D̂⁻¹(A + I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix<T> {
    pub t: Matrix<T>,
}

pub fn transition<T: Scalar>(adj: &Adjacency) -> TransitionMatrix<T> {
    let n = adj.n();
    let mut t = Matrix::zeros(n, n);
    for i in 0..n {
        let row = adj.weights.row(i);
        let deg: f64 = row.iter().sum::<f64>() + 1.0;
        for (j, &w) in row.iter().enumerate() {
            let a_hat = if i == j { w + 1.0 } else { w };
            t.set(i, j, T::lit(a_hat / deg));
        }
    }
    TransitionMatrix { t }
}

/// Dense PPR kernel `α (I − (1−α) T)⁻¹`.
pub fn ppr<T: Scalar>(t: &TransitionMatrix<T>, alpha: T) -> Result<Matrix<T>> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::Config(format!("alpha_ppr must lie in (0, 1), got {alpha}")));
    }
    let n = t.t.rows();
    let mut system = t.t.map(|v| -(T::one() - alpha) * v);
    for i in 0..n {
        let v = system.get(i, i) + T::one();
        system.set(i, i, v);
    }
    let lu = Lu::factor(&system).map_err(|e| {
        Error::Numerical(format!("PPR system could not be factored ({e})"))
    })?;
    let inv = lu.inverse()?;
    let cond = condition_inf(&system, &inv);
    if !cond.is_finite() || cond.as_f64() > 1e12 {
        return Err(Error::Numerical(format!("PPR system is ill-conditioned (cond ≈ {cond})")));
    }
    let mut d = inv;
    d.scale_in_place(alpha);
    Ok(d)
}

/// Type multiplier for a `(row, column)` pair.
pub fn type_weight(a: NodeKind, b: NodeKind, gamma: f64, delta: f64) -> f64 {
    match (a, b) {
        (NodeKind::Real, NodeKind::Real) => 1.0,
        (NodeKind::Virtual, NodeKind::Virtual) => delta,
        _ => gamma,
    }
}

/// `d̃_ij = w_ij · d_ij`.
pub fn reweight<T: Scalar>(d: &Matrix<T>, kinds: &[NodeKind], gamma: f64, delta: f64) -> Result<Matrix<T>> {
    let n = kinds.len();
    if d.shape() != (n, n) {
        return Err(Error::dim("reweight", d.shape(), (n, n)));
    }
    let mut out = d.clone();
    for i in 0..n {
        for j in 0..n {
            let w = T::lit(type_weight(kinds[i], kinds[j], gamma, delta));
            out.set(i, j, d.get(i, j) * w);
        }
    }
    Ok(out)
}

/// Diffusion operator applied by every GCN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SparseDiffusionMatrix<T> {
    pub matrix: SparseMatrix<T>,
    pub normalized: bool,
}

impl<T: Scalar> SparseDiffusionMatrix<T> {
    pub fn n(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn max_row_entries(&self) -> usize {
        self.matrix.iter_rows().map(<[_]>::len).max().unwrap_or(0)
    }

    pub fn cast<U: Scalar>(&self) -> SparseDiffusionMatrix<U> {
        let rows = self
            .matrix
            .iter_rows()
            .map(|r| r.iter().map(|&(c, w)| (c, U::lit(w.as_f64()))).collect())
            .collect();
        SparseDiffusionMatrix {
            matrix: SparseMatrix::new(self.matrix.n_cols(), rows).expect("cast keeps shape"),
            normalized: self.normalized,
        }
    }

    /// Edge list `src,dst,weight,src_kind,dst_kind`; `src` is the row node
    /// (the receiver) and `dst` the column node it aggregates from.
    pub fn write_csv<W: Write>(&self, w: W, kinds: &[NodeKind]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["src", "dst", "weight", "src_kind", "dst_kind"])?;
        for (i, row) in self.matrix.iter_rows().enumerate() {
            for &(j, v) in row {
                out.write_record([
                    i.to_string(),
                    j.to_string(),
                    v.as_f64().to_string(),
                    kinds[i].to_string(),
                    kinds[j].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Keeps the `k` largest entries of every row (ties by lower column).
pub fn sparsify_topk<T: Scalar>(d: &Matrix<T>, k: usize, renormalize: bool) -> Result<SparseDiffusionMatrix<T>> {
    if k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(d.rows());
    for i in 0..d.rows() {
        let mut entries: Vec<(usize, T)> = d
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > T::zero())
            .map(|(j, &v)| (j, v))
            .collect();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        entries.truncate(k);
        if renormalize {
            let s: T = entries.iter().map(|e| e.1).sum();
            if s > T::zero() {
                for e in &mut entries {
                    e.1 /= s;
                }
            }
        }
        rows.push(entries);
    }
    Ok(SparseDiffusionMatrix {
        matrix: SparseMatrix::new(d.cols(), rows)?,
        normalized: renormalize,
    })
}

/// Full construction: transition, PPR, reweighting, top-k.
pub fn build_diffusion<T: Scalar>(
    adj: &Adjacency,
    kinds: &[NodeKind],
    params: &DiffusionParams,
) -> Result<SparseDiffusionMatrix<T>> {
    params.validate()?;
    let t = transition::<T>(adj);
    let d = ppr(&t, T::lit(params.alpha_ppr))?;
    let d = reweight(&d, kinds, params.gamma, params.delta)?;
    sparsify_topk(&d, params.top_k, params.renormalize)
}

/// Propagation operator without diffusion: the row-normalized base graph
/// with self-loops, i.e. a plain GCN neighbourhood.
pub fn plain_operator<T: Scalar>(adj: &Adjacency) -> SparseDiffusionMatrix<T> {
    let t = transition::<T>(adj);
    SparseDiffusionMatrix {
        matrix: SparseMatrix::from_dense(&t.t),
        normalized: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub node: usize,
    pub real_fraction: f64,
    pub top1_real_share: f64,
    pub count_real_sources: usize,
    /// Set when the row had no entries.
    pub empty: bool,
}

/// How much of each virtual node's incoming weight comes from real nodes.
pub fn influence_stats<T: Scalar>(s: &SparseDiffusionMatrix<T>, kinds: &[NodeKind]) -> Vec<InfluenceRecord> {
    (0..s.n())
        .filter(|&i| !kinds[i].is_real())
        .map(|i| {
            let row = s.matrix.row(i);
            let real: Vec<f64> = row
                .iter()
                .filter(|(j, w)| kinds[*j].is_real() && *w > T::zero())
                .map(|&(_, w)| w.as_f64())
                .collect();
            let total: f64 = row.iter().map(|&(_, w)| w.as_f64()).sum();
            let (real_fraction, top1) = if s.normalized || total <= 0.0 {
                (real.iter().sum(), real.iter().copied().fold(0.0, f64::max))
            } else {
                (
                    real.iter().sum::<f64>() / total,
                    real.iter().copied().fold(0.0, f64::max) / total,
                )
            };
            InfluenceRecord {
                node: i,
                real_fraction,
                top1_real_share: top1,
                count_real_sources: real.len(),
                empty: row.is_empty(),
            }
        })
        .collect()
}

pub fn write_influence_csv<W: Write>(records: &[InfluenceRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["node", "real_fraction", "top1_real_share", "count_real_sources", "empty"])?;
    for r in records {
        out.write_record([
            r.node.to_string(),
            r.real_fraction.to_string(),
            r.top1_real_share.to_string(),
            r.count_real_sources.to_string(),
            r.empty.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use NodeKind::{Real, Virtual};

    fn adj(rows: &[Vec<f64>]) -> Adjacency {
        Adjacency { weights: Matrix::from_rows(rows).unwrap() }
    }

    #[test]
    fn isolated_node_transition() {
        let t = transition::<f64>(&adj(&[vec![0.0]]));
        assert_eq!(t.t.as_slice(), &[1.0]);
    }

    #[test]
    fn two_node_transition() {
        let t = transition::<f64>(&adj(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        assert_eq!(t.t.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn single_node_ppr_is_one() {
        let t = transition::<f64>(&adj(&[vec![0.0]]));
        for alpha in [0.05, 0.15, 0.9] {
            let d = ppr(&t, alpha).unwrap();
            assert!((d.get(0, 0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn teleport_dominated_limit() {
        let a = adj(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let d = ppr(&transition::<f64>(&a), 0.999).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(d.get(i, j) < 1e-2);
                }
            }
        }
    }

    #[test]
    fn alpha_outside_open_interval() {
        let t = transition::<f64>(&adj(&[vec![0.0]]));
        assert!(ppr(&t, 0.0).is_err());
        assert!(ppr(&t, 1.0).is_err());
    }

    #[test]
    fn reweight_examples() {
        let d = Matrix::<f64>::filled(2, 2, 0.2);
        let r = reweight(&d, &[Real, Real], 3.0, 0.3).unwrap();
        assert_eq!(r.get(0, 1), 0.2);
        let r = reweight(&d, &[Real, Virtual], 3.0, 0.3).unwrap();
        assert!((r.get(0, 1) - 0.6).abs() < 1e-15);
        assert!((r.get(1, 0) - 0.6).abs() < 1e-15);
        let r = reweight(&d, &[Virtual, Virtual], 3.0, 0.3).unwrap();
        assert!((r.get(0, 1) - 0.06).abs() < 1e-15);
    }

    #[test]
    fn topk_keeps_largest_and_renormalizes() {
        let d = Matrix::<f64>::row_vector(vec![0.5, 0.3, 0.1, 0.1]);
        let s = sparsify_topk(&d, 2, true).unwrap();
        let row = s.matrix.row(0);
        assert_eq!(row.len(), 2);
        assert_eq!(row[0].0, 0);
        assert_eq!(row[1].0, 1);
        assert!((row[0].1 - 0.625).abs() < 1e-15);
        assert!((row[1].1 - 0.375).abs() < 1e-15);
    }

    #[test]
    fn topk_tie_prefers_lower_column() {
        let d = Matrix::row_vector(vec![0.1, 0.5, 0.1, 0.3]);
        let s = sparsify_topk(&d, 3, false).unwrap();
        let cols: Vec<_> = s.matrix.row(0).iter().map(|e| e.0).collect();
        assert_eq!(cols, vec![0, 1, 3]);
    }

    #[test]
    fn topk_larger_than_row_keeps_everything() {
        let d = Matrix::row_vector(vec![0.2, 0.2, 0.6]);
        let s = sparsify_topk(&d, 10, false).unwrap();
        assert_eq!(s.matrix.to_dense(), d);
    }

    #[test]
    fn influence_examples() {
        let s = SparseDiffusionMatrix {
            matrix: SparseMatrix::new(3, vec![vec![(0, 1.0)], vec![(0, 0.25), (2, 0.75)], vec![]]).unwrap(),
            normalized: true,
        };
        let stats = influence_stats(&s, &[Real, Virtual, Virtual]);
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].real_fraction, 0.25);
        assert_eq!(stats[0].top1_real_share, 0.25);
        assert_eq!(stats[0].count_real_sources, 1);
        assert!(stats[1].empty);
        assert_eq!(stats[1].real_fraction, 0.0);
    }
}
