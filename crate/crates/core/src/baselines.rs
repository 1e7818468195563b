//! Comparison methods: inverse distance weighting, k-nearest-neighbour
//! averaging, and two ridge-regularized linear forecasters over the
//! neighbours' recent history.
//!
//! Linear stencils read, per neighbour and lag, the encoded wind
//! `[sin dd, cos dd, ff_norm, gff_norm]`. AR keeps only the target
//! variable's channels (two for direction); LR keeps all four.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, DD, FF, GFF};
use crate::error::{Error, Result};
use crate::features::{decode_targets, encode_targets, forward_fill, idw_weights, Decoded, NormStats, MAX_FORWARD_FILL};
use crate::geo_graph::GeoPoint;
use crate::metrics::Variable;
use crate::numerics::{
    linalg::{cholesky, cholesky_solve},
    Matrix,
};

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Weighted vector mean of directions (degrees), mapped to `[0, 360)`.
pub fn vector_mean_direction(dirs: &[f64], weights: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (d, w) in dirs.iter().zip(weights) {
        let r = d.to_radians();
        s += w * r.sin();
        c += w * r.cos();
    }
    crate::features::decode_direction(s, c).0
}

/// One neighbour's simultaneous observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighbourObs {
    pub distance_km: f64,
    pub dd: f64,
    pub ff: f64,
    pub gff: f64,
}

fn combine(obs: &[NeighbourObs], k: usize, weights: impl Fn(&[NeighbourObs]) -> Vec<f64>) -> Result<(f64, f64, f64)> {
    if obs.len() < k || k == 0 {
        return Err(Error::Data(format!("need {k} neighbours, have {}", obs.len())));
    }
    let used = &obs[..k];
    let w = weights(used);
    let dirs: Vec<f64> = used.iter().map(|o| o.dd).collect();
    let ff = used.iter().zip(&w).map(|(o, w)| w * o.ff).sum();
    let gff = used.iter().zip(&w).map(|(o, w)| w * o.gff).sum();
    Ok((vector_mean_direction(&dirs, &w), ff, gff))
}

/// Inverse-distance weighted `(dd, ff, gff)` from the first `k` neighbours.
pub fn idw_predict(obs: &[NeighbourObs], k: usize) -> Result<(f64, f64, f64)> {
    combine(obs, k, |u| idw_weights(&u.iter().map(|o| o.distance_km).collect::<Vec<_>>()))
}

/// Unweighted mean of the first `k` neighbours.
pub fn knn_predict(obs: &[NeighbourObs], k: usize) -> Result<(f64, f64, f64)> {
    combine(obs, k, |u| vec![1.0 / u.len() as f64; u.len()])
}

/// The `k` nearest candidates to `target` (ties by lower index), excluding
/// `target` itself when it is a candidate.
pub fn nearest(sites: &[GeoPoint], target: GeoPoint, candidates: &[usize], exclude: Option<usize>, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = candidates
        .iter()
        .filter(|&&c| Some(c) != exclude)
        .map(|&c| (c, target.haversine_km(&sites[c])))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Encoded, forward-filled wind of every station, plus raw observations.
#[derive(Clone, Debug)]
pub struct StationWind {
    pub n_steps: usize,
    /// `[station][t]` encoded wind; NaN where unavailable.
    pub encoded: Vec<Vec<[f64; 4]>>,
    /// `[station][t]` filled `(dd, ff, gff)`; NaN where unavailable.
    pub filled: Vec<Vec<[f64; 3]>>,
}

impl StationWind {
    pub fn build(dataset: &Dataset, stats: &NormStats) -> Self {
        let n = dataset.n_steps;
        let mut encoded = Vec::with_capacity(dataset.stations.len());
        let mut filled = Vec::with_capacity(dataset.stations.len());
        for s in &dataset.stations {
            let f: Vec<Vec<Option<f64>>> = [DD, FF, GFF]
                .iter()
                .map(|&v| forward_fill(&(0..n).map(|t| s.get(t, v)).collect::<Vec<_>>(), MAX_FORWARD_FILL))
                .collect();
            let mut enc = vec![[f64::NAN; 4]; n];
            let mut fil = vec![[f64::NAN; 3]; n];
            for t in 0..n {
                if let (Some(dd), Some(ff), Some(gff)) = (f[0][t], f[1][t], f[2][t]) {
                    enc[t] = encode_targets(dd, ff, gff, stats);
                    fil[t] = [dd, ff, gff];
                }
            }
            encoded.push(enc);
            filled.push(fil);
        }
        Self { n_steps: n, encoded, filled }
    }

    /// Flattened `[neighbour][lag][channel]` stencil ending at `anchor`.
    pub fn stencil(&self, neighbours: &[usize], anchor: usize, t_in: usize) -> Option<Vec<f64>> {
        if anchor + 1 < t_in || anchor >= self.n_steps {
            return None;
        }
        let mut x = Vec::with_capacity(neighbours.len() * t_in * 4);
        for &s in neighbours {
            for t in anchor + 1 - t_in..=anchor {
                let e = &self.encoded[s][t];
                if e[0].is_nan() {
                    return None;
                }
                x.extend_from_slice(e);
            }
        }
        Some(x)
    }

    /// Encoded targets of `station` for leads `1..=t_out` after `anchor`.
    pub fn targets(&self, station: usize, anchor: usize, t_out: usize) -> Option<Vec<f64>> {
        if anchor + t_out >= self.n_steps {
            return None;
        }
        let mut y = Vec::with_capacity(t_out * 4);
        for t in anchor + 1..=anchor + t_out {
            let e = &self.encoded[station][t];
            if e[0].is_nan() {
                return None;
            }
            y.extend_from_slice(e);
        }
        Some(y)
    }

    /// Neighbour observations at `t` in the given order, or `None` if any is
    /// missing.
    pub fn observations(&self, neighbours: &[(usize, f64)], t: usize) -> Option<Vec<NeighbourObs>> {
        neighbours
            .iter()
            .map(|&(s, d)| {
                let f = self.filled[s][t];
                (!f[0].is_nan()).then_some(NeighbourObs { distance_km: d, dd: f[0], ff: f[1], gff: f[2] })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Ar,
    Lr,
}

/// Centered ridge regression `(XᵀX + λI)β = Xᵀy` with an unpenalized
/// intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// Stencil channels (of 4) used as inputs.
    pub input_channels: Vec<usize>,
    /// Target channels (of 4) predicted per lead.
    pub output_channels: Vec<usize>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// `p × q` coefficients.
    pub beta: Matrix<f64>,
    pub ridge: f64,
}

/// Streaming sufficient statistics for a ridge fit.
struct RidgeAccumulator {
    p: usize,
    q: usize,
    n: usize,
    sx: Vec<f64>,
    sy: Vec<f64>,
    xx: Matrix<f64>,
    xy: Matrix<f64>,
    bx: Vec<f64>,
    by: Vec<f64>,
}

const BLOCK: usize = 256;

impl RidgeAccumulator {
    fn new(p: usize, q: usize) -> Self {
        Self {
            p,
            q,
            n: 0,
            sx: vec![0.0; p],
            sy: vec![0.0; q],
            xx: Matrix::zeros(p, p),
            xy: Matrix::zeros(p, q),
            bx: Vec::with_capacity(BLOCK * p),
            by: Vec::with_capacity(BLOCK * q),
        }
    }

    fn push(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        self.bx.extend_from_slice(x);
        self.by.extend_from_slice(y);
        if self.bx.len() == BLOCK * self.p {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let rows = self.bx.len() / self.p;
        if rows == 0 {
            return Ok(());
        }
        let x = Matrix::from_vec(rows, self.p, std::mem::take(&mut self.bx))?;
        let y = Matrix::from_vec(rows, self.q, std::mem::take(&mut self.by))?;
        self.xx.axpy(1.0, &x.t_matmul(&x)?)?;
        self.xy.axpy(1.0, &x.t_matmul(&y)?)?;
        for r in 0..rows {
            for (s, v) in self.sx.iter_mut().zip(x.row(r)) {
                *s += v;
            }
            for (s, v) in self.sy.iter_mut().zip(y.row(r)) {
                *s += v;
            }
        }
        self.n += rows;
        self.bx = Vec::with_capacity(BLOCK * self.p);
        self.by = Vec::with_capacity(BLOCK * self.q);
        Ok(())
    }

    /// Centered Gram `XcᵀXc` and cross-product `XcᵀYc`.
    fn centered(mut self) -> Result<(Matrix<f64>, Matrix<f64>, Vec<f64>, Vec<f64>)> {
        self.flush()?;
        if self.n == 0 {
            return Err(Error::Data("no training pairs for the linear baseline".into()));
        }
        let n = self.n as f64;
        let xm: Vec<f64> = self.sx.iter().map(|s| s / n).collect();
        let ym: Vec<f64> = self.sy.iter().map(|s| s / n).collect();
        let mut g = self.xx;
        for i in 0..self.p {
            for j in 0..self.p {
                let v = g.get(i, j) - n * xm[i] * xm[j];
                g.set(i, j, v);
            }
        }
        let mut c = self.xy;
        for i in 0..self.p {
            for j in 0..self.q {
                let v = c.get(i, j) - n * xm[i] * ym[j];
                c.set(i, j, v);
            }
        }
        Ok((g, c, xm, ym))
    }
}

impl RidgeModel {
    fn solve(gram: &Matrix<f64>, cross: &Matrix<f64>, ridge: f64) -> Result<Matrix<f64>> {
        let mut a = gram.clone();
        for i in 0..a.rows() {
            let v = a.get(i, i) + ridge;
            a.set(i, i, v);
        }
        let l = cholesky(&a)?;
        cholesky_solve(&l, cross)
    }

    fn select(&self, stencil: &[f64]) -> Vec<f64> {
        stencil
            .chunks(4)
            .flat_map(|c| self.input_channels.iter().map(move |&k| c[k]))
            .collect()
    }

    /// Predicted target channels, `t_out × output_channels` flattened.
    pub fn predict(&self, stencil: &[f64]) -> Vec<f64> {
        let x = self.select(stencil);
        let q = self.y_mean.len();
        let mut y = self.y_mean.clone();
        for (i, (xv, m)) in x.iter().zip(&self.x_mean).enumerate() {
            let d = xv - m;
            if d != 0.0 {
                for (yj, b) in y.iter_mut().zip(self.beta.row(i)) {
                    *yj += d * b;
                }
            }
        }
        debug_assert_eq!(y.len(), q);
        y
    }
}

/// AR or LR forecaster for all three variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub kind: LinearKind,
    pub k: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub models: Vec<RidgeModel>,
    pub n_pairs: usize,
}

/// Training pairs: each training station in turn stands in as the target,
/// with its `k` nearest other training stations as inputs.
pub struct FitData<'a> {
    pub wind: &'a StationWind,
    pub sites: &'a [GeoPoint],
    pub train: &'a [usize],
    pub period: Range<usize>,
    pub stride: usize,
}

impl LinearBaseline {
    fn layout(kind: LinearKind) -> Vec<(Vec<usize>, Vec<usize>)> {
        match kind {
            LinearKind::Ar => vec![(vec![0, 1], vec![0, 1]), (vec![2], vec![2]), (vec![3], vec![3])],
            LinearKind::Lr => vec![(vec![0, 1, 2, 3], vec![0, 1, 2, 3])],
        }
    }

    pub fn fit(kind: LinearKind, data: &FitData<'_>, k: usize, t_in: usize, t_out: usize, ridge: f64) -> Result<Self> {
        if ridge < 0.0 {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        let specs = Self::layout(kind);
        let mut accs: Vec<RidgeAccumulator> = specs
            .iter()
            .map(|(i, o)| RidgeAccumulator::new(k * t_in * i.len(), t_out * o.len()))
            .collect();
        let mut n_pairs = 0;
        for &s in data.train {
            let nb: Vec<usize> = nearest(data.sites, data.sites[s], data.train, Some(s), k)
                .into_iter()
                .map(|(i, _)| i)
                .collect();
            if nb.len() < k {
                return Err(Error::Data(format!("station {s} has fewer than {k} training neighbours")));
            }
            let first = data.period.start + t_in - 1;
            let end = data.period.end.min(data.wind.n_steps);
            for t in (first..end.saturating_sub(t_out)).step_by(data.stride.max(1)) {
                let (Some(x), Some(y)) = (data.wind.stencil(&nb, t, t_in), data.wind.targets(s, t, t_out)) else {
                    continue;
                };
                for ((ic, oc), acc) in specs.iter().zip(accs.iter_mut()) {
                    let xs: Vec<f64> = x.chunks(4).flat_map(|c| ic.iter().map(move |&j| c[j])).collect();
                    let ys: Vec<f64> = y.chunks(4).flat_map(|c| oc.iter().map(move |&j| c[j])).collect();
                    acc.push(&xs, &ys)?;
                }
                n_pairs += 1;
            }
        }
        let mut models = Vec::with_capacity(specs.len());
        for ((ic, oc), acc) in specs.into_iter().zip(accs) {
            let (g, c, xm, ym) = acc.centered()?;
            let beta = RidgeModel::solve(&g, &c, ridge)?;
            models.push(RidgeModel { input_channels: ic, output_channels: oc, x_mean: xm, y_mean: ym, beta, ridge });
        }
        Ok(Self { kind, k, t_in, t_out, models, n_pairs })
    }

    /// Decoded `(dd, ff, gff)` per lead from a full 4-channel stencil.
    pub fn predict(&self, stencil: &[f64], stats: &NormStats) -> Vec<Decoded> {
        let mut enc = vec![0.0; self.t_out * 4];
        for m in &self.models {
            let y = m.predict(stencil);
            let w = m.output_channels.len();
            for l in 0..self.t_out {
                for (j, &c) in m.output_channels.iter().enumerate() {
                    enc[l * 4 + c] = y[l * w + j];
                }
            }
        }
        enc.chunks(4).map(|e| decode_targets(e, stats)).collect()
    }
}

/// Residual norm of the ridge normal equations, for verification.
pub fn normal_equation_residual(x: &Matrix<f64>, y: &Matrix<f64>, beta: &Matrix<f64>, ridge: f64) -> Result<f64> {
    let mut lhs = x.t_matmul(x)?.matmul(beta)?;
    lhs.axpy(ridge, beta)?;
    let rhs = x.t_matmul(y)?;
    Ok(lhs.zip_map(&rhs, "residual", |a, b| a - b)?.max_abs())
}

/// Ridge fit on explicit matrices (no centering), used by tests and tools.
pub fn ridge_fit(x: &Matrix<f64>, y: &Matrix<f64>, ridge: f64) -> Result<Matrix<f64>> {
    RidgeModel::solve(&x.t_matmul(x)?, &x.t_matmul(y)?, ridge)
}

/// Maps a variable to its slot in a decoded triple.
pub fn pick(d: &Decoded, v: Variable) -> f64 {
    match v {
        Variable::Direction => d.dd,
        Variable::Speed => d.ff,
        Variable::Gust => d.gff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(d: f64, dd: f64, ff: f64) -> NeighbourObs {
        NeighbourObs { distance_km: d, dd, ff, gff: ff + 1.0 }
    }

    #[test]
    fn idw_and_knn_examples() {
        let eq = [obs(2.0, 0.0, 2.0), obs(2.0, 0.0, 4.0), obs(2.0, 0.0, 6.0)];
        assert!((idw_predict(&eq, 3).unwrap().1 - 4.0).abs() < 1e-12);
        let w = [obs(1.0, 0.0, 4.0), obs(2.0, 0.0, 1.0), obs(2.0, 0.0, 1.0)];
        assert!((idw_predict(&w, 3).unwrap().1 - 2.5).abs() < 1e-12);
        let seam = [obs(1.0, 350.0, 1.0), obs(1.0, 10.0, 1.0)];
        let d = idw_predict(&seam, 2).unwrap().0;
        assert!(d.min(360.0 - d) < 1e-9);
        let k = [obs(1.0, 90.0, 1.0), obs(5.0, 90.0, 2.0), obs(9.0, 270.0, 3.0)];
        let (dd, ff, _) = knn_predict(&k, 3).unwrap();
        assert!((ff - 2.0).abs() < 1e-12);
        assert!((dd - 90.0).abs() < 1e-9);
        assert!(idw_predict(&k[..2], 3).is_err());
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![2.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![2.0], vec![-0.5]]).unwrap();
        let b = ridge_fit(&x, &y, 1e-3).unwrap();
        assert!(normal_equation_residual(&x, &y, &b, 1e-3).unwrap() < 1e-8);
    }

    #[test]
    fn zero_variance_column_gets_zero_coefficient() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        let b = ridge_fit(&x, &y, 1e-3).unwrap();
        assert_eq!(b.get(1, 0), 0.0);
    }
}
