//! Per-node, per-step feature assembly and window cutting.
//!
//! Channel order of one node row: 26 meteorological channels, 4 geo
//! channels, 4 time channels, 4 lag channels, then the node-type embedding.
//! The first 34 channels change with the time step; lag and type are fixed
//! over a window (lag is the observation at the anchor step).

use std::ops::Range;

use chrono::{DateTime, Datelike, Timelike, Utc};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, DD, FF, GFF, MET_VARIABLES, N_MET};
use crate::error::{Error, Result};
use crate::geo_graph::{GeoPoint, NodeOrigin, NodeSet};
use crate::numerics::Matrix;

/// Distance floor (km) for inverse-distance weights.
pub const DISTANCE_FLOOR_KM: f64 = 1e-3;
/// Longest gap in the wind variables bridged by forward filling.
pub const MAX_FORWARD_FILL: usize = 3;
/// Encoded targets per lead: sin dd, cos dd, normalized ff, normalized gff.
pub const TARGETS_PER_LEAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureLayout {
    pub met_channels: usize,
    pub geo_channels: usize,
    pub time_channels: usize,
    pub lag_channels: usize,
    pub type_embed_dim: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            met_channels: N_MET,
            geo_channels: 4,
            time_channels: 4,
            lag_channels: TARGETS_PER_LEAD,
            type_embed_dim: 8,
            t_in: 36,
            t_out: 6,
        }
    }
}

impl FeatureLayout {
    pub fn validate(&self) -> Result<()> {
        let fixed = [
            ("met_channels", self.met_channels, N_MET),
            ("geo_channels", self.geo_channels, 4),
            ("time_channels", self.time_channels, 4),
            ("lag_channels", self.lag_channels, TARGETS_PER_LEAD),
        ];
        for (name, got, want) in fixed {
            if got != want {
                return Err(Error::Config(format!("{name} must be {want}, got {got}")));
            }
        }
        if self.type_embed_dim == 0 || self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("type_embed_dim, t_in and t_out must be positive".into()));
        }
        Ok(())
    }

    /// Channels that vary per step: met, geo, time.
    pub fn step_width(&self) -> usize {
        self.met_channels + self.geo_channels + self.time_channels
    }

    /// Channels fixed over a window: lag and type.
    pub fn static_width(&self) -> usize {
        self.lag_channels + self.type_embed_dim
    }

    pub fn width(&self) -> usize {
        self.step_width() + self.static_width()
    }

    pub fn n_targets(&self) -> usize {
        self.t_out * TARGETS_PER_LEAD
    }
}

pub fn geo_embed(p: &GeoPoint) -> [f64; 4] {
    let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
    [la.sin(), la.cos(), lo.sin(), lo.cos()]
}

/// Daily and annual phase as sin/cos pairs.
pub fn time_embed(t: DateTime<Utc>) -> [f64; 4] {
    let tod = t.num_seconds_from_midnight() as f64 / 86_400.0;
    let year_days = if chrono::NaiveDate::from_ymd_opt(t.year(), 2, 29).is_some() { 366.0 } else { 365.0 };
    let doy = (t.ordinal0() as f64 + tod) / year_days;
    let (a, b) = (std::f64::consts::TAU * tod, std::f64::consts::TAU * doy);
    [a.sin(), a.cos(), b.sin(), b.cos()]
}

/// Normalized inverse-distance weights (distances in km, floored).
pub fn idw_weights(distances: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d.max(DISTANCE_FLOOR_KM)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|w| w / total).collect()
}

/// Inverse-distance weighted mean of neighbour values per channel; missing
/// values drop out and the remaining weights are renormalized.
pub fn approx_virtual_met(neighbours: &[(f64, &[Option<f64>])]) -> Vec<Option<f64>> {
    let width = neighbours.first().map_or(0, |n| n.1.len());
    (0..width)
        .map(|c| {
            let (mut num, mut den) = (0.0, 0.0);
            for &(d, vals) in neighbours {
                if let Some(v) = vals[c] {
                    let w = 1.0 / d.max(DISTANCE_FLOOR_KM);
                    num += w * v;
                    den += w;
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    fn from_values(name: &str, values: &[f64]) -> Self {
        if values.is_empty() {
            debug!("channel {name} has no training values; using mean 0, std 1");
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 {
            Self { mean, std }
        } else {
            debug!("channel {name} has zero variance; using std 1");
            Self { mean, std: 1.0 }
        }
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// z-score statistics from training stations over the training period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub met: Vec<ChannelStats>,
    pub ff: ChannelStats,
    pub gff: ChannelStats,
    /// Sine and cosine of the observed direction; applied to the lag input
    /// only, targets keep the raw pair.
    pub dd_sin: ChannelStats,
    pub dd_cos: ChannelStats,
}

impl NormStats {
    pub fn compute(dataset: &Dataset, train_ids: &[String], period: Range<usize>) -> Result<Self> {
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); crate::datakit::N_VARIABLES];
        for id in train_ids {
            let s = dataset
                .station(id)
                .ok_or_else(|| Error::Data(format!("training station {id} not in dataset")))?;
            for t in period.clone() {
                for (v, col) in cols.iter_mut().enumerate() {
                    if let Some(x) = s.get(t, v) {
                        col.push(x);
                    }
                }
            }
        }
        let met = MET_VARIABLES
            .map(|v| ChannelStats::from_values(crate::datakit::VARIABLES[v], &cols[v]))
            .collect();
        let sin: Vec<f64> = cols[DD].iter().map(|d| d.to_radians().sin()).collect();
        let cos: Vec<f64> = cols[DD].iter().map(|d| d.to_radians().cos()).collect();
        let empty: Vec<&str> = MET_VARIABLES
            .filter(|&v| cols[v].is_empty())
            .map(|v| crate::datakit::VARIABLES[v])
            .collect();
        if !empty.is_empty() {
            warn!("{} channels have no training values and are left at zero: {}", empty.len(), empty.join(" "));
        }
        Ok(Self {
            met,
            ff: ChannelStats::from_values("ff", &cols[FF]),
            gff: ChannelStats::from_values("gff", &cols[GFF]),
            dd_sin: ChannelStats::from_values("sin dd", &sin),
            dd_cos: ChannelStats::from_values("cos dd", &cos),
        })
    }
}

/// `[sin dd, cos dd, ff_norm, gff_norm]`.
pub fn encode_targets(dd: f64, ff: f64, gff: f64, stats: &NormStats) -> [f64; 4] {
    let r = dd.to_radians();
    [r.sin(), r.cos(), stats.ff.normalize(ff), stats.gff.normalize(gff)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub dd: f64,
    pub ff: f64,
    pub gff: f64,
    /// Set when the direction pair was (0, 0) and `dd` is a placeholder.
    pub direction_undefined: bool,
}

pub fn decode_direction(s: f64, c: f64) -> (f64, bool) {
    if s == 0.0 && c == 0.0 {
        return (0.0, true);
    }
    let d = s.atan2(c).to_degrees().rem_euclid(360.0);
    (if d >= 360.0 { 0.0 } else { d }, false)
}

pub fn decode_targets(enc: &[f64], stats: &NormStats) -> Decoded {
    let (dd, direction_undefined) = decode_direction(enc[0], enc[1]);
    Decoded {
        dd,
        ff: stats.ff.denormalize(enc[2]).max(0.0),
        gff: stats.gff.denormalize(enc[3]).max(0.0),
        direction_undefined,
    }
}

/// Forward-fills one variable's series over gaps of at most `max_gap` steps.
pub fn forward_fill(values: &[Option<f64>], max_gap: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(values.len());
    let mut last: Option<(f64, usize)> = None;
    for (t, v) in values.iter().enumerate() {
        match v {
            Some(x) => {
                last = Some((*x, t));
                out.push(Some(*x));
            }
            None => out.push(match last {
                Some((x, t0)) if t - t0 <= max_gap => Some(x),
                _ => None,
            }),
        }
    }
    out
}

/// One training or evaluation example, identified by its anchor step `t`:
/// inputs cover `t + 1 - t_in ..= t`, labels `t + 1 ..= t + t_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub anchor: usize,
    pub anchor_time: DateTime<Utc>,
}

/// Precomputed normalized features of every node at every step.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub layout: FeatureLayout,
    pub start: DateTime<Utc>,
    n_steps: usize,
    n_nodes: usize,
    real_ids: Vec<usize>,
    /// `n_steps × n_nodes × step_width`.
    frames: Vec<f64>,
    /// `n_steps × |V_r| × 4`; NaN where the (forward-filled) wind is missing.
    wind: Vec<f64>,
    /// Steps flagged because a real node's wind came from forward filling.
    pub filled_steps: usize,
    lag_direction: [ChannelStats; 2],
}

impl FeatureStore {
    pub fn build(dataset: &Dataset, nodes: &NodeSet, stats: &NormStats, layout: FeatureLayout) -> Result<Self> {
        layout.validate()?;
        let n_steps = dataset.n_steps;
        let n_nodes = nodes.len();
        let width = layout.step_width();
        let real_ids = nodes.real_ids().to_vec();
        if real_ids.is_empty() {
            return Err(Error::Data("no real nodes".into()));
        }
        let station_of: Vec<usize> = real_ids
            .iter()
            .map(|&i| match &nodes.node(i).origin {
                NodeOrigin::Station(id) => dataset
                    .station_index(id)
                    .ok_or_else(|| Error::Data(format!("station {id} missing from dataset"))),
                _ => Err(Error::Contract("real node without station origin".into())),
            })
            .collect::<Result<_>>()?;

        // Raw met per real node and step.
        let met_raw = |r: usize, t: usize| -> Vec<Option<f64>> {
            let s = &dataset.stations[station_of[r]];
            MET_VARIABLES.map(|v| s.get(t, v)).collect()
        };
        let k = real_ids.len().min(3);
        let neighbours: Vec<Vec<(usize, f64)>> = (0..n_nodes)
            .map(|i| {
                if nodes.node(i).kind.is_real() {
                    Vec::new()
                } else {
                    nodes
                        .nearest_real(&nodes.node(i).location, k, None)
                        .into_iter()
                        .map(|(id, d)| (real_ids.binary_search(&id).expect("real id"), d))
                        .collect()
                }
            })
            .collect();
        let real_pos: Vec<Option<usize>> = (0..n_nodes).map(|i| real_ids.binary_search(&i).ok()).collect();
        let geo: Vec<[f64; 4]> = nodes.nodes().iter().map(|n| geo_embed(&n.location)).collect();

        let mut frames = vec![0.0; n_steps * n_nodes * width];
        let mut real_met: Vec<Vec<Option<f64>>> = Vec::with_capacity(real_ids.len());
        for t in 0..n_steps {
            real_met.clear();
            real_met.extend((0..real_ids.len()).map(|r| met_raw(r, t)));
            let te = time_embed(dataset.timestamp(t));
            for i in 0..n_nodes {
                let row = &mut frames[(t * n_nodes + i) * width..(t * n_nodes + i + 1) * width];
                let met = match real_pos[i] {
                    Some(r) => real_met[r].clone(),
                    None => {
                        let nb: Vec<(f64, &[Option<f64>])> =
                            neighbours[i].iter().map(|&(r, d)| (d, real_met[r].as_slice())).collect();
                        approx_virtual_met(&nb)
                    }
                };
                for (c, v) in met.iter().enumerate() {
                    row[c] = v.map_or(0.0, |x| stats.met[c].normalize(x));
                }
                row[N_MET..N_MET + 4].copy_from_slice(&geo[i]);
                row[N_MET + 4..N_MET + 8].copy_from_slice(&te);
            }
        }

        let nr = real_ids.len();
        let mut wind = vec![f64::NAN; n_steps * nr * TARGETS_PER_LEAD];
        let mut filled_steps = 0;
        for (r, &si) in station_of.iter().enumerate() {
            let s = &dataset.stations[si];
            let series = |v: usize| -> Vec<Option<f64>> { (0..n_steps).map(|t| s.get(t, v)).collect() };
            let raw = [series(DD), series(FF), series(GFF)];
            let filled: Vec<Vec<Option<f64>>> = raw.iter().map(|x| forward_fill(x, MAX_FORWARD_FILL)).collect();
            for t in 0..n_steps {
                if let (Some(dd), Some(ff), Some(gff)) = (filled[0][t], filled[1][t], filled[2][t]) {
                    if raw.iter().any(|x| x[t].is_none()) {
                        filled_steps += 1;
                    }
                    let e = encode_targets(dd, ff, gff, stats);
                    wind[(t * nr + r) * 4..(t * nr + r + 1) * 4].copy_from_slice(&e);
                }
            }
        }
        if filled_steps > 0 {
            warn!("{filled_steps} station-steps of wind were forward-filled");
        }
        Ok(Self {
            layout,
            start: dataset.start,
            n_steps,
            n_nodes,
            real_ids,
            frames,
            wind,
            filled_steps,
            lag_direction: [stats.dd_sin.clone(), stats.dd_cos.clone()],
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.real_ids
    }

    /// `n_nodes × step_width` features at step `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.n_nodes * self.layout.step_width();
        &self.frames[t * w..(t + 1) * w]
    }

    /// Encoded wind `[sin, cos, ff_norm, gff_norm]` of real node index `r`.
    pub fn wind(&self, t: usize, r: usize) -> Option<&[f64]> {
        let nr = self.real_ids.len();
        let w = &self.wind[(t * nr + r) * 4..(t * nr + r + 1) * 4];
        (!w[0].is_nan()).then_some(w)
    }

    fn wind_complete(&self, t: usize) -> bool {
        (0..self.real_ids.len()).all(|r| self.wind(t, r).is_some())
    }

    /// Lag channels of every node at `t`, all four z-scored; virtual rows
    /// are zero.
    pub fn lag_matrix(&self, t: usize) -> Result<Matrix<f64>> {
        let mut m = Matrix::zeros(self.n_nodes, TARGETS_PER_LEAD);
        for (r, &i) in self.real_ids.iter().enumerate() {
            let w = self
                .wind(t, r)
                .ok_or_else(|| Error::Contract(format!("no lag for real node {i} at step {t}")))?;
            let row = m.row_mut(i);
            row.copy_from_slice(w);
            row[0] = self.lag_direction[0].normalize(w[0]);
            row[1] = self.lag_direction[1].normalize(w[1]);
        }
        Ok(m)
    }

    /// `|V_r| × (t_out·4)` labels for the window anchored at `t`.
    pub fn targets(&self, t: usize) -> Result<Matrix<f64>> {
        let (nr, t_out) = (self.real_ids.len(), self.layout.t_out);
        let mut m = Matrix::zeros(nr, t_out * TARGETS_PER_LEAD);
        for l in 0..t_out {
            for r in 0..nr {
                let w = self
                    .wind(t + 1 + l, r)
                    .ok_or_else(|| Error::Contract(format!("missing label at step {}", t + 1 + l)))?;
                m.row_mut(r)[l * 4..(l + 1) * 4].copy_from_slice(w);
            }
        }
        Ok(m)
    }

    /// Whether the window anchored at `t` has complete wind at every real
    /// node over inputs and, when `with_labels`, labels.
    pub fn window_valid(&self, t: usize, with_labels: bool) -> bool {
        let (t_in, t_out) = (self.layout.t_in, self.layout.t_out);
        if t + 1 < t_in || t >= self.n_steps {
            return false;
        }
        let end = if with_labels { t + t_out } else { t };
        end < self.n_steps && (t + 1 - t_in..=end).all(|s| self.wind_complete(s))
    }

    pub fn sample(&self, t: usize) -> WindowSample {
        WindowSample {
            anchor: t,
            anchor_time: self.start + chrono::Duration::seconds(crate::datakit::STEP_SECONDS * t as i64),
        }
    }
}

/// Anchors of all windows whose inputs and labels lie inside `period`, at
/// the given stride, skipping windows that cross gaps.
pub fn make_windows(store: &FeatureStore, period: Range<usize>, stride: usize) -> Vec<WindowSample> {
    let (t_in, t_out) = (store.layout.t_in, store.layout.t_out);
    let period = period.start..period.end.min(store.n_steps());
    if period.len() < t_in + t_out {
        warn!("period of {} steps is shorter than one window", period.len());
        return Vec::new();
    }
    let first = period.start + t_in - 1;
    let last = period.end - 1 - t_out;
    (first..=last)
        .step_by(stride.max(1))
        .filter(|&t| store.window_valid(t, true))
        .map(|t| store.sample(t))
        .collect()
}
