//! Desk-scale synthetic wind fields with a known generating process.
//!
//! Speed is a location-dependent climatology plus a diurnal cycle plus a
//! spatially correlated AR(1) anomaly. Direction is a slow sinusoidal drift
//! plus a second correlated AR(1) field. Gusts scale the speed by a positive
//! random factor. Observation noise is added at the stations only; the
//! noiseless field is kept for every station and every cell centre.

use chrono::{DateTime, Datelike, TimeZone, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::csv_io::write_station_csv;
use super::schema::*;
use super::split::{split, SplitSpec};
use crate::error::{Error, Result};
use crate::geo_graph::{BBox, Cell, GeoPoint, GridSpec};
use crate::numerics::{linalg::cholesky, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub grid: GridSpec,
    /// Stations to place, withheld ones included.
    pub n_real: usize,
    pub n_withheld: usize,
    pub n_steps: usize,
    pub start: DateTime<Utc>,
    /// Climatological mean speed (m/s).
    pub mean_speed: f64,
    /// Relative speed-up towards the western edge of the domain.
    pub coastal_gain: f64,
    /// Diurnal speed amplitude (m/s).
    pub diurnal_amplitude: f64,
    /// Standard deviation of the speed anomaly (m/s).
    pub anomaly_std: f64,
    /// AR(1) coefficient of both anomaly fields, per 10-minute step.
    pub persistence: f64,
    pub mean_direction: f64,
    /// Amplitude (degrees) and rate (cycles per day) of the direction drift.
    pub direction_drift_amplitude: f64,
    pub direction_drift_rate: f64,
    /// Standard deviation of the direction perturbation (degrees).
    pub direction_std: f64,
    pub gust_factor: f64,
    pub correlation_length_km: f64,
    /// Scales observation noise on speed (m/s), gust and direction.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::acceptance()
    }
}

impl SyntheticConfig {
    /// The fixed desk-scale dataset used by the acceptance suite.
    pub fn acceptance() -> Self {
        Self {
            grid: GridSpec {
                bbox: BBox { lat_min: 51.0, lat_max: 53.5, lon_min: 3.5, lon_max: 7.0 },
                rows: 5,
                cols: 5,
            },
            n_real: 12,
            n_withheld: 4,
            n_steps: 8000,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            mean_speed: 5.0,
            coastal_gain: 0.6,
            diurnal_amplitude: 1.5,
            anomaly_std: 1.6,
            persistence: 0.95,
            mean_direction: 240.0,
            direction_drift_amplitude: 60.0,
            direction_drift_rate: 0.5,
            direction_std: 25.0,
            gust_factor: 0.4,
            correlation_length_km: 120.0,
            noise_scale: 0.3,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_real > self.grid.n_cells() {
            return Err(Error::Config(format!(
                "{} stations do not fit in {} cells",
                self.n_real,
                self.grid.n_cells()
            )));
        }
        if self.n_withheld >= self.n_real {
            return Err(Error::Config("n_withheld must be smaller than n_real".into()));
        }
        let positive = [
            ("mean_speed", self.mean_speed),
            ("anomaly_std", self.anomaly_std),
            ("gust_factor", self.gust_factor),
            ("direction_std", self.direction_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // An infinite length gives a spatially constant anomaly.
        if !(self.correlation_length_km > 0.0) {
            return Err(Error::Config("correlation_length_km must be positive".into()));
        }
        let non_negative = [
            ("coastal_gain", self.coastal_gain),
            ("diurnal_amplitude", self.diurnal_amplitude),
            ("direction_drift_amplitude", self.direction_drift_amplitude),
            ("direction_drift_rate", self.direction_drift_rate),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return Err(Error::Config("persistence must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Noiseless wind at one location over the whole period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSeries {
    pub location: GeoPoint,
    pub dd: Vec<f64>,
    pub ff: Vec<f64>,
    pub gff: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stations: Vec<StationMeta>,
    pub withheld: Vec<String>,
    pub bbox: BBox,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub n_steps: usize,
    pub seed: u64,
    /// SHA-256 of the dataset serialized as station CSV.
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub withheld: Vec<String>,
    /// Truth at each station, in dataset order.
    pub station_truth: Vec<TruthSeries>,
    /// Truth at every cell centre, in row-major order.
    pub grid_truth: Vec<TruthSeries>,
    pub manifest: Manifest,
}

// Independent RNG streams, one per purpose.
const STREAM_PLACEMENT: u64 = 1;
const STREAM_SPEED: u64 = 2;
const STREAM_DIRECTION: u64 = 3;
const STREAM_GUST: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let grid = &cfg.grid;

    // Stations in distinct random cells, away from cell edges.
    let mut place = rng(cfg.seed, STREAM_PLACEMENT);
    let cells: Vec<Cell> = grid.cells().collect();
    let chosen = rand::seq::index::sample(&mut place, cells.len(), cfg.n_real).into_vec();
    let dlat = (grid.bbox.lat_max - grid.bbox.lat_min) / grid.rows as f64;
    let dlon = (grid.bbox.lon_max - grid.bbox.lon_min) / grid.cols as f64;
    let mut metas = Vec::with_capacity(cfg.n_real);
    for (k, &ci) in chosen.iter().enumerate() {
        let c = cells[ci];
        let fy: f64 = place.gen_range(0.15..0.85);
        let fx: f64 = place.gen_range(0.15..0.85);
        let lat = grid.bbox.lat_min + (c.row as f64 + fy) * dlat;
        let lon = grid.bbox.lon_min + (c.col as f64 + fx) * dlon;
        metas.push(StationMeta {
            id: format!("S{:02}", k + 1),
            location: GeoPoint::new(lat, lon)?,
        });
    }
    let ids: Vec<String> = metas.iter().map(|m| m.id.clone()).collect();
    let withheld = split(
        &ids,
        &SplitSpec::Random { count: cfg.n_withheld, seed: cfg.seed },
    )?
    .test;

    let mut points: Vec<GeoPoint> = metas.iter().map(|m| m.location).collect();
    points.extend(grid.cells().map(|c| grid.cell_center(c)));
    let n_pts = points.len();

    // Spatial covariance factor shared by both anomaly fields.
    let ell = cfg.correlation_length_km;
    let mut k = Matrix::<f64>::zeros(n_pts, n_pts);
    for i in 0..n_pts {
        for j in 0..n_pts {
            let d = points[i].haversine_km(&points[j]);
            let v = (-0.5 * (d / ell).powi(2)).exp();
            k.set(i, j, v + if i == j { 1e-8 } else { 0.0 });
        }
    }
    let chol = cholesky(&k)?;

    let base: Vec<f64> = points
        .iter()
        .map(|p| {
            let x = (p.lon - grid.bbox.lon_min) / (grid.bbox.lon_max - grid.bbox.lon_min);
            cfg.mean_speed * (1.0 + cfg.coastal_gain * (-3.0 * x.clamp(0.0, 1.0)).exp())
        })
        .collect();

    let innov = (1.0 - cfg.persistence * cfg.persistence).sqrt();
    let mut r_speed = rng(cfg.seed, STREAM_SPEED);
    let mut r_dir = rng(cfg.seed, STREAM_DIRECTION);
    let mut r_gust = rng(cfg.seed, STREAM_GUST);
    let mut a = correlated(&chol, &mut r_speed);
    let mut b = correlated(&chol, &mut r_dir);

    let mut truth: Vec<TruthSeries> = points
        .iter()
        .map(|&location| TruthSeries {
            location,
            dd: Vec::with_capacity(cfg.n_steps),
            ff: Vec::with_capacity(cfg.n_steps),
            gff: Vec::with_capacity(cfg.n_steps),
        })
        .collect();
    let mut anomaly = vec![vec![0.0; n_pts]; cfg.n_steps];

    for t in 0..cfg.n_steps {
        if t > 0 {
            let ea = correlated(&chol, &mut r_speed);
            let eb = correlated(&chol, &mut r_dir);
            for i in 0..n_pts {
                a[i] = cfg.persistence * a[i] + innov * ea[i];
                b[i] = cfg.persistence * b[i] + innov * eb[i];
            }
        }
        let ts = cfg.start + chrono::Duration::seconds(STEP_SECONDS * t as i64);
        let days = t as f64 * STEP_SECONDS as f64 / 86_400.0;
        let tod = ts.num_seconds_from_midnight() as f64 / 86_400.0;
        let diurnal = cfg.diurnal_amplitude * (std::f64::consts::TAU * (tod - 0.375)).sin();
        let drift = cfg.direction_drift_amplitude * (std::f64::consts::TAU * cfg.direction_drift_rate * days).sin();
        for i in 0..n_pts {
            let raw = base[i] + diurnal + cfg.anomaly_std * a[i];
            let ff = softplus(raw);
            let dd = (cfg.mean_direction + drift + cfg.direction_std * b[i]).rem_euclid(360.0);
            let factor = 1.0 + cfg.gust_factor * (1.0 + 0.5 * normal(&mut r_gust)).abs();
            let tr = &mut truth[i];
            tr.ff.push(ff);
            tr.dd.push(if dd >= 360.0 { 0.0 } else { dd });
            tr.gff.push(ff * factor);
            anomaly[t][i] = a[i];
        }
    }

    let mut noise = rng(cfg.seed, STREAM_NOISE);
    let mut stations = Vec::with_capacity(cfg.n_real);
    for (i, meta) in metas.iter().enumerate() {
        let mut s = StationSeries::new(meta.clone(), cfg.n_steps);
        let tr = &truth[i];
        for t in 0..cfg.n_steps {
            let ff = (tr.ff[t] + cfg.noise_scale * normal(&mut noise)).max(0.0);
            let gff = (tr.gff[t] + cfg.noise_scale * normal(&mut noise)).max(ff);
            let dd = (tr.dd[t] + 10.0 * cfg.noise_scale * normal(&mut noise)).rem_euclid(360.0);
            let dd = if dd >= 360.0 { 0.0 } else { dd };
            s.set(t, DD, Some(round3(dd)));
            s.set(t, FF, Some(round3(ff)));
            s.set(t, GFF, Some(round3(gff.max(ff))));
            let ts = cfg.start + chrono::Duration::seconds(STEP_SECONDS * t as i64);
            let met = met_channels(ts, anomaly[t][i], meta.location, cfg.noise_scale, &mut noise);
            for (code, v) in met {
                s.set(t, variable_index(code).expect("known code"), Some(round3(v)));
            }
        }
        stations.push(s);
    }

    let dataset = Dataset { start: cfg.start, n_steps: cfg.n_steps, stations };
    let grid_truth = truth.split_off(cfg.n_real);
    let manifest = Manifest {
        stations: metas,
        withheld: withheld.clone(),
        bbox: grid.bbox,
        start: cfg.start,
        end: dataset.timestamp(cfg.n_steps.saturating_sub(1)),
        n_steps: cfg.n_steps,
        seed: cfg.seed,
        sha256: dataset_hash(&dataset)?,
    };
    Ok(SyntheticData { dataset, withheld, station_truth: truth, grid_truth, manifest })
}

/// SHA-256 (hex) of the dataset in its CSV serialization.
pub fn dataset_hash(dataset: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_station_csv(dataset, &mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

fn correlated(chol: &Matrix<f64>, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = chol.rows();
    let z: Vec<f64> = (0..n).map(|_| normal(r)).collect();
    (0..n)
        .map(|i| chol.row(i)[..=i].iter().zip(&z).map(|(l, z)| l * z).sum())
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Non-wind channels: temperature, humidity, pressure (coupled to the speed
/// anomaly), dew point, radiation and a constant weather code.
fn met_channels(
    ts: DateTime<Utc>,
    anomaly: f64,
    p: GeoPoint,
    noise_scale: f64,
    r: &mut ChaCha8Rng,
) -> [(&'static str, f64); 6] {
    let tau = std::f64::consts::TAU;
    let tod = ts.num_seconds_from_midnight() as f64 / 86_400.0;
    let doy = (ts.ordinal0() as f64 + tod) / 365.25;
    let day = (tau * (tod - 0.375)).sin();
    let ta = 10.0 - 7.0 * (tau * doy).cos() + 4.0 * day - 0.1 * (p.lat - 52.0) + 0.5 * noise_scale * normal(r);
    let rh = (80.0 - 12.0 * day + 2.0 * noise_scale * normal(r)).clamp(20.0, 100.0);
    let pp = 1013.0 - 4.0 * anomaly + 0.5 * noise_scale * normal(r);
    let td = ta - (100.0 - rh) / 5.0;
    let qg = (600.0 * (tau * (tod - 0.25)).sin() * (1.0 - 0.4 * (tau * doy).cos())).max(0.0);
    [("ta", ta), ("rh", rh), ("pp", pp), ("td", td), ("qg", qg), ("ww-10", 0.0)]
}
