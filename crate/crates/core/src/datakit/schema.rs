//! Station observation schema: the 29 variable codes, in CSV column order.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::geo_graph::{GeoPoint, StationSite};

/// Variable codes in the order they appear in the CSV header after the
/// four key columns.
pub const VARIABLES: [&str; 29] = [
    "dd", "ff", "gff", "ta", "rh", "pp", "zm", "qg", "D1H", "dr", "R6H", "R12H", "R24H", "rg",
    "ss", "td", "Tgn", "Tgn6", "Tgn12", "Tgn14", "Tn", "Tn6", "Tn12", "Tn14", "Tx", "Tx6",
    "Tx12", "Tx24", "ww-10",
];

pub const N_VARIABLES: usize = VARIABLES.len();

/// Key columns preceding the variables.
pub const KEY_COLUMNS: [&str; 4] = ["station_id", "lat", "lon", "timestamp"];

pub const DD: usize = 0;
pub const FF: usize = 1;
pub const GFF: usize = 2;

/// Indices of the meteorological (non-wind) channels.
pub const MET_VARIABLES: std::ops::Range<usize> = 3..N_VARIABLES;
pub const N_MET: usize = N_VARIABLES - 3;

/// Length of one time step in seconds.
pub const STEP_SECONDS: i64 = 600;

pub fn variable_index(code: &str) -> Option<usize> {
    VARIABLES.iter().position(|v| *v == code)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub id: String,
    pub location: GeoPoint,
}

impl StationMeta {
    pub fn site(&self) -> StationSite {
        StationSite {
            id: self.id.clone(),
            location: self.location,
        }
    }
}

/// One station's observations on the dataset's common time axis. Missing
/// values are stored as NaN and surfaced as `None`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationSeries {
    pub meta: StationMeta,
    values: Vec<f64>,
}

impl PartialEq for StationSeries {
    /// Missing entries compare equal to each other.
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl StationSeries {
    pub fn new(meta: StationMeta, n_steps: usize) -> Self {
        Self {
            meta,
            values: vec![f64::NAN; n_steps * N_VARIABLES],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / N_VARIABLES
    }

    #[inline]
    pub fn get(&self, t: usize, var: usize) -> Option<f64> {
        let v = self.values[t * N_VARIABLES + var];
        (!v.is_nan()).then_some(v)
    }

    #[inline]
    pub fn set(&mut self, t: usize, var: usize, v: Option<f64>) {
        self.values[t * N_VARIABLES + var] = v.unwrap_or(f64::NAN);
    }

    pub fn record(&self, t: usize) -> [Option<f64>; N_VARIABLES] {
        std::array::from_fn(|v| self.get(t, v))
    }

    pub fn has_any(&self, var: usize) -> bool {
        (0..self.n_steps()).any(|t| self.get(t, var).is_some())
    }
}

/// All stations on a shared, strictly 10-minute time axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub start: DateTime<Utc>,
    pub n_steps: usize,
    pub stations: Vec<StationSeries>,
}

impl Dataset {
    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(STEP_SECONDS * t as i64)
    }

    pub fn station(&self, id: &str) -> Option<&StationSeries> {
        self.stations.iter().find(|s| s.meta.id == id)
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.meta.id == id)
    }

    pub fn sites(&self) -> Vec<StationSite> {
        self.stations.iter().map(|s| s.meta.site()).collect()
    }

    pub fn station_ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.meta.id.clone()).collect()
    }
}
