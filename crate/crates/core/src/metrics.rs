//! MAE/RMSE and their angular variants, grouped by method, variable, lead,
//! station and season.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metric", (pred.len(), 1), (truth.len(), 1)));
    }
    if pred.is_empty() {
        return Err(Error::Data("metric over an empty sample".into()));
    }
    Ok(())
}

/// Shorter arc between two directions in degrees, in `[0, 180]`.
pub fn angular_error(pred_deg: f64, truth_deg: f64) -> f64 {
    let d = (pred_deg - truth_deg).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn angular_mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| angular_error(*p, *t)).sum::<f64>() / pred.len() as f64)
}

pub fn angular_rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| angular_error(*p, *t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "dd")]
    Direction,
    #[serde(rename = "ff")]
    Speed,
    #[serde(rename = "gff")]
    Gust,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Direction, Variable::Speed, Variable::Gust];

    pub fn code(self) -> &'static str {
        match self {
            Variable::Direction => "dd",
            Variable::Speed => "ff",
            Variable::Gust => "gff",
        }
    }

    pub fn error(self, pred: f64, truth: f64) -> f64 {
        match self {
            Variable::Direction => angular_error(pred, truth),
            _ => (pred - truth).abs(),
        }
    }
}

impl std::str::FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dd" => Ok(Variable::Direction),
            "ff" => Ok(Variable::Speed),
            "gff" => Ok(Variable::Gust),
            other => Err(Error::Data(format!("unknown variable tag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Season {
    #[serde(rename = "DJF")]
    Djf,
    #[serde(rename = "MAM")]
    Mam,
    #[serde(rename = "JJA")]
    Jja,
    #[serde(rename = "SON")]
    Son,
}

impl Season {
    pub fn of(t: DateTime<Utc>) -> Self {
        match t.month() {
            12 | 1 | 2 => Season::Djf,
            3..=5 => Season::Mam,
            6..=8 => Season::Jja,
            _ => Season::Son,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
        }
    }
}

/// Running sums for one report cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub n: usize,
}

impl Cell {
    pub fn add(&mut self, err: f64) {
        self.sum_abs += err;
        self.sum_sq += err * err;
        self.n += 1;
    }

    pub fn merge(&mut self, other: &Cell) {
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.n += other.n;
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.n.max(1) as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.sum_sq / self.n.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub variable: Variable,
    pub lead: usize,
    pub station: String,
    pub season: Season,
}

/// One prediction/truth pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub method: String,
    pub variable: Variable,
    pub lead: usize,
    pub station: String,
    /// Valid time of the prediction.
    pub time: DateTime<Utc>,
    pub pred: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    cells: BTreeMap<CellKey, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub variable: Variable,
    pub lead: usize,
    pub station: String,
    pub season: Season,
    pub mae: f64,
    pub rmse: f64,
    pub n_samples: usize,
}

/// Filter over report cells; `None` fields match anything.
#[derive(Clone, Debug, Default)]
pub struct Select<'a> {
    pub method: Option<&'a str>,
    pub variable: Option<Variable>,
    pub lead: Option<usize>,
    pub station: Option<&'a str>,
    pub season: Option<Season>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, method: &str, variable: Variable, lead: usize, station: &str, time: DateTime<Utc>, pred: f64, truth: f64) {
        let key = CellKey {
            method: method.to_string(),
            variable,
            lead,
            station: station.to_string(),
            season: Season::of(time),
        };
        self.cells.entry(key).or_default().add(variable.error(pred, truth));
    }

    pub fn merge(&mut self, other: &EvalReport) {
        for (k, c) in &other.cells {
            self.cells.entry(k.clone()).or_default().merge(c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// The cells of one method.
    pub fn only(&self, method: &str) -> EvalReport {
        let cells = self.cells.iter().filter(|(k, _)| k.method == method).map(|(k, c)| (k.clone(), *c)).collect();
        EvalReport { cells }
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &Cell)> {
        self.cells.iter()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.keys().map(|k| k.method.clone()).collect();
        m.dedup();
        m
    }

    pub fn stations(&self) -> Vec<String> {
        let mut s: Vec<String> = self.cells.keys().map(|k| k.station.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn leads(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.cells.keys().map(|k| k.lead).collect();
        l.sort();
        l.dedup();
        l
    }

    /// Pooled cell over everything matching `sel`.
    pub fn pooled(&self, sel: &Select<'_>) -> Cell {
        let mut out = Cell::default();
        for (k, c) in &self.cells {
            let hit = sel.method.map_or(true, |m| k.method == m)
                && sel.variable.map_or(true, |v| k.variable == v)
                && sel.lead.map_or(true, |l| k.lead == l)
                && sel.station.map_or(true, |s| k.station == s)
                && sel.season.map_or(true, |s| k.season == s);
            if hit {
                out.merge(c);
            }
        }
        out
    }

    pub fn pooled_mae(&self, method: &str, variable: Variable) -> f64 {
        self.pooled(&Select { method: Some(method), variable: Some(variable), ..Default::default() }).mae()
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.cells
            .iter()
            .map(|(k, c)| ReportRow {
                method: k.method.clone(),
                variable: k.variable,
                lead: k.lead,
                station: k.station.clone(),
                season: k.season,
                mae: c.mae(),
                rmse: c.rmse(),
                n_samples: c.n,
            })
            .collect()
    }

    /// Per-cell CSV: `method,variable,lead,station,season,mae,rmse,n_samples`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "variable", "lead", "station", "season", "mae", "rmse", "n_samples"])?;
        for r in self.rows() {
            out.write_record([
                r.method,
                r.variable.code().to_string(),
                r.lead.to_string(),
                r.station,
                r.season.code().to_string(),
                r.mae.to_string(),
                r.rmse.to_string(),
                r.n_samples.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ReportDocument { version: 1, cells: self.cells.iter().map(|(k, c)| (k.clone(), *c)).collect() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ReportDocument = serde_json::from_str(s)?;
        if doc.version != 1 {
            return Err(Error::Data(format!("unsupported report version {}", doc.version)));
        }
        Ok(Self { cells: doc.cells.into_iter().collect() })
    }
}

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    version: u32,
    cells: Vec<(CellKey, Cell)>,
}

pub fn aggregate(samples: &[Sample]) -> EvalReport {
    let mut r = EvalReport::new();
    for s in samples {
        r.add(&s.method, s.variable, s.lead, &s.station, s.time, s.pred, s.truth);
    }
    r
}

/// Tagged sample whose variable is given as a string code.
pub fn aggregate_tagged(samples: &[(String, String, usize, String, DateTime<Utc>, f64, f64)]) -> Result<EvalReport> {
    let mut r = EvalReport::new();
    for (m, v, l, s, t, p, y) in samples {
        r.add(m, v.parse()?, *l, s, *t, *p, *y);
    }
    Ok(r)
}

/// Side-by-side MAE/RMSE for one method, pooled over leads and stations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub dd_mae: f64,
    pub dd_rmse: f64,
    pub ff_mae: f64,
    pub ff_rmse: f64,
    pub gff_mae: f64,
    pub gff_rmse: f64,
    pub n_samples: usize,
}

/// Pooled errors for one method and variable along one report dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub method: String,
    pub variable: Variable,
    pub key: String,
    pub mae: f64,
    pub rmse: f64,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dimension {
    Lead,
    Station,
    Season,
}

impl EvalReport {
    /// One row per method, in the order given.
    pub fn method_table(&self, methods: &[String]) -> Vec<MethodSummary> {
        methods
            .iter()
            .map(|m| {
                let cell = |v| self.pooled(&Select { method: Some(m), variable: Some(v), ..Default::default() });
                let (dd, ff, gff) = (cell(Variable::Direction), cell(Variable::Speed), cell(Variable::Gust));
                MethodSummary {
                    method: m.clone(),
                    dd_mae: dd.mae(),
                    dd_rmse: dd.rmse(),
                    ff_mae: ff.mae(),
                    ff_rmse: ff.rmse(),
                    gff_mae: gff.mae(),
                    gff_rmse: gff.rmse(),
                    n_samples: dd.n + ff.n + gff.n,
                }
            })
            .collect()
    }

    pub fn breakdown(&self, methods: &[String], dim: Dimension) -> Vec<BreakdownRow> {
        let mut keys: Vec<String> = match dim {
            Dimension::Lead => self.leads().iter().map(|l| l.to_string()).collect(),
            Dimension::Station => self.stations(),
            Dimension::Season => self.cells.keys().map(|k| k.season.code().to_string()).collect(),
        };
        if dim == Dimension::Season {
            keys.sort();
            keys.dedup();
        }
        let mut rows = Vec::new();
        for m in methods {
            for v in Variable::ALL {
                for key in &keys {
                    let mut cell = Cell::default();
                    for (k, c) in &self.cells {
                        let hit = match dim {
                            Dimension::Lead => k.lead.to_string() == *key,
                            Dimension::Station => k.station == *key,
                            Dimension::Season => k.season.code() == key,
                        };
                        if hit && k.method == *m && k.variable == v {
                            cell.merge(c);
                        }
                    }
                    if cell.n > 0 {
                        rows.push(BreakdownRow {
                            method: m.clone(),
                            variable: v,
                            key: key.clone(),
                            mae: cell.mae(),
                            rmse: cell.rmse(),
                            n_samples: cell.n,
                        });
                    }
                }
            }
        }
        rows
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows_csv<W: Write, R: Serialize>(rows: &[R], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
