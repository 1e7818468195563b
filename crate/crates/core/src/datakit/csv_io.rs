//! Reading and writing station CSV files.
//!
//! Header: `station_id,lat,lon,timestamp,` followed by the variable codes of
//! [`VARIABLES`]. Variable columns may be omitted or left empty; the four key
//! columns are mandatory. Timestamps are UTC (RFC 3339 or
//! `YYYY-MM-DD HH:MM:SS`) on a 10-minute grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Timelike, Utc};
use log::warn;

use super::schema::*;
use crate::error::{Error, Result};
use crate::geo_graph::GeoPoint;

/// Largest offset from the 10-minute grid that is snapped instead of
/// rejected.
pub const SNAP_TOLERANCE_SECONDS: i64 = 60;

#[derive(Clone, Debug, PartialEq)]
pub enum IssueKind {
    MalformedRow,
    MisalignedTimestamp,
    DirectionWrapped,
    OutOfRange,
    GustBelowSpeed,
    StationWithoutWind,
    DuplicateRecord,
    EmptyFile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseIssue {
    /// 1-based line number in the file, when the issue concerns a row.
    pub line: Option<usize>,
    pub station: Option<String>,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ParsedCsv {
    pub dataset: Dataset,
    pub issues: Vec<ParseIssue>,
    pub excluded_stations: Vec<String>,
}

pub fn parse_station_csv(path: impl AsRef<Path>) -> Result<ParsedCsv> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_station_reader(file)
}

struct Row {
    t: DateTime<Utc>,
    values: [Option<f64>; N_VARIABLES],
}

pub fn parse_station_reader<R: Read>(reader: R) -> Result<ParsedCsv> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut issues = Vec::new();
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(_) => csv::StringRecord::new(),
    };
    if headers.is_empty() {
        warn!("station csv is empty");
        issues.push(ParseIssue {
            line: None,
            station: None,
            kind: IssueKind::EmptyFile,
            message: "empty file".into(),
        });
        return Ok(ParsedCsv {
            dataset: Dataset { start: Utc.timestamp_opt(0, 0).unwrap(), n_steps: 0, stations: Vec::new() },
            issues,
            excluded_stations: Vec::new(),
        });
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut key = [0usize; 4];
    for (k, name) in KEY_COLUMNS.iter().enumerate() {
        key[k] = col(name).ok_or_else(|| Error::Data(format!("missing mandatory column `{name}`")))?;
    }
    let var_cols: Vec<Option<usize>> = VARIABLES.iter().map(|v| col(v)).collect();

    let mut meta: BTreeMap<String, GeoPoint> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<Row>> = BTreeMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(malformed(line, format!("unreadable row: {e}")));
                continue;
            }
        };
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let station = field(key[0]).to_string();
        if station.is_empty() {
            issues.push(malformed(line, "empty station_id".into()));
            continue;
        }
        let (Ok(lat), Ok(lon)) = (field(key[1]).parse::<f64>(), field(key[2]).parse::<f64>()) else {
            issues.push(malformed(line, "unparseable coordinates".into()));
            continue;
        };
        let Ok(location) = GeoPoint::new(lat, lon) else {
            issues.push(malformed(line, format!("coordinates out of range ({lat}, {lon})")));
            continue;
        };
        let t = match parse_timestamp(field(key[3])) {
            Some(t) => t,
            None => {
                issues.push(malformed(line, format!("unparseable timestamp `{}`", field(key[3]))));
                continue;
            }
        };
        let t = match snap(t) {
            Ok((snapped, moved)) => {
                if moved {
                    issues.push(ParseIssue {
                        line: Some(line),
                        station: Some(station.clone()),
                        kind: IssueKind::MisalignedTimestamp,
                        message: format!("timestamp {t} snapped to {snapped}"),
                    });
                }
                snapped
            }
            Err(off) => {
                issues.push(ParseIssue {
                    line: Some(line),
                    station: Some(station.clone()),
                    kind: IssueKind::MisalignedTimestamp,
                    message: format!("timestamp {t} is {off} s off the 10-minute grid; row rejected"),
                });
                continue;
            }
        };
        let mut values = [None; N_VARIABLES];
        let mut bad = false;
        for (v, c) in var_cols.iter().enumerate() {
            let Some(c) = c else { continue };
            let raw = field(*c);
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => values[v] = Some(x),
                _ => {
                    issues.push(malformed(line, format!("bad value `{raw}` for {}", VARIABLES[v])));
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        range_check(&mut values, line, &station, &mut issues);
        if !meta.contains_key(&station) {
            meta.insert(station.clone(), location);
            order.push(station.clone());
        }
        rows.entry(station).or_default().push(Row { t, values });
    }

    let mut excluded = Vec::new();
    order.retain(|id| {
        let has_wind = rows[id]
            .iter()
            .any(|r| r.values[DD].is_some() || r.values[FF].is_some() || r.values[GFF].is_some());
        if !has_wind {
            warn!("station {id} records no wind variables; excluded");
            issues.push(ParseIssue {
                line: None,
                station: Some(id.clone()),
                kind: IssueKind::StationWithoutWind,
                message: "no dd/ff/gff values; station excluded".into(),
            });
            excluded.push(id.clone());
        }
        has_wind
    });

    let kept_rows = order.iter().flat_map(|id| rows[id].iter());
    let (tmin, tmax) = kept_rows.fold((None, None), |(lo, hi): (Option<DateTime<Utc>>, Option<DateTime<Utc>>), r| {
        (Some(lo.map_or(r.t, |l| l.min(r.t))), Some(hi.map_or(r.t, |h| h.max(r.t))))
    });
    let (start, n_steps) = match (tmin, tmax) {
        (Some(a), Some(b)) => (a, ((b - a).num_seconds() / STEP_SECONDS) as usize + 1),
        _ => (Utc.timestamp_opt(0, 0).unwrap(), 0),
    };
    if n_steps == 0 {
        warn!("station csv contains no usable rows");
    }

    let mut stations = Vec::with_capacity(order.len());
    for id in &order {
        let mut series = StationSeries::new(
            StationMeta { id: id.clone(), location: meta[id] },
            n_steps,
        );
        let mut seen = vec![false; n_steps];
        for r in &rows[id] {
            let t = ((r.t - start).num_seconds() / STEP_SECONDS) as usize;
            if seen[t] {
                issues.push(ParseIssue {
                    line: None,
                    station: Some(id.clone()),
                    kind: IssueKind::DuplicateRecord,
                    message: format!("duplicate record at {}; later row wins", r.t),
                });
            }
            seen[t] = true;
            for (v, x) in r.values.iter().enumerate() {
                series.set(t, v, *x);
            }
        }
        stations.push(series);
    }

    Ok(ParsedCsv {
        dataset: Dataset { start, n_steps, stations },
        issues,
        excluded_stations: excluded,
    })
}

fn malformed(line: usize, message: String) -> ParseIssue {
    warn!("line {line}: {message}");
    ParseIssue {
        line: Some(line),
        station: None,
        kind: IssueKind::MalformedRow,
        message,
    }
}

fn range_check(values: &mut [Option<f64>; N_VARIABLES], line: usize, station: &str, issues: &mut Vec<ParseIssue>) {
    let mut flag = |kind: IssueKind, message: String| {
        issues.push(ParseIssue {
            line: Some(line),
            station: Some(station.to_string()),
            kind,
            message,
        })
    };
    if let Some(dd) = values[DD] {
        if dd == 360.0 {
            values[DD] = Some(0.0);
            flag(IssueKind::DirectionWrapped, "dd = 360 normalized to 0".into());
        } else if !(0.0..360.0).contains(&dd) {
            values[DD] = None;
            flag(IssueKind::OutOfRange, format!("dd = {dd} outside [0, 360)"));
        }
    }
    for v in [FF, GFF] {
        if let Some(x) = values[v] {
            if x < 0.0 {
                values[v] = None;
                flag(IssueKind::OutOfRange, format!("{} = {x} is negative", VARIABLES[v]));
            }
        }
    }
    if let (Some(ff), Some(gff)) = (values[FF], values[GFF]) {
        if gff < ff {
            flag(IssueKind::GustBelowSpeed, format!("gff {gff} < ff {ff}"));
        }
    }
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    None
}

/// Snaps to the nearest 10-minute mark; returns the offset when too far.
fn snap(t: DateTime<Utc>) -> std::result::Result<(DateTime<Utc>, bool), i64> {
    let secs = t.timestamp();
    let rem = secs.rem_euclid(STEP_SECONDS);
    let (base, off) = if rem <= STEP_SECONDS / 2 {
        (secs - rem, rem)
    } else {
        (secs - rem + STEP_SECONDS, STEP_SECONDS - rem)
    };
    if off == 0 && t.nanosecond() == 0 {
        return Ok((t, false));
    }
    if off > SNAP_TOLERANCE_SECONDS {
        return Err(off);
    }
    Ok((Utc.timestamp_opt(base, 0).unwrap(), true))
}

/// Writes a dataset in the documented schema. Rows with no values at all
/// are omitted; floats use the shortest representation that round-trips.
pub fn write_station_csv<W: Write>(dataset: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<&str> = KEY_COLUMNS.iter().chain(VARIABLES.iter()).copied().collect();
    out.write_record(&header)?;
    for s in &dataset.stations {
        let lat = s.meta.location.lat.to_string();
        let lon = s.meta.location.lon.to_string();
        for t in 0..dataset.n_steps {
            let rec = s.record(t);
            if rec.iter().all(Option::is_none) {
                continue;
            }
            let mut row = Vec::with_capacity(header.len());
            row.push(s.meta.id.clone());
            row.push(lat.clone());
            row.push(lon.clone());
            row.push(dataset.timestamp(t).format("%Y-%m-%dT%H:%M:%SZ").to_string());
            row.extend(rec.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_station_csv_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_station_csv(dataset, f)
}
