//! Delimited-text and JSON file formats.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! and writing it back reproduces it byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Coord, Site, SiteKind, SiteTable};
use crate::predict::PredictionResult;
use crate::temporal::{period_date, period_of, Observation, ObservationSet, TemporalBasis};

const SITE_HEADER: [&str; 4] = ["site_id", "x_km", "y_km", "kind"];
const OBS_HEADER: [&str; 3] = ["site_id", "period_start_date", "log_value"];

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(path, format!("{other:?}")),
    }
}

fn parse_f64(path: &Path, line: u64, field: &str, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, format!("line {line}: `{s}` is not a finite number in {field}"))),
    }
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| parse_err(path, format!("line {line}: bad date `{s}`: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// `site_id,x_km,y_km,kind,<covariates...>`
pub fn read_sites(path: &Path) -> Result<SiteTable> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 4 || header.iter().take(4).ne(SITE_HEADER) {
        return Err(parse_err(path, format!("header must start with {}", SITE_HEADER.join(","))));
    }
    let names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let mut sites = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        if rec.len() != header.len() {
            return Err(parse_err(path, format!("line {line}: expected {} fields", header.len())));
        }
        let kind: SiteKind = rec[3].parse().map_err(|e: Error| parse_err(path, format!("line {line}: {e}")))?;
        let covariates = (4..rec.len())
            .map(|c| parse_f64(path, line, &header[c], &rec[c]))
            .collect::<Result<Vec<f64>>>()?;
        sites.push(Site {
            id: rec[0].to_string(),
            coord: Coord::new(parse_f64(path, line, "x_km", &rec[1])?, parse_f64(path, line, "y_km", &rec[2])?),
            kind,
            covariates,
        });
    }
    if sites.is_empty() {
        return Err(parse_err(path, "no sites"));
    }
    SiteTable::new(names, sites).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_sites(path: &Path, sites: &SiteTable) -> Result<()> {
    let mut out = SITE_HEADER.join(",");
    for n in &sites.covariate_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for s in &sites.sites {
        out.push_str(&format!("{},{},{},{}", s.id, s.coord.x, s.coord.y, s.kind.as_str()));
        for v in &s.covariates {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// `site_id,period_start_date,log_value`. Periods are 14-day bins anchored
/// at `anchor`, or at the earliest date in the file when `anchor` is `None`.
pub fn read_observations(path: &Path, anchor: Option<NaiveDate>) -> Result<ObservationSet> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(OBS_HEADER) {
        return Err(parse_err(path, format!("header must be {}", OBS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        if rec.len() != 3 {
            return Err(parse_err(path, format!("line {line}: expected 3 fields")));
        }
        rows.push((
            rec[0].to_string(),
            parse_date(path, line, &rec[1])?,
            parse_f64(path, line, "log_value", &rec[2])?,
        ));
    }
    let Some(min) = rows.iter().map(|r| r.1).min() else {
        return Err(parse_err(path, "no observations"));
    };
    let anchor = anchor.unwrap_or(min);
    let records = rows
        .into_iter()
        .map(|(site_id, d, value)| {
            Ok(Observation {
                site_id,
                period: period_of(anchor, d).map_err(|e| parse_err(path, e.to_string()))?,
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::new(anchor, records).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    let mut out = OBS_HEADER.join(",");
    out.push('\n');
    for r in obs.records() {
        out.push_str(&format!("{},{},{}\n", r.site_id, obs.period_date(r.period), r.value));
    }
    write_text(path, &out)
}

/// `site_id,period_start_date` prediction targets.
pub fn read_targets(path: &Path, anchor: NaiveDate) -> Result<Vec<(String, usize)>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 || &header[0] != "site_id" || &header[1] != "period_start_date" {
        return Err(parse_err(path, "header must start with site_id,period_start_date"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        let d = parse_date(path, line, &rec[1])?;
        let p = period_of(anchor, d).map_err(|_| Error::PeriodOutOfGrid(d.to_string()))?;
        out.push((rec[0].to_string(), p));
    }
    Ok(out)
}

/// `site_id,period_start_date,pred_log,pred_var`; the variance column is
/// empty when variances were not requested.
pub fn write_predictions(path: &Path, anchor: NaiveDate, res: &PredictionResult) -> Result<()> {
    let mut out = String::from("site_id,period_start_date,pred_log,pred_var\n");
    for c in &res.cells {
        let v = c.variance.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", c.site_id, period_date(anchor, c.period), c.mean, v));
    }
    write_text(path, &out)
}

/// `site_id,lta_native`
pub fn write_lta(path: &Path, res: &PredictionResult) -> Result<()> {
    let mut out = String::from("site_id,lta_native\n");
    for (s, v) in &res.lta {
        out.push_str(&format!("{s},{v}\n"));
    }
    write_text(path, &out)
}

/// One row per period: `period_start_date,f1..fm`.
pub fn write_trends(path: &Path, trends: &TemporalBasis) -> Result<()> {
    let mut out = String::from("period_start_date");
    for j in 0..trends.m() {
        out.push_str(&format!(",f{}", j + 1));
    }
    out.push('\n');
    for t in 0..trends.n_periods() {
        out.push_str(&period_date(trends.anchor, t).to_string());
        for j in 0..trends.m() {
            out.push_str(&format!(",{}", trends.value(t, j)));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Basis rows labelled by site: `site_id,b1..bK`.
pub fn write_matrix(path: &Path, row_labels: &[String], prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::from("site_id");
    for j in 0..m.ncols() {
        out.push_str(&format!(",{prefix}{}", j + 1));
    }
    out.push('\n');
    for (i, label) in row_labels.iter().enumerate() {
        out.push_str(label);
        for j in 0..m.ncols() {
            out.push_str(&format!(",{}", m[(i, j)]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}
