//! CSV files: metric histories `(step, split, metric, value)` and PR curves
//! `(recall, precision)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use volrep_core::io::atomic_write;
use volrep_nn::train::MetricsRecord;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(atomic_write(path, &bytes)?)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::missing(path, "CSV file not found"));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_history(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    write_rows(path, history)
}

pub fn read_history(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_rows(path)
}

pub fn write_pr_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let rows: Vec<PrPoint> = points.iter().map(|&(recall, precision)| PrPoint { recall, precision }).collect();
    write_rows(path, &rows)
}

pub fn read_pr_curve(path: &Path) -> Result<Vec<PrPoint>> {
    read_rows(path)
}

/// Which kind of CSV `path` holds, judged by its header.
pub enum CsvKind {
    History,
    PrCurve,
}

pub fn detect(path: &Path) -> Result<CsvKind> {
    if !path.exists() {
        return Err(Error::missing(path, "CSV file not found"));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    match header.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["step", "split", "metric", "value"] => Ok(CsvKind::History),
        ["recall", "precision"] => Ok(CsvKind::PrCurve),
        _ => Err(Error::InvalidData(format!("{}: unrecognised CSV header {header:?}", path.display()))),
    }
}
