//! File formats. Floats are written in Rust's shortest round-trip form, so
//! every reader reproduces the written values bit for bit.

mod checkpoint;
mod dataset;
mod metrics;
mod rollout;
mod weights;

pub use checkpoint::{load_checkpoint, read_log, save_checkpoint, write_log};
pub use dataset::{read_dataset, write_dataset, DATASET_VERSION};
pub use metrics::{read_metrics, write_aggregate, write_metrics, write_sweep, SweepPoint};
pub use rollout::write_rollouts;
pub use weights::{load_weights, save_weights};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// CSV text from a header and rows.
pub(crate) fn csv_text(preamble: Option<&str>, header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Failed(format!("csv: {e}"));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Failed(format!("csv: {e}")))?).expect("csv output is utf-8");
    Ok(match preamble {
        Some(p) => format!("{p}\n{body}"),
        None => body,
    })
}

/// Parsed CSV rows with their 1-based file line numbers. `skip` leading lines
/// (a version preamble) are not part of the table.
pub(crate) fn csv_rows(path: &Path, text: &str, skip: usize) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let body: String = text.lines().skip(skip).map(|l| format!("{l}\n")).collect();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, skip + 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize) + skip;
            Error::format(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize) + skip;
        rows.push((line, rec.iter().map(String::from).collect()));
    }
    Ok((header, rows))
}

pub(crate) fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(path, line, format!("bad {what} '{field}'")))
}
