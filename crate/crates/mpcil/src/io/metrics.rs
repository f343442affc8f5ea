use std::path::Path;

use mpcil_core::eval::{MeanStd, MetricsReport, SeedMetrics};

use super::{csv_rows, csv_text, fmt, parse, read_text, write_text};
use crate::error::{Error, Result};

const COLUMNS: [&str; 10] = [
    "loss",
    "alpha",
    "quantile",
    "seed",
    "avg_cost",
    "violation_ratio",
    "n_rollouts",
    "violation_ratio_all",
    "avg_raw_cost",
    "n_kept",
];

/// One row per (report, seed).
pub fn write_metrics(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let header: Vec<String> = COLUMNS.map(String::from).to_vec();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| {
            r.per_seed.iter().map(move |m| {
                vec![
                    r.label.clone(),
                    fmt(r.alpha),
                    fmt(r.quantile),
                    m.seed.to_string(),
                    fmt(m.avg_cost),
                    fmt(m.violation_ratio),
                    m.n_rollouts.to_string(),
                    fmt(m.violation_ratio_all),
                    fmt(m.avg_raw_cost),
                    m.n_kept.to_string(),
                ]
            })
        })
        .collect();
    write_text(path, &csv_text(None, &header, &rows)?)
}

/// Regroups per-seed rows by (loss, alpha, quantile) in order of first
/// appearance and recomputes the aggregates.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = read_text(path)?;
    let (header, rows) = csv_rows(path, &text, 0)?;
    if header != COLUMNS {
        return Err(Error::format(path, 1, "unexpected metrics columns"));
    }
    let mut groups: Vec<(String, f64, f64, Vec<SeedMetrics>)> = Vec::new();
    for (line, r) in rows {
        let alpha: f64 = parse(path, line, &r[1], "alpha")?;
        let quantile: f64 = parse(path, line, &r[2], "quantile")?;
        let m = SeedMetrics {
            seed: parse(path, line, &r[3], "seed")?,
            avg_cost: parse(path, line, &r[4], "avg_cost")?,
            violation_ratio: parse(path, line, &r[5], "violation_ratio")?,
            n_rollouts: parse(path, line, &r[6], "n_rollouts")?,
            violation_ratio_all: parse(path, line, &r[7], "violation_ratio_all")?,
            avg_raw_cost: parse(path, line, &r[8], "avg_raw_cost")?,
            n_kept: parse(path, line, &r[9], "n_kept")?,
        };
        match groups
            .iter_mut()
            .find(|g| g.0 == r[0] && g.1.to_bits() == alpha.to_bits() && g.2.to_bits() == quantile.to_bits())
        {
            Some(g) => g.3.push(m),
            None => groups.push((r[0].clone(), alpha, quantile, vec![m])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(label, alpha, quantile, per_seed)| {
            let column = |f: fn(&SeedMetrics) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
            MetricsReport {
                label,
                alpha,
                quantile,
                avg_cost: column(|m| m.avg_cost),
                avg_raw_cost: column(|m| m.avg_raw_cost),
                violation_ratio: column(|m| m.violation_ratio),
                violation_ratio_all: column(|m| m.violation_ratio_all),
                per_seed,
            }
        })
        .collect())
}

/// Mean and standard deviation rows, one per report.
pub fn write_aggregate(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let header: Vec<String> = [
        "loss",
        "alpha",
        "quantile",
        "n_seeds",
        "avg_cost_mean",
        "avg_cost_std",
        "violation_ratio_mean",
        "violation_ratio_std",
        "violation_ratio_all_mean",
        "violation_ratio_all_std",
        "avg_raw_cost_mean",
        "avg_raw_cost_std",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                fmt(r.alpha),
                fmt(r.quantile),
                r.per_seed.len().to_string(),
                fmt(r.avg_cost.mean),
                fmt(r.avg_cost.std),
                fmt(r.violation_ratio.mean),
                fmt(r.violation_ratio.std),
                fmt(r.violation_ratio_all.mean),
                fmt(r.violation_ratio_all.std),
                fmt(r.avg_raw_cost.mean),
                fmt(r.avg_raw_cost.std),
            ]
        })
        .collect();
    write_text(path, &csv_text(None, &header, &rows)?)
}

/// One point of a Q-function sweep over the first control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub u: f64,
    pub q: f64,
    pub dq: f64,
    pub q_converged: bool,
    pub qa: f64,
    pub dqa: f64,
}

pub fn write_sweep(points: &[SweepPoint], path: &Path) -> Result<()> {
    let header: Vec<String> = ["u0", "q", "dq_du", "q_converged", "q_gn", "dq_gn_du"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                fmt(p.u),
                fmt(p.q),
                fmt(p.dq),
                p.q_converged.to_string(),
                fmt(p.qa),
                fmt(p.dqa),
            ]
        })
        .collect();
    write_text(path, &csv_text(None, &header, &rows)?)
}
