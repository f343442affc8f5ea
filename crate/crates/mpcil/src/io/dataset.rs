use std::path::Path;

use mpcil_core::imitation::Sample;
use mpcil_core::ocp::OcpSpec;
use nalgebra::DVector;

use super::{csv_rows, csv_text, fmt, parse, read_text, write_text};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

fn preamble(spec: &OcpSpec) -> String {
    format!(
        "# mpcil dataset v{DATASET_VERSION} nx={} nu={} horizon={}",
        spec.nx(),
        spec.nu(),
        spec.horizon
    )
}

fn header(spec: &OcpSpec) -> Vec<String> {
    let (nx, nu, n) = (spec.nx(), spec.nu(), spec.horizon);
    let mut h: Vec<String> = (0..nx).map(|i| format!("x{i}")).collect();
    h.extend((0..nu).map(|i| format!("u_star{i}")));
    h.push("objective".into());
    for k in 0..=n {
        h.extend((0..nx).map(|i| format!("xs{k}_{i}")));
    }
    for k in 0..n {
        h.extend((0..nu).map(|i| format!("us{k}_{i}")));
    }
    h.push("step".into());
    h
}

/// One row per sample: state, expert control, objective, the expert
/// trajectory `x₀..x_N, u₀..u_{N−1}`, and the creation step.
pub fn write_dataset(spec: &OcpSpec, samples: &[Sample], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = samples
        .iter()
        .map(|s| {
            let mut r: Vec<String> = s.x.iter().chain(s.u_star.iter()).map(|v| fmt(*v)).collect();
            r.push(fmt(s.objective));
            r.extend(s.zeta.xs.iter().flat_map(|x| x.iter()).map(|v| fmt(*v)));
            r.extend(s.zeta.us.iter().flat_map(|u| u.iter()).map(|v| fmt(*v)));
            r.push(s.step.to_string());
            r
        })
        .collect();
    write_text(path, &csv_text(Some(&preamble(spec)), &header(spec), &rows)?)
}

pub fn read_dataset(spec: &OcpSpec, path: &Path) -> Result<Vec<Sample>> {
    let text = read_text(path)?;
    let first = text.lines().next().unwrap_or_default();
    if first != preamble(spec) {
        return Err(Error::format(path, 1, format!("expected '{}', found '{first}'", preamble(spec))));
    }
    let (head, rows) = csv_rows(path, &text, 1)?;
    if head != header(spec) {
        return Err(Error::format(path, 2, "column header does not match the problem dimensions"));
    }
    let (nx, nu, n) = (spec.nx(), spec.nu(), spec.horizon);
    rows.into_iter()
        .map(|(line, r)| {
            let vals: Vec<f64> = r[..r.len() - 1]
                .iter()
                .map(|f| parse(path, line, f, "number"))
                .collect::<Result<_>>()?;
            let step: usize = parse(path, line, &r[r.len() - 1], "step")?;
            let chunk = |off: usize, len: usize| DVector::from_column_slice(&vals[off..off + len]);
            let x = chunk(0, nx);
            let u = chunk(nx, nu);
            let objective = vals[nx + nu];
            let base = nx + nu + 1;
            let xs = (0..=n).map(|k| chunk(base + k * nx, nx)).collect();
            let ubase = base + (n + 1) * nx;
            let us = (0..n).map(|k| chunk(ubase + k * nu, nu)).collect();
            Sample::new(spec, x, u, objective, xs, us, step).map_err(|e| Error::format(path, line, e.to_string()))
        })
        .collect()
}
