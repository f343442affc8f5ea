use std::path::Path;

use mpcil_core::eval::RolloutRecord;

use super::{csv_text, fmt, write_text};
use crate::error::Result;

/// Per-step CSV of labeled rollouts, for trajectory plots.
pub fn write_rollouts(rollouts: &[(String, usize, &RolloutRecord)], path: &Path) -> Result<()> {
    let mut header: Vec<String> = ["label", "state_index", "step"].map(String::from).to_vec();
    let nx = rollouts.first().map_or(0, |(_, _, r)| r.states[0].len());
    let nu = rollouts
        .iter()
        .find_map(|(_, _, r)| r.controls.first())
        .map_or(0, |u| u.len());
    header.extend((0..nx).map(|i| format!("x{i}")));
    header.extend((0..nu).map(|i| format!("u{i}")));
    header.extend(["stage_cost", "penalty_cost"].map(String::from));
    let mut rows = Vec::new();
    for (label, index, rec) in rollouts {
        for (k, x) in rec.states.iter().enumerate() {
            let mut row = vec![label.clone(), index.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| fmt(*v)));
            match rec.controls.get(k) {
                Some(u) => {
                    row.extend(u.iter().map(|v| fmt(*v)));
                    row.push(fmt(rec.stage_costs[k]));
                    row.push(fmt(rec.penalty_costs[k]));
                }
                None => row.extend(std::iter::repeat_n(String::new(), nu + 2)),
            }
            rows.push(row);
        }
    }
    write_text(path, &csv_text(None, &header, &rows)?)
}
