use std::fs;
use std::path::Path;

use mpcil_core::imitation::{Checkpoint, LogEntry};
use mpcil_core::ocp::OcpSpec;
use mpcil_core::policy::{AdamState, MlpPolicy};

use super::{csv_rows, csv_text, fmt, load_weights, parse, read_dataset, read_text, save_weights, write_dataset, write_text};
use crate::error::{Error, Result};

const LOG_COLUMNS: [&str; 5] = ["update", "loss", "dataset_size", "beta", "skipped"];

pub fn write_log(log: &[LogEntry], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.update.to_string(),
                fmt(e.loss),
                e.dataset_size.to_string(),
                fmt(e.beta),
                e.skipped.to_string(),
            ]
        })
        .collect();
    write_text(path, &csv_text(None, &LOG_COLUMNS.map(String::from), &rows)?)
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = read_text(path)?;
    let (header, rows) = csv_rows(path, &text, 0)?;
    if header != LOG_COLUMNS {
        return Err(Error::format(path, 1, "unexpected log columns"));
    }
    rows.into_iter()
        .map(|(line, r)| {
            Ok(LogEntry {
                update: parse(path, line, &r[0], "update")?,
                loss: parse(path, line, &r[1], "loss")?,
                dataset_size: parse(path, line, &r[2], "dataset_size")?,
                beta: parse(path, line, &r[3], "beta")?,
                skipped: parse(path, line, &r[4], "skipped")?,
            })
        })
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(path: &Path, line: usize, s: &str) -> Result<[u8; 32]> {
    let bad = || Error::format(path, line, "rng seed must be 64 hex digits");
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Writes `dir/{state.txt, policy.txt, adam_m.txt, adam_v.txt, dataset.csv, log.csv}`.
/// The directory is assembled beside `dir` and swapped in at the end.
pub fn save_checkpoint(spec: &OcpSpec, ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".partial");
    let staging = Path::new(&staging);
    if staging.exists() {
        fs::remove_dir_all(staging).map_err(|e| Error::io(staging, e))?;
    }
    let a = &ckpt.adam;
    let state = format!(
        "checkpoint v1\nupdate {}\nrng_seed {}\nrng_stream {}\nrng_word_pos {}\nadam_lr {}\nadam_beta1 {}\nadam_beta2 {}\nadam_eps {}\nadam_step {}\n",
        ckpt.update,
        hex(&ckpt.rng_seed),
        ckpt.rng_stream,
        ckpt.rng_word_pos,
        fmt(a.lr),
        fmt(a.beta1),
        fmt(a.beta2),
        fmt(a.eps),
        a.step
    );
    write_text(&staging.join("state.txt"), &state)?;
    save_weights(&ckpt.policy, &staging.join("policy.txt"))?;
    // Moments share the weights' shapes, so they reuse the weights format.
    let mut moments = ckpt.policy.clone();
    moments.params = a.m.clone();
    save_weights(&moments, &staging.join("adam_m.txt"))?;
    moments.params = a.v.clone();
    save_weights(&moments, &staging.join("adam_v.txt"))?;
    write_dataset(spec, &ckpt.dataset, &staging.join("dataset.csv"))?;
    write_log(&ckpt.log, &staging.join("log.csv"))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(spec: &OcpSpec, dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("state.txt");
    let text = read_text(&path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some("checkpoint v1") {
        return Err(Error::format(&path, 1, "expected 'checkpoint v1'"));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (i, l) = lines
            .next()
            .ok_or_else(|| Error::format(&path, 0, format!("missing '{key}'")))?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok((i + 1, v.to_string())),
            _ => Err(Error::format(&path, i + 1, format!("expected '{key} <value>'"))),
        }
    };
    let num = |(line, v): (usize, String), what: &str| -> Result<f64> { parse(&path, line, &v, what) };
    let (l, v) = field("update")?;
    let update: usize = parse(&path, l, &v, "update")?;
    let (l, v) = field("rng_seed")?;
    let rng_seed = unhex(&path, l, &v)?;
    let (l, v) = field("rng_stream")?;
    let rng_stream: u64 = parse(&path, l, &v, "rng_stream")?;
    let (l, v) = field("rng_word_pos")?;
    let rng_word_pos: u128 = parse(&path, l, &v, "rng_word_pos")?;
    let lr = num(field("adam_lr")?, "adam_lr")?;
    let beta1 = num(field("adam_beta1")?, "adam_beta1")?;
    let beta2 = num(field("adam_beta2")?, "adam_beta2")?;
    let eps = num(field("adam_eps")?, "adam_eps")?;
    let (l, v) = field("adam_step")?;
    let step: u64 = parse(&path, l, &v, "adam_step")?;

    let policy: MlpPolicy = load_weights(&dir.join("policy.txt"))?;
    let m = load_weights(&dir.join("adam_m.txt"))?;
    let v = load_weights(&dir.join("adam_v.txt"))?;
    if m.widths() != policy.widths() || v.widths() != policy.widths() {
        return Err(Error::format(&dir.join("adam_m.txt"), 1, "moment shapes differ from the policy"));
    }
    Ok(Checkpoint {
        update,
        adam: AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m: m.params,
            v: v.params,
        },
        policy,
        dataset: read_dataset(spec, &dir.join("dataset.csv"))?,
        log: read_log(&dir.join("log.csv"))?,
        rng_seed,
        rng_stream,
        rng_word_pos,
    })
}
