//! Training runs on disk.

use std::path::{Path, PathBuf};

use mpcil_core::imitation::{LogEntry, TrainConfig, Trainer};
use mpcil_core::ocp::OcpSpec;
use mpcil_core::policy::MlpPolicy;

use crate::config::RunConfig;
use crate::error::Result;
use crate::io;

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.toml")
    }
    pub fn weights(&self) -> PathBuf {
        self.0.join("weights.txt")
    }
    pub fn log(&self) -> PathBuf {
        self.0.join("log.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.0.join("dataset.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint")
    }
}

/// `config` with its `[train]` section set to what `train` actually runs.
pub fn frozen(config: &RunConfig, train: &TrainConfig) -> RunConfig {
    let mut c = config.clone();
    c.train.loss = train.loss.name().into();
    c.train.seed = train.seed;
    c.train.depth = train.depth;
    c.train.width = train.width;
    c.train.lr = train.lr;
    c
}

/// Trains into `out`, checkpointing every `checkpoint_every` updates. With
/// `resume`, continues from `out/checkpoint` when it exists.
pub fn run_training(
    spec: &OcpSpec,
    config: &RunConfig,
    train: TrainConfig,
    out: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&LogEntry),
) -> Result<MlpPolicy> {
    let dir = RunDir(out.to_path_buf());
    let every = config.train.checkpoint_every;
    io::write_text(&dir.config(), &frozen(config, &train).to_toml())?;
    let mut trainer = if resume && dir.checkpoint().join("state.txt").exists() {
        let ckpt = io::load_checkpoint(spec, &dir.checkpoint())?;
        log::info!("resuming {} at update {}", out.display(), ckpt.update);
        Trainer::resume(spec, train, ckpt)?
    } else {
        Trainer::new(spec, train)?
    };
    while !trainer.finished() {
        let entry = trainer.step()?;
        progress(&entry);
        if every > 0 && entry.update % every == 0 && !trainer.finished() {
            io::save_checkpoint(spec, &trainer.checkpoint(), &dir.checkpoint())?;
        }
    }
    io::save_weights(trainer.policy(), &dir.weights())?;
    io::write_log(trainer.log(), &dir.log())?;
    io::write_dataset(spec, trainer.dataset(), &dir.dataset())?;
    let (policy, _, _) = trainer.into_parts();
    Ok(policy)
}

/// A finished run: its frozen config and weights.
#[derive(Debug, Clone)]
pub struct FinishedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub policy: MlpPolicy,
}

/// Finished runs directly below `root` (or `root` itself), sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<FinishedRun>> {
    let mut dirs = vec![root.to_path_buf()];
    if let Ok(entries) = std::fs::read_dir(root) {
        for e in entries.flatten() {
            if e.path().is_dir() {
                dirs.push(e.path());
            }
        }
    }
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let rd = RunDir(d.clone());
        if rd.weights().exists() && rd.config().exists() {
            out.push(FinishedRun {
                config: RunConfig::load(&rd.config())?,
                policy: io::load_weights(&rd.weights())?,
                dir: d,
            });
        }
    }
    Ok(out)
}
