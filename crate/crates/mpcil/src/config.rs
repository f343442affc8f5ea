//! TOML run configuration. Every key is optional; missing keys take the
//! cart-pole defaults.

use std::path::Path;

use mpcil_core::dynamics::CartPoleParams;
use mpcil_core::eval::GridCell;
use mpcil_core::imitation::{LossKind, TrainConfig};
use mpcil_core::ocp::{build_cartpole_ocp, CartPoleOcpConfig, OcpSpec, SqpSettings};
use mpcil_core::qp::QpSettings;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub eval: EvalSection,
    pub grid: GridSection,
    pub bench: BenchSection,
    /// Selected hyperparameters per loss, keyed by loss name.
    pub best: BestSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub dt: f64,
    pub horizon: usize,
    pub substeps: usize,
    pub pole_length: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub gravity: f64,
    pub state_bound: [f64; 4],
    pub control_bound: f64,
    pub state_weight: [f64; 4],
    pub control_weight: f64,
    pub path_slack_linear: [f64; 5],
    pub path_slack_quadratic: [f64; 5],
    pub terminal_slack_linear: [f64; 4],
    pub terminal_slack_quadratic: [f64; 4],
    pub dare_tol: f64,
    pub dare_max_iter: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        let c = CartPoleOcpConfig::default();
        Self {
            dt: c.dt,
            horizon: c.horizon,
            substeps: c.substeps,
            pole_length: c.params.length,
            pole_mass: c.params.pole_mass,
            cart_mass: c.params.cart_mass,
            gravity: c.params.gravity,
            state_bound: c.state_bound,
            control_bound: c.control_bound,
            state_weight: c.state_weight,
            control_weight: c.control_weight,
            path_slack_linear: c.path_slack_linear,
            path_slack_quadratic: c.path_slack_quadratic,
            terminal_slack_linear: c.terminal_slack_linear,
            terminal_slack_quadratic: c.terminal_slack_quadratic,
            dare_tol: c.dare_tol,
            dare_max_iter: c.dare_max_iter,
        }
    }
}

impl ProblemSection {
    pub fn to_core(&self) -> CartPoleOcpConfig {
        CartPoleOcpConfig {
            dt: self.dt,
            horizon: self.horizon,
            substeps: self.substeps,
            params: CartPoleParams {
                length: self.pole_length,
                pole_mass: self.pole_mass,
                cart_mass: self.cart_mass,
                gravity: self.gravity,
            },
            state_bound: self.state_bound,
            control_bound: self.control_bound,
            state_weight: self.state_weight,
            control_weight: self.control_weight,
            path_slack_linear: self.path_slack_linear,
            path_slack_quadratic: self.path_slack_quadratic,
            terminal_slack_linear: self.terminal_slack_linear,
            terminal_slack_quadratic: self.terminal_slack_quadratic,
            dare_tol: self.dare_tol,
            dare_max_iter: self.dare_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: String,
    pub updates: usize,
    pub collect_every: usize,
    pub rollout_len: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lr: f64,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    /// Only "he-uniform" is implemented.
    pub init: String,
    /// Linear 1 → 0 over the updates; the only schedule implemented.
    pub mixture: String,
    pub max_slack: f64,
    pub max_draws: usize,
    pub q_accept_kkt: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: t.loss.name().into(),
            updates: t.updates,
            collect_every: t.collect_every,
            rollout_len: t.rollout_len,
            batch_size: t.batch_size,
            alpha: t.alpha,
            lr: t.lr,
            depth: t.depth,
            width: t.width,
            seed: t.seed,
            init: "he-uniform".into(),
            mixture: "linear".into(),
            max_slack: t.max_slack,
            max_draws: t.max_draws,
            q_accept_kkt: t.q_accept_kkt,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSection {
    pub tol: f64,
    pub max_iter: usize,
    pub fraction_to_boundary: f64,
    pub initial_dual: f64,
    pub initial_slack: f64,
    pub regularization: f64,
}

impl Default for QpSection {
    fn default() -> Self {
        Self::from_core(&QpSettings::default())
    }
}

impl QpSection {
    pub fn from_core(s: &QpSettings) -> Self {
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            fraction_to_boundary: s.fraction_to_boundary,
            initial_dual: s.initial_dual,
            initial_slack: s.initial_slack,
            regularization: s.regularization,
        }
    }

    pub fn to_core(&self) -> QpSettings {
        QpSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            fraction_to_boundary: self.fraction_to_boundary,
            initial_dual: self.initial_dual,
            initial_slack: self.initial_slack,
            regularization: self.regularization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSection {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub merit_factor: f64,
    pub min_step: f64,
    pub qp: QpSection,
}

impl Default for SqpSection {
    fn default() -> Self {
        Self::from_core(&SqpSettings::default())
    }
}

impl SqpSection {
    pub fn from_core(s: &SqpSettings) -> Self {
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            armijo: s.armijo,
            max_backtracks: s.max_backtracks,
            merit_factor: s.merit_factor,
            min_step: s.min_step,
            qp: QpSection::from_core(&s.qp),
        }
    }

    pub fn to_core(&self) -> SqpSettings {
        SqpSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            qp: self.qp.to_core(),
            armijo: self.armijo,
            max_backtracks: self.max_backtracks,
            merit_factor: self.merit_factor,
            min_step: self.min_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub expert: SqpSection,
    pub q_exact: SqpSection,
    pub q_gn: QpSection,
}

impl Default for SolverSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            expert: SqpSection::from_core(&t.expert),
            q_exact: SqpSection::from_core(&t.q_exact),
            q_gn: QpSection::from_core(&t.q_gn),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    /// Quantile paired with each entry of `alphas`.
    pub quantiles: Vec<f64>,
    pub n_states: usize,
    pub seed: u64,
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.2, 0.3, 0.4],
            quantiles: vec![0.99, 0.99, 0.90],
            n_states: 2000,
            seed: 20_230_101,
            steps: 50,
        }
    }
}

impl EvalSection {
    /// Quantile configured for `alpha`, if any.
    pub fn quantile_for(&self, alpha: f64) -> Option<f64> {
        self.alphas.iter().position(|a| *a == alpha).and_then(|i| self.quantiles.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub seeds: Vec<u64>,
    pub n_states: usize,
    pub alpha: f64,
    pub quantile: f64,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub lrs: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            n_states: 300,
            alpha: 0.3,
            quantile: 0.99,
            depths: mpcil_core::eval::GRID_DEPTHS.to_vec(),
            widths: mpcil_core::eval::GRID_WIDTHS.to_vec(),
            lrs: mpcil_core::eval::GRID_LRS.to_vec(),
        }
    }
}

impl GridSection {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &depth in &self.depths {
            for &width in &self.widths {
                for &lr in &self.lrs {
                    out.push(GridCell { depth, width, lr });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: usize,
    pub iterations: usize,
    /// Expert rollouts collected to form the benchmark dataset.
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iterations: 300,
            rollouts: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    pub depth: usize,
    pub width: usize,
    pub lr: f64,
}

impl From<GridCell> for CellSection {
    fn from(c: GridCell) -> Self {
        Self {
            depth: c.depth,
            width: c.width,
            lr: c.lr,
        }
    }
}

impl From<CellSection> for GridCell {
    fn from(c: CellSection) -> Self {
        Self {
            depth: c.depth,
            width: c.width,
            lr: c.lr,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestSection {
    pub l2: Option<CellSection>,
    pub q: Option<CellSection>,
    pub qgn: Option<CellSection>,
}

impl BestSection {
    pub fn get(&self, loss: LossKind) -> Option<GridCell> {
        match loss {
            LossKind::L2 => self.l2,
            LossKind::QExact => self.q,
            LossKind::QGn => self.qgn,
        }
        .map(Into::into)
    }

    pub fn set(&mut self, loss: LossKind, cell: GridCell) {
        let slot = match loss {
            LossKind::L2 => &mut self.l2,
            LossKind::QExact => &mut self.q,
            LossKind::QGn => &mut self.qgn,
        };
        *slot = Some(cell.into());
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.to_core().validate()?;
        self.train_config()?.validate()?;
        if self.train.init != "he-uniform" {
            return Err(Error::Config(format!("unsupported init '{}'", self.train.init)));
        }
        if self.train.mixture != "linear" {
            return Err(Error::Config(format!("unsupported mixture schedule '{}'", self.train.mixture)));
        }
        if self.eval.alphas.len() != self.eval.quantiles.len() {
            return Err(Error::Config("eval.alphas and eval.quantiles must have the same length".into()));
        }
        if self.grid.seeds.is_empty() || self.bench.batch_size == 0 || self.bench.iterations == 0 {
            return Err(Error::Config("grid.seeds, bench.batch_size and bench.iterations must be non-empty".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<OcpSpec> {
        Ok(build_cartpole_ocp(&self.problem.to_core())?)
    }

    pub fn loss(&self) -> Result<LossKind> {
        Ok(self.train.loss.parse()?)
    }

    /// Training configuration of the `[train]` and `[solver]` sections.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            loss: self.loss()?,
            updates: t.updates,
            collect_every: t.collect_every,
            rollout_len: t.rollout_len,
            batch_size: t.batch_size,
            alpha: t.alpha,
            lr: t.lr,
            depth: t.depth,
            width: t.width,
            seed: t.seed,
            expert: self.solver.expert.to_core(),
            q_exact: self.solver.q_exact.to_core(),
            q_gn: self.solver.q_gn.to_core(),
            max_slack: t.max_slack,
            max_draws: t.max_draws,
            q_accept_kkt: t.q_accept_kkt,
        })
    }

    /// Training configuration for `loss`, using its selected cell when one
    /// is recorded under `[best]`.
    pub fn train_config_for(&self, loss: LossKind, seed: u64) -> Result<TrainConfig> {
        let mut c = self.train_config()?;
        c.loss = loss;
        c.seed = seed;
        if let Some(cell) = self.best.get(loss) {
            c.depth = cell.depth;
            c.width = cell.width;
            c.lr = cell.lr;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_core_problem() {
        let c = RunConfig::default();
        assert_eq!(c.problem.to_core(), CartPoleOcpConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.eval.quantile_for(0.4), Some(0.9));
    }

    #[test]
    fn toml_round_trips() {
        let mut c = RunConfig::default();
        c.best.set(LossKind::QGn, GridCell { depth: 2, width: 64, lr: 1e-3 });
        c.train.seed = 17;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = RunConfig::from_toml("[train]\nloss = \"qgn\"\nupdates = 10\n").unwrap();
        assert_eq!(c.loss().unwrap(), LossKind::QGn);
        assert_eq!(c.train.updates, 10);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nalpha = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nloss = \"l1\"\n").is_err());
        assert!(RunConfig::from_toml("[eval]\nalphas = [0.3]\nquantiles = []\n").is_err());
    }

    #[test]
    fn best_cell_overrides_network() {
        let mut c = RunConfig::default();
        c.best.set(LossKind::L2, GridCell { depth: 3, width: 256, lr: 1e-4 });
        let t = c.train_config_for(LossKind::L2, 4).unwrap();
        assert_eq!((t.depth, t.width, t.lr, t.seed), (3, 256, 1e-4, 4));
        let q = c.train_config_for(LossKind::QExact, 4).unwrap();
        assert_eq!((q.depth, q.width), (2, 128));
    }
}
