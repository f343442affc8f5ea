//! Evaluation suite, grid search, gradient timing and Q sweeps.

use std::time::Instant;

use mpcil_core::eval::{best_cell, closed_loop_rollout, compute_metrics, test_states, GridCell, MetricsReport, RolloutRecord};
use mpcil_core::imitation::{batch_gradient, control_bounds, dagger_rollout, sample_initial_state, train, LossKind, Sample, TrainConfig};
use mpcil_core::ocp::{sqp_solve, MpcController, OcpSpec, SqpSettings};
use mpcil_core::policy::MlpPolicy;
use mpcil_core::qloss::{q_exact, q_gn, GnQTemplate};
use mpcil_core::qp::QpSettings;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalSection, GridSection, RunConfig};
use crate::error::{Error, Result};
use crate::io::SweepPoint;

pub const EXPERT_LABEL: &str = "expert";

/// Closed-loop rollouts of one policy from every state.
pub fn rollout_policy(spec: &OcpSpec, policy: &MlpPolicy, states: &[DVector<f64>], steps: usize) -> Result<Vec<RolloutRecord>> {
    states
        .iter()
        .map(|x0| Ok(closed_loop_rollout(spec, &mut &*policy, x0.as_slice(), steps)?))
        .collect()
}

/// Closed-loop rollouts of the MPC expert; each starts without a warm start.
pub fn rollout_expert(spec: &OcpSpec, settings: &SqpSettings, states: &[DVector<f64>], steps: usize) -> Result<Vec<RolloutRecord>> {
    states
        .iter()
        .map(|x0| {
            let mut mpc = MpcController::new(spec, *settings);
            Ok(closed_loop_rollout(spec, &mut mpc, x0.as_slice(), steps)?)
        })
        .collect()
}

/// Metrics of per-seed policies on a shared state set.
pub fn evaluate_policies(
    spec: &OcpSpec,
    label: &str,
    alpha: f64,
    quantile: f64,
    policies: &[(u64, MlpPolicy)],
    states: &[DVector<f64>],
    steps: usize,
) -> Result<MetricsReport> {
    let groups = policies
        .iter()
        .map(|(seed, p)| {
            let outcomes = rollout_policy(spec, p, states, steps)?.iter().map(RolloutRecord::outcome).collect();
            Ok((*seed, outcomes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compute_metrics(label, alpha, quantile, &groups)?)
}

pub fn evaluate_expert(
    spec: &OcpSpec,
    settings: &SqpSettings,
    alpha: f64,
    quantile: f64,
    states: &[DVector<f64>],
    steps: usize,
) -> Result<MetricsReport> {
    let outcomes = rollout_expert(spec, settings, states, steps)?.iter().map(RolloutRecord::outcome).collect();
    Ok(compute_metrics(EXPERT_LABEL, alpha, quantile, &[(0, outcomes)])?)
}

/// One report per (loss, α) plus an expert row per α, on `n_states` test
/// states shared by every loss and seed.
pub fn evaluate_suite(
    spec: &OcpSpec,
    policies: &[(LossKind, Vec<(u64, MlpPolicy)>)],
    eval: &EvalSection,
    expert: Option<&SqpSettings>,
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for (&alpha, &q) in eval.alphas.iter().zip(&eval.quantiles) {
        let settings = expert.copied().unwrap_or_default();
        let states = test_states(spec, alpha, eval.n_states, eval.seed, &settings)?;
        for (loss, runs) in policies {
            out.push(evaluate_policies(spec, loss.name(), alpha, q, runs, &states, eval.steps)?);
        }
        if let Some(s) = expert {
            out.push(evaluate_expert(spec, s, alpha, q, &states, eval.steps)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    /// Average rollout cost per seed.
    pub per_seed: Vec<f64>,
    /// Mean over seeds; `None` if the cell failed.
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub loss: LossKind,
    pub rows: Vec<GridRow>,
    pub best: Option<(GridCell, f64)>,
}

/// Trains every cell for every grid seed and scores it by the average
/// rollout cost on the grid's test states.
pub fn grid_search(
    spec: &OcpSpec,
    config: &RunConfig,
    loss: LossKind,
    progress: &mut dyn FnMut(&GridRow),
) -> Result<GridOutcome> {
    let grid: &GridSection = &config.grid;
    let states = test_states(spec, grid.alpha, grid.n_states, config.eval.seed, &config.solver.expert.to_core())?;
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let mut per_seed = Vec::new();
        let mut error = None;
        for &seed in &grid.seeds {
            let mut c = config.train_config()?;
            c.loss = loss;
            c.seed = seed;
            c.depth = cell.depth;
            c.width = cell.width;
            c.lr = cell.lr;
            let result = train(spec, c).map_err(Error::from).and_then(|(policy, _)| {
                evaluate_policies(spec, loss.name(), grid.alpha, grid.quantile, &[(seed, policy)], &states, config.eval.steps)
            });
            match result {
                Ok(r) => per_seed.push(r.avg_cost.mean),
                Err(e) => {
                    log::warn!("grid cell {cell:?} seed {seed} failed: {e}");
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let objective = error
            .is_none()
            .then(|| per_seed.iter().sum::<f64>() / per_seed.len() as f64);
        let row = GridRow {
            cell,
            per_seed,
            objective,
            error,
        };
        progress(&row);
        rows.push(row);
    }
    let scored: Vec<(GridCell, f64)> = rows.iter().filter_map(|r| r.objective.map(|o| (r.cell, o))).collect();
    Ok(GridOutcome {
        loss,
        best: best_cell(&scored),
        rows,
    })
}

/// Expert-labeled samples from `rollouts` rollouts with the expert in
/// control, with a Gauss-Newton template per sample.
pub fn bench_dataset(
    spec: &OcpSpec,
    config: &TrainConfig,
    rollouts: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<GnQTemplate>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lb, ub) = control_bounds(spec)?;
    let idle = MlpPolicy::zeros(&config.widths(spec), &lb, &ub)?;
    let mut samples = Vec::new();
    for _ in 0..rollouts {
        let (x0, sol) = sample_initial_state(&mut rng, config.alpha, spec, &config.expert, config.max_slack, config.max_draws)?;
        let data = dagger_rollout(spec, &idle, x0.as_slice(), Some(&sol), config.rollout_len, 1.0, &mut rng, &config.expert, 0)?;
        samples.extend(data.samples);
    }
    let templates = samples
        .iter()
        .map(|s| GnQTemplate::from_trajectory(spec, s.x.as_slice(), s.zeta.clone()))
        .collect::<mpcil_core::Result<Vec<_>>>()?;
    Ok((samples, templates))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedEntry {
    pub loss: LossKind,
    pub batches_per_second: f64,
    pub seconds: f64,
    pub skipped: usize,
}

/// Batches per second of the weight gradient for each loss, all on the same
/// sequence of minibatches. One untimed batch per loss warms caches.
pub fn bench_gradients(
    spec: &OcpSpec,
    policy: &MlpPolicy,
    samples: &[Sample],
    templates: &[GnQTemplate],
    config: &TrainConfig,
    batch_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<SpeedEntry>> {
    if samples.is_empty() || samples.len() != templates.len() {
        return Err(Error::Config("benchmark needs a non-empty dataset with one template per sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<Vec<usize>> = (0..iterations)
        .map(|_| (0..batch_size).map(|_| rng.random_range(0..samples.len())).collect())
        .collect();
    let mut out = Vec::new();
    for loss in LossKind::ALL {
        let run = |idx: &[usize]| -> Result<usize> {
            let s: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let t: Vec<Option<&GnQTemplate>> = idx.iter().map(|&i| Some(&templates[i])).collect();
            Ok(batch_gradient(loss, spec, policy, &s, &t, config)?.2)
        };
        run(&batches[0])?;
        let start = Instant::now();
        let mut skipped = 0;
        for b in &batches {
            skipped += run(b)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        out.push(SpeedEntry {
            loss,
            batches_per_second: iterations as f64 / seconds,
            seconds,
            skipped,
        });
    }
    Ok(out)
}

/// Exact and Gauss-Newton Q at `x0` for each control in `controls`, both
/// built from the expert solution at `x0`.
pub fn sweep_q(spec: &OcpSpec, x0: &[f64], controls: &[f64], sqp: &SqpSettings, qp: &QpSettings) -> Result<Vec<SweepPoint>> {
    let expert = sqp_solve(spec, x0, None, sqp)?;
    let template = GnQTemplate::from_trajectory(spec, x0, expert.traj.clone())?;
    controls
        .iter()
        .map(|&u| {
            let e = q_exact(spec, x0, &[u], Some(&expert), sqp)?;
            let a = q_gn(&template, &[u], qp)?;
            Ok(SweepPoint {
                u,
                q: e.value,
                dq: e.grad_u[0],
                q_converged: e.converged,
                qa: a.value,
                dqa: a.grad_u[0],
            })
        })
        .collect()
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
