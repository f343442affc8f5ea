//! Closed-loop evaluation, robustified metrics and hyperparameter grids.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imitation::sample_initial_state;
use crate::linalg::all_finite;
use crate::ocp::{MpcController, OcpSpec, SqpSettings};
use crate::policy::MlpPolicy;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// State excursions above this count as violations.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Anything that maps a state to a control.
pub trait Controller {
    fn control(&mut self, x: &[f64]) -> Result<DVector<f64>>;
}

impl Controller for &MlpPolicy {
    fn control(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        self.forward(x)
    }
}

impl Controller for MpcController<'_> {
    fn control(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        MpcController::control(self, x)
    }
}

impl<F: FnMut(&[f64]) -> Result<DVector<f64>>> Controller for F {
    fn control(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Visited states; shorter than `steps + 1` if the rollout failed.
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// `‖L̄(x, u)‖²`, including the `1/N` scaling of the OCP.
    pub stage_costs: Vec<f64>,
    /// Slack penalty of the realized box violations of `(x, u)`.
    pub penalty_costs: Vec<f64>,
    pub violated: bool,
    /// The controller errored or the state became non-finite.
    pub failed: bool,
    /// `Σ stage + penalty`; infinite if failed.
    pub total_cost: f64,
    /// As `total_cost` with the stage terms multiplied by `N`.
    pub raw_cost: f64,
}

impl RolloutRecord {
    pub fn outcome(&self) -> RolloutOutcome {
        RolloutOutcome {
            cost: self.total_cost,
            raw_cost: self.raw_cost,
            violated: self.violated,
        }
    }
}

/// The part of a rollout the metrics look at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    pub cost: f64,
    pub raw_cost: f64,
    pub violated: bool,
}

fn state_violated(spec: &OcpSpec, x: &[f64]) -> bool {
    let (lb, ub) = (spec.path_bounds.lb(), spec.path_bounds.ub());
    x.iter()
        .enumerate()
        .any(|(i, v)| *v > ub[i] + VIOLATION_TOL || *v < lb[i] - VIOLATION_TOL)
}

/// Simulates `steps` steps of `controller` from `x0`.
pub fn closed_loop_rollout<C: Controller + ?Sized>(
    spec: &OcpSpec,
    controller: &mut C,
    x0: &[f64],
    steps: usize,
) -> Result<RolloutRecord> {
    if x0.len() != spec.nx() {
        return Err(Error::Dimension(alloc::format!("rollout: x0 has {} entries", x0.len())));
    }
    let horizon = spec.horizon as f64;
    let mut rec = RolloutRecord {
        states: alloc::vec![DVector::from_column_slice(x0)],
        controls: Vec::with_capacity(steps),
        stage_costs: Vec::with_capacity(steps),
        penalty_costs: Vec::with_capacity(steps),
        violated: state_violated(spec, x0),
        failed: !all_finite(x0),
        total_cost: 0.0,
        raw_cost: 0.0,
    };
    let mut w = Vec::with_capacity(spec.nx() + spec.nu());
    for _ in 0..steps {
        if rec.failed {
            break;
        }
        let x = rec.states.last().expect("non-empty").clone();
        let u = match controller.control(x.as_slice()) {
            Ok(u) if u.len() == spec.nu() && all_finite(u.as_slice()) => u,
            Ok(u) if u.len() != spec.nu() => {
                return Err(Error::Dimension(alloc::format!("rollout: controller returned {} controls", u.len())))
            }
            _ => {
                rec.failed = true;
                break;
            }
        };
        w.clear();
        w.extend(x.iter().chain(u.iter()).copied());
        let stage = spec.stage_cost(x.as_slice(), u.as_slice());
        let penalty = spec.path_bounds.penalty(spec.path_bounds.violation(&w).as_slice());
        rec.stage_costs.push(stage);
        rec.penalty_costs.push(penalty);
        rec.total_cost += stage + penalty;
        rec.raw_cost += horizon * stage + penalty;
        rec.controls.push(u.clone());
        match spec.dynamics.step(x.as_slice(), u.as_slice()) {
            Ok(next) if all_finite(&next) => {
                rec.violated |= state_violated(spec, &next);
                rec.states.push(DVector::from_vec(next));
            }
            _ => rec.failed = true,
        }
    }
    if rec.failed {
        rec.total_cost = f64::INFINITY;
        rec.raw_cost = f64::INFINITY;
    }
    Ok(rec)
}

/// Fixed set of filtered initial states drawn from `[−α·x̄, α·x̄]`, identical
/// for every caller using the same `seed`.
pub fn test_states(spec: &OcpSpec, alpha: f64, n: usize, seed: u64, settings: &SqpSettings) -> Result<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sample_initial_state(&mut rng, alpha, spec, settings, 1e-6, 10_000).map(|(x, _)| x))
        .collect()
}

/// Metrics of one seed after quantile filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub avg_cost: f64,
    /// Mean raw cost over the same kept rollouts.
    pub avg_raw_cost: f64,
    /// Over the rollouts kept by the quantile filter.
    pub violation_ratio: f64,
    /// Over all rollouts.
    pub violation_ratio_all: f64,
    pub n_rollouts: usize,
    pub n_kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub alpha: f64,
    pub quantile: f64,
    pub avg_cost: MeanStd,
    pub avg_raw_cost: MeanStd,
    pub violation_ratio: MeanStd,
    pub violation_ratio_all: MeanStd,
    pub per_seed: Vec<SeedMetrics>,
}

/// Nearest-rank empirical quantile of `values` (must be non-empty).
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The guard keeps e.g. 0.99·300 from rounding up to rank 298.
    let rank = (q * sorted.len() as f64 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per seed, keeps rollouts whose cost is at most the `q`-quantile, averages
/// cost and violation over them, then aggregates across seeds.
pub fn compute_metrics(label: &str, alpha: f64, q: f64, groups: &[(u64, Vec<RolloutOutcome>)]) -> Result<MetricsReport> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(alloc::format!("quantile must lie in (0, 1], got {q}")));
    }
    if groups.is_empty() || groups.iter().any(|(_, g)| g.is_empty()) {
        return Err(Error::Empty("metrics group"));
    }
    let per_seed: Vec<SeedMetrics> = groups
        .iter()
        .map(|(seed, group)| {
            let costs: Vec<f64> = group.iter().map(|o| o.cost).collect();
            let cut = nearest_rank(&costs, q);
            let kept: Vec<&RolloutOutcome> = group.iter().filter(|o| o.cost <= cut).collect();
            let ratio = |set: &mut dyn Iterator<Item = &RolloutOutcome>, n: usize| {
                set.filter(|o| o.violated).count() as f64 / n as f64
            };
            SeedMetrics {
                seed: *seed,
                avg_cost: kept.iter().map(|o| o.cost).sum::<f64>() / kept.len() as f64,
                avg_raw_cost: kept.iter().map(|o| o.raw_cost).sum::<f64>() / kept.len() as f64,
                violation_ratio: ratio(&mut kept.iter().copied(), kept.len()),
                violation_ratio_all: ratio(&mut group.iter(), group.len()),
                n_rollouts: group.len(),
                n_kept: kept.len(),
            }
        })
        .collect();
    let column = |f: fn(&SeedMetrics) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        label: label.into(),
        alpha,
        quantile: q,
        avg_cost: column(|m| m.avg_cost),
        avg_raw_cost: column(|m| m.avg_raw_cost),
        violation_ratio: column(|m| m.violation_ratio),
        violation_ratio_all: column(|m| m.violation_ratio_all),
        per_seed,
    })
}

/// One hyperparameter combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub depth: usize,
    pub width: usize,
    pub lr: f64,
}

pub const GRID_DEPTHS: [usize; 3] = [1, 2, 3];
pub const GRID_WIDTHS: [usize; 3] = [64, 128, 256];
pub const GRID_LRS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

/// The full depth × width × lr grid, each cell once.
pub fn grid_cells() -> Vec<GridCell> {
    let mut out = Vec::with_capacity(36);
    for depth in GRID_DEPTHS {
        for width in GRID_WIDTHS {
            for lr in GRID_LRS {
                out.push(GridCell { depth, width, lr });
            }
        }
    }
    out
}

/// Cell with the smallest finite objective; ties go to the smaller depth,
/// then the smaller width, then the larger learning rate.
pub fn best_cell(results: &[(GridCell, f64)]) -> Option<(GridCell, f64)> {
    results
        .iter()
        .filter(|(_, v)| v.is_finite())
        .min_by(|(a, va), (b, vb)| {
            va.total_cmp(vb)
                .then(a.depth.cmp(&b.depth))
                .then(a.width.cmp(&b.width))
                .then(b.lr.total_cmp(&a.lr))
        })
        .copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_cartpole_ocp, CartPoleOcpConfig};
    use proptest::prelude::*;

    fn spec() -> OcpSpec {
        build_cartpole_ocp(&CartPoleOcpConfig::default()).unwrap()
    }

    fn outcomes(costs: &[f64]) -> Vec<RolloutOutcome> {
        costs.iter().map(|c| RolloutOutcome { cost: *c, raw_cost: 2.0 * c, violated: false }).collect()
    }

    #[test]
    fn origin_stays_at_zero_cost() {
        let s = spec();
        let policy = MlpPolicy::zeros(&[4, 8, 1], &[-25.0], &[25.0]).unwrap();
        let rec = closed_loop_rollout(&s, &mut &policy, &[0.0; 4], 50).unwrap();
        assert_eq!(rec.total_cost, 0.0);
        assert!(!rec.violated && !rec.failed);
        assert_eq!((rec.states.len(), rec.controls.len()), (51, 50));
    }

    #[test]
    fn excursion_past_the_cart_bound_is_a_violation() {
        let s = spec();
        let policy = MlpPolicy::zeros(&[4, 1], &[-25.0], &[25.0]).unwrap();
        let rec = closed_loop_rollout(&s, &mut &policy, &[1.99, 1.0, 0.0, 0.0], 5).unwrap();
        assert!(rec.violated);
        assert!(rec.penalty_costs.iter().any(|p| *p > 0.0));
        let inside = closed_loop_rollout(&s, &mut &policy, &[1.0, 0.0, 0.0, 0.0], 5).unwrap();
        assert!(!inside.violated);
        assert!(inside.penalty_costs.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn costs_match_hand_evaluation() {
        // Independent evaluation from the problem constants.
        let c = CartPoleOcpConfig::default();
        let s = spec();
        let mut k = 0;
        let mut ctrl = |_: &[f64]| {
            k += 1;
            Ok(DVector::from_element(1, if k % 2 == 0 { 3.0 } else { -2.0 }))
        };
        let rec = closed_loop_rollout(&s, &mut ctrl, &[1.95, 2.0, 0.3, -0.5], 6).unwrap();
        let mut total = 0.0;
        let mut raw = 0.0;
        for (x, u) in rec.states.iter().zip(&rec.controls) {
            let quad: f64 = (0..4).map(|i| c.state_weight[i] * x[i] * x[i]).sum::<f64>() + c.control_weight * u[0] * u[0];
            let mut pen = 0.0;
            for i in 0..4 {
                let v = (x[i].abs() - c.state_bound[i]).max(0.0);
                pen += c.dt * (c.path_slack_linear[i] * v + c.path_slack_quadratic[i] * v * v);
            }
            total += quad / c.horizon as f64 + pen;
            raw += quad + pen;
        }
        assert!((rec.total_cost - total).abs() <= 1e-12 * total);
        assert!((rec.raw_cost - raw).abs() <= 1e-12 * raw);
        assert!(rec.violated);
    }

    #[test]
    fn failing_controller_gives_infinite_cost() {
        let s = spec();
        let mut nan = |_: &[f64]| Ok(DVector::from_element(1, f64::NAN));
        let rec = closed_loop_rollout(&s, &mut nan, &[0.1, 0.0, 0.0, 0.0], 10).unwrap();
        assert!(rec.failed && rec.total_cost.is_infinite());
        let mut err = |_: &[f64]| Err(Error::SolverFailure("boom".into()));
        assert!(closed_loop_rollout(&s, &mut err, &[0.0; 4], 3).unwrap().failed);
        let mut wide = |_: &[f64]| Ok(DVector::zeros(2));
        assert!(closed_loop_rollout(&s, &mut wide, &[0.0; 4], 3).is_err());
    }

    #[test]
    fn expert_keeps_filtered_states_feasible() {
        let s = spec();
        let settings = SqpSettings::default();
        for x0 in test_states(&s, 0.3, 10, 3, &settings).unwrap() {
            let mut mpc = MpcController::new(&s, settings);
            let rec = closed_loop_rollout(&s, &mut mpc, x0.as_slice(), 50).unwrap();
            assert!(!rec.violated && !rec.failed);
        }
    }

    #[test]
    fn test_states_are_reproducible() {
        let s = spec();
        let a = test_states(&s, 0.3, 4, 9, &SqpSettings::default()).unwrap();
        assert_eq!(a, test_states(&s, 0.3, 4, 9, &SqpSettings::default()).unwrap());
        assert_ne!(a, test_states(&s, 0.3, 4, 10, &SqpSettings::default()).unwrap());
    }

    #[test]
    fn metric_examples() {
        let equal = compute_metrics("x", 0.3, 0.99, &[(0, outcomes(&[2.5; 7]))]).unwrap();
        assert_eq!((equal.avg_cost.mean, equal.violation_ratio.mean), (2.5, 0.0));

        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        let r = compute_metrics("x", 0.3, 0.9, &[(0, outcomes(&ten))]).unwrap();
        assert_eq!(r.avg_cost.mean, 5.0);
        assert_eq!(r.avg_raw_cost.mean, 10.0);
        assert_eq!(r.per_seed[0].n_kept, 9);

        let mut all = outcomes(&ten);
        all[9].violated = true;
        all[0].violated = true;
        let r = compute_metrics("x", 0.3, 1.0, &[(0, all.clone())]).unwrap();
        assert_eq!((r.avg_cost.mean, r.violation_ratio.mean), (5.5, 0.2));
        let r = compute_metrics("x", 0.3, 0.9, &[(0, all)]).unwrap();
        assert_eq!((r.violation_ratio.mean, r.violation_ratio_all.mean), (1.0 / 9.0, 0.2));
    }

    #[test]
    fn nearest_rank_counts() {
        let v: Vec<f64> = (1..=300).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.99), 297.0);
        assert_eq!(nearest_rank(&v, 1.0), 300.0);
        assert_eq!(nearest_rank(&v[..7], 0.9), 7.0);
        assert_eq!(nearest_rank(&[4.0, 1.0], 0.01), 1.0);
    }

    #[test]
    fn seed_aggregation_uses_sample_std() {
        let r = compute_metrics("x", 0.3, 1.0, &[(0, outcomes(&[1.0])), (1, outcomes(&[3.0]))]).unwrap();
        assert_eq!(r.avg_cost.mean, 2.0);
        assert!((r.avg_cost.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn failed_rollouts_are_filtered_by_the_quantile() {
        let mut costs: Vec<f64> = (1..=99).map(f64::from).collect();
        costs.push(f64::INFINITY);
        let r = compute_metrics("x", 0.3, 0.99, &[(0, outcomes(&costs))]).unwrap();
        assert_eq!(r.avg_cost.mean, 50.0);
    }

    #[test]
    fn metrics_reject_bad_input() {
        assert!(compute_metrics("x", 0.3, 0.0, &[(0, outcomes(&[1.0]))]).is_err());
        assert!(compute_metrics("x", 0.3, 0.5, &[]).is_err());
        assert!(compute_metrics("x", 0.3, 0.5, &[(0, Vec::new())]).is_err());
    }

    #[test]
    fn grid_has_each_cell_once() {
        let cells = grid_cells();
        assert_eq!(cells.len(), 36);
        for (i, a) in cells.iter().enumerate() {
            assert!(cells[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn best_cell_breaks_ties() {
        let c = |depth, width, lr| GridCell { depth, width, lr };
        let results = [
            (c(2, 64, 1e-3), 1.0),
            (c(1, 128, 1e-3), 1.0),
            (c(1, 64, 1e-4), 1.0),
            (c(1, 64, 1e-3), 1.0),
            (c(3, 256, 1e-2), f64::NAN),
        ];
        assert_eq!(best_cell(&results).unwrap().0, c(1, 64, 1e-3));
        assert_eq!(best_cell(&[(c(3, 256, 1e-5), 0.5), (c(1, 64, 1e-2), 0.6)]).unwrap().0, c(3, 256, 1e-5));
        assert!(best_cell(&[(c(1, 64, 1e-2), f64::INFINITY)]).is_none());
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            costs in proptest::collection::vec((0.0f64..10.0, any::<bool>()), 1..40),
            q in 0.05f64..1.0,
            rot in 0usize..40,
        ) {
            let a: Vec<RolloutOutcome> = costs.iter().map(|(c, v)| RolloutOutcome { cost: *c, raw_cost: *c, violated: *v }).collect();
            let mut b = a.clone();
            b.reverse();
            let k = rot % b.len();
            b.rotate_left(k);
            let ra = compute_metrics("x", 0.3, q, &[(0, a)]).unwrap();
            let rb = compute_metrics("x", 0.3, q, &[(0, b)]).unwrap();
            prop_assert_eq!(ra.violation_ratio.mean, rb.violation_ratio.mean);
            prop_assert!((ra.avg_cost.mean - rb.avg_cost.mean).abs() <= 1e-12 * ra.avg_cost.mean.max(1.0));
            prop_assert!((0.0..=1.0).contains(&ra.violation_ratio.mean));
        }

        #[test]
        fn best_cell_is_an_argmin(values in proptest::collection::vec(0.0f64..5.0, 36)) {
            let results: Vec<(GridCell, f64)> = grid_cells().into_iter().zip(values).collect();
            let (_, best) = best_cell(&results).unwrap();
            prop_assert!(results.iter().all(|(_, v)| best <= *v));
        }
    }
}
