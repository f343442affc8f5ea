//! Q-function evaluators used as imitation losses.
//!
//! `Q(x̄₀, ū₀)` is the optimal value of the OCP with `u₀ = ū₀` pinned and the
//! stage-0 soft rows removed; its gradient in `ū₀` is the multiplier of the
//! pin. `Q_a` is the same construction on the Gauss-Newton QP linearized at the
//! unpinned expert solution `ζ`, which makes it convex and piecewise quadratic
//! in `ū₀` and equal to `Q` at `ū₀ = u₀*`.

use alloc::format;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::ocp::{build_gn_qp, sqp_solve, sqp_solve_pinned, GnQp, OcpSolution, OcpSpec, PrimalTrajectory, SqpSettings, SqpStatus};
use crate::qp::{QpSettings, QpSolution, QpStatus};

#[derive(Debug, Clone, PartialEq)]
pub enum QSolution {
    Exact(OcpSolution),
    GaussNewton(QpSolution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEvaluation {
    pub value: f64,
    /// `∂value/∂ū₀`
    pub grad_u: DVector<f64>,
    /// Whether the underlying solve met its tolerance.
    pub converged: bool,
    pub solution: QSolution,
}

/// Exact Q-function value and gradient. `warm` may be the unpinned expert
/// solution at the same state; if the warm-started solve does not converge,
/// a cold start is tried and the better of the two is kept.
pub fn q_exact(
    spec: &OcpSpec,
    x0_bar: &[f64],
    u0_bar: &[f64],
    warm: Option<&OcpSolution>,
    settings: &SqpSettings,
) -> Result<QEvaluation> {
    let mut sol = sqp_solve_pinned(spec, x0_bar, u0_bar, warm, settings)?;
    if warm.is_some() && sol.status != SqpStatus::Optimal {
        if let Ok(cold) = sqp_solve_pinned(spec, x0_bar, u0_bar, None, settings) {
            let better = match (cold.status, sol.status) {
                (SqpStatus::Optimal, _) => true,
                (_, SqpStatus::Optimal) => false,
                _ => cold.kkt_inf < sol.kkt_inf,
            };
            if better {
                sol = cold;
            }
        }
    }
    let grad_u = sol
        .lambda_pin
        .clone()
        .ok_or_else(|| Error::SolverFailure("pinned solve returned no pin multiplier".into()))?;
    Ok(QEvaluation {
        value: sol.objective,
        grad_u,
        converged: sol.status == SqpStatus::Optimal,
        solution: QSolution::Exact(sol),
    })
}

/// Gauss-Newton QP around the expert solution at one state, reusable for any
/// pinned control at that state.
#[derive(Debug, Clone)]
pub struct GnQTemplate {
    pub zeta: PrimalTrajectory,
    pub x0_bar: DVector<f64>,
    pub expert_u0: DVector<f64>,
    qp: GnQp,
}

impl GnQTemplate {
    /// Builds the template from a known expert trajectory (only states and
    /// controls are read).
    pub fn from_trajectory(spec: &OcpSpec, x0_bar: &[f64], zeta: PrimalTrajectory) -> Result<Self> {
        if !all_finite(x0_bar) {
            return Err(Error::NonFiniteInput("gn_template"));
        }
        let expert_u0 = zeta
            .us
            .first()
            .cloned()
            .ok_or(Error::Empty("gn_template trajectory"))?;
        let qp = build_gn_qp(spec, &zeta, x0_bar, Some(expert_u0.as_slice()))?;
        Ok(Self {
            zeta,
            x0_bar: DVector::from_column_slice(x0_bar),
            expert_u0,
            qp,
        })
    }

    pub fn qp(&self) -> &GnQp {
        &self.qp
    }
}

/// Solves the expert OCP at `x0_bar` and linearizes around its solution.
pub fn gn_template(spec: &OcpSpec, x0_bar: &[f64], settings: &SqpSettings) -> Result<GnQTemplate> {
    let sol = sqp_solve(spec, x0_bar, None, settings)?;
    GnQTemplate::from_trajectory(spec, x0_bar, sol.traj)
}

/// Gauss-Newton Q-function value and gradient at `u0_bar`.
pub fn q_gn(template: &GnQTemplate, u0_bar: &[f64], settings: &QpSettings) -> Result<QEvaluation> {
    if !all_finite(u0_bar) {
        return Err(Error::NonFiniteInput("q_gn"));
    }
    let mut qp = template.qp.clone();
    qp.set_pin(u0_bar)?;
    let sol = qp.solve(settings)?;
    if sol.status == QpStatus::Infeasible {
        return Err(Error::SolverFailure(format!("q_gn: infeasible QP at u0 = {u0_bar:?}")));
    }
    let rows = qp.pin_rows().expect("template qp is pinned");
    Ok(QEvaluation {
        value: sol.objective,
        grad_u: DVector::from_column_slice(&sol.lambda_eq.as_slice()[rows]),
        converged: sol.status == QpStatus::Optimal,
        solution: QSolution::GaussNewton(sol),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_cartpole_ocp, CartPoleOcpConfig};
    use proptest::prelude::*;

    const FIG1: [f64; 4] = [0.8, 0.0, core::f64::consts::FRAC_PI_4, 0.0];

    fn spec() -> OcpSpec {
        build_cartpole_ocp(&CartPoleOcpConfig::default()).unwrap()
    }

    fn tight_qp() -> QpSettings {
        SqpSettings::tight().qp
    }

    #[test]
    fn interior_expert_control_has_zero_gradient() {
        let s = spec();
        let x0 = [0.2, -0.3, 0.1, 0.2];
        let expert = sqp_solve(&s, &x0, None, &SqpSettings::tight()).unwrap();
        let u = expert.u0()[0];
        assert!(u.abs() < 24.0);
        let q = q_exact(&s, &x0, &[u], Some(&expert), &SqpSettings::tight()).unwrap();
        assert!(q.converged);
        assert!(q.grad_u[0].abs() < 1e-7, "grad {}", q.grad_u[0]);
        assert!((q.value - expert.objective).abs() < 1e-9);
    }

    #[test]
    fn tilted_pole_q_shape() {
        let s = spec();
        let settings = SqpSettings::tight();
        let expert = sqp_solve(&s, &FIG1, None, &settings).unwrap();
        assert!((expert.u0()[0] + 25.0).abs() < 1e-4);
        let q = |u: f64| q_exact(&s, &FIG1, &[u], Some(&expert), &settings).unwrap();
        let (q15, qlo) = (q(15.0), q(-25.0));
        assert!(q15.converged && qlo.converged);
        assert!(q15.value > qlo.value);
        assert!(q15.grad_u[0] > 0.0);
        let values: alloc::vec::Vec<f64> = (0..=20).map(|i| q(-25.0 + 2.5 * i as f64).value).collect();
        assert!(values.windows(3).any(|w| w[0] - 2.0 * w[1] + w[2] < 0.0));
    }

    #[test]
    fn template_is_deterministic() {
        let s = spec();
        let a = gn_template(&s, &FIG1, &SqpSettings::default()).unwrap();
        let b = gn_template(&s, &FIG1, &SqpSettings::default()).unwrap();
        assert_eq!(a.zeta, b.zeta);
    }

    #[test]
    fn gn_touches_exact_at_expert_control() {
        let s = spec();
        for x0 in [FIG1, [0.2, -0.3, 0.1, 0.2], [-0.5, 0.8, -0.3, 0.4]] {
            let expert = sqp_solve(&s, &x0, None, &SqpSettings::tight()).unwrap();
            let t = GnQTemplate::from_trajectory(&s, &x0, expert.traj.clone()).unwrap();
            let qa = q_gn(&t, t.expert_u0.as_slice(), &tight_qp()).unwrap();
            let q = q_exact(&s, &x0, t.expert_u0.as_slice(), Some(&expert), &SqpSettings::tight()).unwrap();
            assert!((qa.value - q.value).abs() < 1e-6, "{} vs {}", qa.value, q.value);
        }
    }

    #[test]
    fn gn_gradient_matches_finite_differences() {
        let s = spec();
        let t = gn_template(&s, &[0.3, 0.5, -0.2, 0.1], &SqpSettings::tight()).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for u in [-20.0, -7.5, -1.0, 3.0, 11.0, 19.0] {
            let q = |v: f64| q_gn(&t, &[v], &tight_qp()).unwrap().value;
            let (f0, fp, fm) = (q(u), q(u + h), q(u - h));
            if ((fp - f0) / h - (f0 - fm) / h).abs() > 1e-3 {
                continue;
            }
            let g = q_gn(&t, &[u], &tight_qp()).unwrap().grad_u[0];
            let fd = (fp - fm) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-5 * (1.0 + g.abs()), "u {u}: {g} vs {fd}");
            checked += 1;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let s = spec();
        let t = gn_template(&s, &[0.0; 4], &SqpSettings::default()).unwrap();
        assert!(q_gn(&t, &[f64::NAN], &QpSettings::default()).is_err());
        assert!(q_exact(&s, &[0.0; 4], &[f64::INFINITY], None, &SqpSettings::default()).is_err());
    }

    #[test]
    fn warm_started_exact_q_needs_few_iterations() {
        use rand::{Rng, SeedableRng};
        let s = spec();
        let settings = SqpSettings::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let bound = [2.0, 4.0, core::f64::consts::FRAC_PI_3, 2.0];
        let mut iters = alloc::vec::Vec::new();
        while iters.len() < 60 {
            let x: alloc::vec::Vec<f64> = bound.iter().map(|b| rng.random_range(-0.3 * b..0.3 * b)).collect();
            let expert = sqp_solve(&s, &x, None, &settings).unwrap();
            if expert.status != SqpStatus::Optimal || expert.traj.max_slack() > 1e-6 {
                continue;
            }
            for _ in 0..3 {
                let q = q_exact(&s, &x, &[rng.random_range(-25.0..25.0)], Some(&expert), &settings).unwrap();
                assert!(q.converged);
                if let QSolution::Exact(sol) = q.solution {
                    iters.push(sol.sqp_iters);
                }
            }
        }
        iters.sort_unstable();
        assert!(iters[iters.len() / 2] <= 5, "{iters:?}");
        assert!(*iters.last().unwrap() <= 10, "{iters:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn gn_q_is_convex_and_minimized_at_expert(
            p in -0.5f64..0.5, th in -0.3f64..0.3, u1 in -25.0f64..25.0, u2 in -25.0f64..25.0,
        ) {
            let s = spec();
            let t = gn_template(&s, &[p, 0.0, th, 0.0], &SqpSettings::tight()).unwrap();
            let q = |v: f64| q_gn(&t, &[v], &tight_qp()).unwrap().value;
            let qm = q(0.5 * (u1 + u2));
            prop_assert!(qm <= 0.5 * (q(u1) + q(u2)) + 1e-8);
            let qs = q(t.expert_u0[0]);
            prop_assert!(q(u1) >= qs - 1e-8);
        }

        #[test]
        fn exact_gradient_matches_finite_differences(
            p in -0.5f64..0.5, th in -0.3f64..0.3, om in -0.5f64..0.5, u in -24.0f64..24.0,
        ) {
            let s = spec();
            let x0 = [p, 0.0, th, om];
            let settings = SqpSettings::tight();
            let expert = sqp_solve(&s, &x0, None, &settings).unwrap();
            let q = |v: f64| q_exact(&s, &x0, &[v], Some(&expert), &settings).unwrap();
            let h = 1e-4;
            let (e0, ep, em) = (q(u), q(u + h), q(u - h));
            prop_assume!(e0.converged && ep.converged && em.converged);
            prop_assume!(((ep.value - e0.value) / h - (e0.value - em.value) / h).abs() <= 1e-3);
            let fd = (ep.value - em.value) / (2.0 * h);
            let g = e0.grad_u[0];
            prop_assert!((g - fd).abs() <= 1e-4 * g.abs().max(1e-3), "{} vs {}", g, fd);
        }
    }
}
