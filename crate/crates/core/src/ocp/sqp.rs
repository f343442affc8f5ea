use alloc::format;
use alloc::vec::Vec;
use nalgebra::DVector;

use super::{build_gn_qp, evaluate_cost, GnQp, Layout, OcpSolution, OcpSpec, PrimalTrajectory};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, max_abs};
use crate::qp::{QpSettings, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Optimal,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpSettings {
    /// Max-norm KKT tolerance.
    pub tol: f64,
    /// Maximum number of QP solves.
    pub max_iter: usize,
    pub qp: QpSettings,
    /// Sufficient-decrease constant of the merit line search.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Merit weight relative to the largest multiplier estimate.
    pub merit_factor: f64,
    /// Steps shorter than this (max-norm) end the iteration.
    pub min_step: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            qp: QpSettings {
                tol: 1e-9,
                ..QpSettings::default()
            },
            armijo: 1e-4,
            max_backtracks: 20,
            merit_factor: 10.0,
            min_step: 1e-10,
        }
    }
}

impl SqpSettings {
    /// Settings accurate enough for finite-difference checks of the optimal value.
    pub fn tight() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            qp: QpSettings {
                tol: 1e-12,
                max_iter: 200,
                ..QpSettings::default()
            },
            ..Self::default()
        }
    }
}

/// Solves the OCP from `x0_bar`.
pub fn sqp_solve(spec: &OcpSpec, x0_bar: &[f64], warm: Option<&OcpSolution>, settings: &SqpSettings) -> Result<OcpSolution> {
    solve(spec, x0_bar, None, warm, settings)
}

/// Solves the OCP from `x0_bar` with `u₀ = u0_bar`; the pin multiplier is the
/// derivative of the optimal value in `u0_bar`.
pub fn sqp_solve_pinned(
    spec: &OcpSpec,
    x0_bar: &[f64],
    u0_bar: &[f64],
    warm: Option<&OcpSolution>,
    settings: &SqpSettings,
) -> Result<OcpSolution> {
    solve(spec, x0_bar, Some(u0_bar), warm, settings)
}

/// Returns `(u₀*, solution)`.
pub fn mpc_policy(
    spec: &OcpSpec,
    x0_bar: &[f64],
    warm: Option<&OcpSolution>,
    settings: &SqpSettings,
) -> Result<(DVector<f64>, OcpSolution)> {
    let sol = sqp_solve(spec, x0_bar, warm, settings)?;
    Ok((sol.traj.us[0].clone(), sol))
}

/// Receding-horizon controller that warm-starts every solve from the previous
/// solution shifted by one stage.
#[derive(Debug, Clone)]
pub struct MpcController<'a> {
    pub spec: &'a OcpSpec,
    pub settings: SqpSettings,
    previous: Option<OcpSolution>,
}

impl<'a> MpcController<'a> {
    pub fn new(spec: &'a OcpSpec, settings: SqpSettings) -> Self {
        Self {
            spec,
            settings,
            previous: None,
        }
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn control(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        let warm = self.previous.as_ref().map(|p| shift_solution(self.spec, p));
        let (u, sol) = mpc_policy(self.spec, x, warm.as_ref(), &self.settings)?;
        self.previous = Some(sol);
        Ok(u)
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.previous.as_ref()
    }
}

/// Shifts a solution one stage forward, duplicating the last control and
/// simulating the final state under it.
pub fn shift_solution(spec: &OcpSpec, sol: &OcpSolution) -> OcpSolution {
    let n = spec.horizon;
    let t = &sol.traj;
    let mut xs: Vec<DVector<f64>> = t.xs[1..].to_vec();
    let mut us: Vec<DVector<f64>> = t.us[1..].to_vec();
    let u_last = t.us[n - 1].clone();
    let x_last = spec
        .dynamics
        .step(t.xs[n].as_slice(), u_last.as_slice())
        .map(DVector::from_vec)
        .unwrap_or_else(|_| t.xs[n].clone());
    xs.push(x_last);
    us.push(u_last);
    let mut slacks: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    for k in 0..n {
        if k + 1 < n && t.slacks[k + 1].len() == spec.path_bounds.num_slacks() {
            slacks.push(t.slacks[k + 1].clone());
        } else {
            let w: Vec<f64> = xs[k].iter().chain(us[k].iter()).copied().collect();
            slacks.push(spec.path_bounds.violation(&w));
        }
    }
    slacks.push(spec.terminal_bounds.violation(xs[n].as_slice()));

    let mut lambda_dyn: Vec<DVector<f64>> = sol.lambda_dyn[1..].to_vec();
    lambda_dyn.push(sol.lambda_dyn[n - 1].clone());
    let mut mu_path: Vec<DVector<f64>> = sol.mu_path[1..n].to_vec();
    mu_path.push(sol.mu_path[n - 1].clone());
    mu_path.push(sol.mu_path[n].clone());
    OcpSolution {
        traj: PrimalTrajectory { xs, us, slacks },
        lambda_x0: sol.lambda_dyn[0].clone(),
        mu_path,
        lambda_dyn,
        ..sol.clone()
    }
}

fn rollout_init(spec: &OcpSpec, layout: &Layout, x0: &[f64], pin: Option<&[f64]>) -> Result<PrimalTrajectory> {
    let n = spec.horizon;
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    xs.push(DVector::from_column_slice(x0));
    for k in 0..n {
        let u = match (k, pin) {
            (0, Some(p)) => DVector::from_column_slice(p),
            _ => DVector::zeros(spec.nu()),
        };
        let next = spec.dynamics.step(xs[k].as_slice(), u.as_slice())?;
        if !all_finite(&next) {
            return Err(Error::SolverFailure("sqp: initial rollout diverged".into()));
        }
        xs.push(DVector::from_vec(next));
        us.push(u);
    }
    let slacks = fit_slacks(spec, layout, &xs, &us, None);
    Ok(PrimalTrajectory { xs, us, slacks })
}

/// Slacks at least as large as the violations, so the soft rows hold.
fn fit_slacks(
    spec: &OcpSpec,
    layout: &Layout,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    hint: Option<&[DVector<f64>]>,
) -> Vec<DVector<f64>> {
    let n = spec.horizon;
    (0..=n)
        .map(|k| {
            if layout.slacks[k] == 0 {
                return DVector::zeros(0);
            }
            let viol = if k < n {
                let w: Vec<f64> = xs[k].iter().chain(us[k].iter()).copied().collect();
                spec.path_bounds.violation(&w)
            } else {
                spec.terminal_bounds.violation(xs[n].as_slice())
            };
            match hint.and_then(|h| h.get(k)) {
                Some(h) if h.len() == viol.len() => viol.zip_map(h, |a, b| a.max(b)),
                _ => viol,
            }
        })
        .collect()
}

fn warm_init(spec: &OcpSpec, layout: &Layout, x0: &[f64], pin: Option<&[f64]>, warm: &OcpSolution) -> Option<PrimalTrajectory> {
    let n = spec.horizon;
    let t = &warm.traj;
    if t.xs.len() != n + 1 || t.us.len() != n || t.slacks.len() != n + 1 {
        return None;
    }
    let mut xs = t.xs.clone();
    let mut us = t.us.clone();
    xs[0] = DVector::from_column_slice(x0);
    if let Some(p) = pin {
        us[0] = DVector::from_column_slice(p);
    }
    let flat: Vec<f64> = xs.iter().chain(us.iter()).flat_map(|v| v.iter().copied()).collect();
    if !all_finite(&flat) {
        return None;
    }
    let slacks = fit_slacks(spec, layout, &xs, &us, Some(&t.slacks));
    Some(PrimalTrajectory { xs, us, slacks })
}

/// ℓ1 norm of the constraint violation: equality defects plus positive parts
/// of the inequality rows. `None` if the dynamics cannot be evaluated.
fn infeasibility(spec: &OcpSpec, gn: &GnQp, v: &[f64], x0: &[f64], pin: Option<&[f64]>) -> Option<f64> {
    let l = &gn.layout;
    let mut total = 0.0;
    for i in 0..l.nx {
        total += (v[l.x_offset(0) + i] - x0[i]).abs();
    }
    if let Some(p) = pin {
        for i in 0..l.nu {
            total += (v[l.u_offset(0) + i] - p[i]).abs();
        }
    }
    for k in 0..l.horizon {
        let x = &v[l.x_offset(k)..l.x_offset(k) + l.nx];
        let u = &v[l.u_offset(k)..l.u_offset(k) + l.nu];
        let next = spec.dynamics.step(x, u).ok()?;
        for i in 0..l.nx {
            let defect = (v[l.x_offset(k + 1) + i] - next[i]).abs();
            // Defects at the rounding level of the integrator count as zero.
            if defect > 64.0 * f64::EPSILON * (1.0 + next[i].abs()) {
                total += defect;
            }
        }
    }
    let floor = 64.0 * f64::EPSILON * (1.0 + max_abs(v));
    total += gn.qp.inequality_excess(v).iter().filter(|e| **e > floor).sum::<f64>();
    total.is_finite().then_some(total)
}

struct Iterate {
    v: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    kkt: f64,
}

fn solve(
    spec: &OcpSpec,
    x0: &[f64],
    pin: Option<&[f64]>,
    warm: Option<&OcpSolution>,
    s: &SqpSettings,
) -> Result<OcpSolution> {
    solve_traced(spec, x0, pin, warm, s, &mut |_, _| {})
}

/// As [`solve`], reporting `(merit before, merit after)` for every accepted step.
pub(crate) fn solve_traced(
    spec: &OcpSpec,
    x0: &[f64],
    pin: Option<&[f64]>,
    warm: Option<&OcpSolution>,
    s: &SqpSettings,
    trace: &mut dyn FnMut(f64, f64),
) -> Result<OcpSolution> {
    if x0.len() != spec.nx() || pin.is_some_and(|p| p.len() != spec.nu()) {
        return Err(Error::Dimension(format!("sqp: x0 has {} entries, expected {}", x0.len(), spec.nx())));
    }
    if !all_finite(x0) || pin.is_some_and(|p| !all_finite(p)) {
        return Err(Error::NonFiniteInput("sqp_solve"));
    }
    let layout = Layout::new(spec, pin.is_some());
    let init = match warm.and_then(|w| warm_init(spec, &layout, x0, pin, w)) {
        Some(t) => t,
        None => rollout_init(spec, &layout, x0, pin)?,
    };
    let mut v = layout.pack(&init);
    let mut gn = build_gn_qp(spec, &init, x0, pin)?;
    let (mut lambda, mut mu) = warm
        .and_then(|w| gn.pack_multipliers(w))
        .unwrap_or_else(|| (alloc::vec![0.0; gn.qp.num_eq()], alloc::vec![0.0; gn.qp.num_in()]));

    let mut nu_merit = 0.0f64;
    let mut iters = 0;
    let mut best: Option<Iterate> = None;
    let mut stalled = false;
    let status = loop {
        let kkt = gn.qp.kkt_residuals(&v, &lambda, &mu).max();
        if !kkt.is_finite() {
            return Err(Error::SolverFailure(format!("sqp: non-finite KKT residual after {iters} iterations")));
        }
        if best.as_ref().is_none_or(|b| kkt < b.kkt) {
            best = Some(Iterate {
                v: v.clone(),
                lambda: lambda.clone(),
                mu: mu.clone(),
                kkt,
            });
        }
        if kkt <= s.tol {
            break SqpStatus::Optimal;
        }
        if stalled || iters >= s.max_iter {
            break SqpStatus::MaxIter;
        }

        let sol = gn.solve(&s.qp)?;
        iters += 1;
        log::trace!("sqp {iters}: kkt {kkt:e}, qp {:?} in {}", sol.status, sol.iterations);
        if sol.status == QpStatus::Infeasible {
            return Err(Error::SolverFailure(format!("sqp: subproblem infeasible at iteration {iters}")));
        }
        if !all_finite(sol.primal.as_slice()) {
            return Err(Error::SolverFailure(format!("sqp: non-finite step at iteration {iters}")));
        }
        let dv: Vec<f64> = sol.primal.iter().zip(&v).map(|(a, b)| a - b).collect();
        let qp_lambda = sol.lambda_eq.as_slice();
        let qp_mu = sol.mu_in.as_slice();

        if max_abs(&dv) <= s.min_step {
            v.copy_from_slice(sol.primal.as_slice());
            lambda.copy_from_slice(qp_lambda);
            mu.copy_from_slice(qp_mu);
            gn = build_gn_qp(spec, &layout.unpack(&v), x0, pin)?;
            stalled = true;
            continue;
        }

        // The soft-bound rows are linear and hold at every iterate, so their
        // penalty term vanishes along the search; only multipliers of rows
        // that can be violated bound the merit weight.
        let excess = gn.qp.inequality_excess(&v);
        let mu_violated = qp_mu
            .iter()
            .zip(&excess)
            .filter(|(_, e)| **e > 0.0)
            .fold(0.0f64, |m, (mu, _)| m.max(mu.abs()));
        nu_merit = nu_merit.max(s.merit_factor * max_abs(qp_lambda).max(mu_violated));
        let merit = |v: &[f64], gn: &GnQp| -> Option<f64> {
            let f = evaluate_cost(spec, &layout.unpack(v));
            let c = infeasibility(spec, gn, v, x0, pin)?;
            let m = f + nu_merit * c;
            m.is_finite().then_some(m)
        };
        let phi0 = merit(&v, &gn).ok_or_else(|| Error::SolverFailure("sqp: merit is not finite".into()))?;
        let grad = gn.qp.objective_gradient(&v);
        let c0 = infeasibility(spec, &gn, &v, x0, pin).unwrap_or(0.0);
        let slope = grad.iter().zip(&dv).map(|(g, d)| g * d).sum::<f64>() - nu_merit * c0;
        // Changes below this are rounding noise in the merit value.
        let noise = 1e-14 * (1.0 + phi0.abs());

        let mut alpha = 1.0;
        let mut trial = v.clone();
        let mut accepted = false;
        let mut next_gn = None;
        for _ in 0..=s.max_backtracks {
            for j in 0..v.len() {
                trial[j] = v[j] + alpha * dv[j];
            }
            if let Some(phi) = merit(&trial, &gn) {
                if phi <= phi0 + s.armijo * alpha * slope.min(0.0) || (phi - phi0).abs() <= noise {
                    trace(phi0, phi);
                    accepted = true;
                    break;
                }
            }
            if alpha == 1.0 {
                // A full step onto a KKT point is taken even when the merit
                // disagrees; near a solution the QP's own tolerance can make
                // the step a marginal ascent.
                let at_full = build_gn_qp(spec, &layout.unpack(&trial), x0, pin)?;
                if at_full.qp.kkt_residuals(&trial, qp_lambda, qp_mu).max() <= s.tol {
                    next_gn = Some(at_full);
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        log::trace!("sqp {iters}: alpha {alpha}, accepted {accepted}, merit weight {nu_merit:e}");
        if !accepted {
            log::debug!("sqp: line search failed at iteration {iters}");
            break SqpStatus::MaxIter;
        }
        v.copy_from_slice(&trial);
        for j in 0..lambda.len() {
            lambda[j] += alpha * (qp_lambda[j] - lambda[j]);
        }
        for j in 0..mu.len() {
            mu[j] += alpha * (qp_mu[j] - mu[j]);
        }
        gn = match next_gn {
            Some(g) => g,
            None => build_gn_qp(spec, &layout.unpack(&v), x0, pin)?,
        };
    };

    let (v, lambda, mu, kkt) = match status {
        SqpStatus::Optimal => {
            let kkt = gn.qp.kkt_residuals(&v, &lambda, &mu).max();
            (v, lambda, mu, kkt)
        }
        SqpStatus::MaxIter => {
            let b = best.expect("at least one iterate is recorded");
            if b.v != v {
                gn = build_gn_qp(spec, &layout.unpack(&b.v), x0, pin)?;
            }
            (b.v, b.lambda, b.mu, b.kkt)
        }
    };
    let traj = layout.unpack(&v);
    let (lambda_x0, lambda_pin, lambda_dyn, mu_path) = gn.split_multipliers(&lambda, &mu);
    Ok(OcpSolution {
        objective: evaluate_cost(spec, &traj),
        traj,
        lambda_x0,
        lambda_pin,
        lambda_dyn,
        mu_path,
        kkt_inf: kkt,
        sqp_iters: iters,
        status,
    })
}
