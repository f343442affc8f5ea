use alloc::format;
use alloc::vec::Vec;
use nalgebra::DVector;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{residuals_of, zeros, KktBackend, QpSettings, QpSolution, QpStatus};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, max_abs};

/// Multipliers beyond this size mean the inequalities cannot be satisfied.
const DIVERGENCE: f64 = 1e12;
/// Interior residual below which an active-set polish is attempted.
const POLISH_START: f64 = 1e-6;
const POLISH_RHO: f64 = 1e4;
const POLISH_ITERS: usize = 20;

/// Guesses the active set from `μ > w` and solves the equality-constrained
/// problem on it by method-of-multipliers sweeps with a fixed penalty, in
/// increment form so the right-hand side is a residual. Returns `None` unless
/// the result is a KKT point within `tol`.
fn polish<P: KktBackend>(
    p: &P,
    v0: &[f64],
    lambda0: &[f64],
    w: &[f64],
    mu: &[f64],
    tol: f64,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, me, mi) = (p.n(), p.m_eq(), p.m_in());
    let active: Vec<bool> = (0..mi).map(|i| mu[i] > w[i]).collect();
    let d: Vec<f64> = active.iter().map(|&a| if a { POLISH_RHO } else { 0.0 }).collect();
    let factor = p.factor(&d, 0.0).or_else(|| p.factor(&d, 1e-12))?;
    let mut v = v0.to_vec();
    let mut lambda = lambda0.to_vec();
    let mut muh: Vec<f64> = (0..mi).map(|i| if active[i] { mu[i] } else { 0.0 }).collect();
    let mut r1 = zeros(n);
    let mut r2 = zeros(me);
    let mut cv = zeros(mi);
    let mut tmp = zeros(mi);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..POLISH_ITERS {
        // r1 = −(Hv + g + Aᵀλ + Cᵀ(μ̂ + ρ(Cv − d))) over the active rows
        p.in_mul(&v, &mut cv);
        for i in 0..mi {
            tmp[i] = if active[i] { muh[i] + POLISH_RHO * (cv[i] - p.d_in()[i]) } else { 0.0 };
        }
        p.hess_mul(&v, &mut r1);
        for (r, g) in r1.iter_mut().zip(p.grad()) {
            *r += g;
        }
        p.eq_tmul_add(&lambda, &mut r1);
        p.in_tmul_add(&tmp, &mut r1);
        r1.iter_mut().for_each(|x| *x = -*x);
        p.eq_mul(&v, &mut r2);
        for (r, b) in r2.iter_mut().zip(p.b_eq()) {
            *r = b - *r;
        }
        p.solve(&factor, &mut r1, &mut r2);
        for j in 0..n {
            v[j] += r1[j];
        }
        for j in 0..me {
            lambda[j] += r2[j];
        }
        p.in_mul(&v, &mut cv);
        for i in 0..mi {
            if active[i] {
                muh[i] += POLISH_RHO * (cv[i] - p.d_in()[i]);
            }
        }
        let res = residuals_of(p, &v, &lambda, &muh).max();
        if !res.is_finite() {
            return None;
        }
        if best.as_ref().is_none_or(|b| res < b.0) {
            best = Some((res, v.clone(), lambda.clone(), muh.clone()));
        }
        if res <= 0.01 * tol {
            break;
        }
    }
    best.filter(|b| b.0 <= tol).map(|(_, v, l, m)| (v, l, m))
}

fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for (xi, di) in x.iter().zip(dx) {
        if *di < 0.0 {
            alpha = alpha.min(-xi / di);
        }
    }
    alpha
}

fn finish<P: KktBackend>(p: &P, v: Vec<f64>, lambda: Vec<f64>, mu: Vec<f64>, status: QpStatus, iterations: usize) -> QpSolution {
    QpSolution {
        objective: p.objective(&v),
        primal: DVector::from_vec(v),
        lambda_eq: DVector::from_vec(lambda),
        mu_in: DVector::from_vec(mu),
        status,
        iterations,
    }
}

pub(crate) fn solve<P: KktBackend>(p: &P, s: &QpSettings, warm: Option<&QpSolution>) -> Result<QpSolution> {
    let (n, me, mi) = (p.n(), p.m_eq(), p.m_in());

    let mut v = match warm {
        Some(w) if w.primal.len() == n && all_finite(w.primal.as_slice()) => w.primal.as_slice().to_vec(),
        _ => zeros(n),
    };
    let mut lambda = zeros(me);
    let mut mu = alloc::vec![s.initial_dual; mi];
    let mut w = zeros(mi);
    let mut cv = zeros(mi);
    p.in_mul(&v, &mut cv);
    for i in 0..mi {
        w[i] = (p.d_in()[i] - cv[i]).max(s.initial_slack);
    }

    if !p.equalities_consistent() {
        return Ok(finish(p, v, lambda, mu, QpStatus::Infeasible, 0));
    }

    let mut rd = zeros(n);
    let mut re = zeros(me);
    let mut ri = zeros(mi);
    let mut d = zeros(mi);
    let mut rc = zeros(mi);
    let mut r1 = zeros(n);
    let mut r2 = zeros(me);
    let mut tmp = zeros(mi);
    let mut cdv = zeros(mi);
    let mut dw = zeros(mi);
    let mut dmu = zeros(mi);

    for iter in 0..s.max_iter {
        // Residuals at the current iterate.
        p.hess_mul(&v, &mut rd);
        for (r, g) in rd.iter_mut().zip(p.grad()) {
            *r += g;
        }
        p.eq_tmul_add(&lambda, &mut rd);
        p.in_tmul_add(&mu, &mut rd);
        p.eq_mul(&v, &mut re);
        for (r, b) in re.iter_mut().zip(p.b_eq()) {
            *r -= b;
        }
        p.in_mul(&v, &mut cv);
        for i in 0..mi {
            ri[i] = cv[i] + w[i] - p.d_in()[i];
        }
        let tau = if mi > 0 {
            w.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>() / mi as f64
        } else {
            0.0
        };
        let comp = w.iter().zip(&mu).fold(0.0f64, |m, (a, b)| m.max(a * b));

        if !all_finite(&rd) || !all_finite(&re) || !all_finite(&ri) {
            return Err(Error::SolverFailure(format!("qp: non-finite residual at iteration {iter}")));
        }
        if max_abs(&rd) <= s.tol && max_abs(&re) <= s.tol && max_abs(&ri) <= s.tol && comp <= s.tol {
            let res = residuals_of(p, &v, &lambda, &mu);
            if res.max() <= s.tol {
                return Ok(finish(p, v, lambda, mu, QpStatus::Optimal, iter));
            }
        }
        if mi > 0
            && max_abs(&rd) <= POLISH_START
            && max_abs(&re) <= POLISH_START
            && max_abs(&ri) <= POLISH_START
            && comp <= POLISH_START
        {
            if let Some((pv, pl, pm)) = polish(p, &v, &lambda, &w, &mu, s.tol) {
                return Ok(finish(p, pv, pl, pm, QpStatus::Optimal, iter));
            }
        }
        if max_abs(&mu) > DIVERGENCE {
            return Ok(finish(p, v, lambda, mu, QpStatus::Infeasible, iter));
        }

        for i in 0..mi {
            d[i] = mu[i] / w[i];
        }
        let factor = match p
            .factor(&d, 0.0)
            .or_else(|| p.factor(&d, s.regularization))
            .or_else(|| p.factor(&d, s.regularization * 1e3))
        {
            Some(f) => f,
            None => {
                log::debug!("qp: singular KKT system at iteration {iter}");
                // Keep the polished point when it improves on the interior iterate.
                let current = residuals_of(p, &v, &lambda, &mu).max();
                return Ok(match polish(p, &v, &lambda, &w, &mu, current) {
                    Some((pv, pl, pm)) => finish(p, pv, pl, pm, QpStatus::MaxIter, iter),
                    None => finish(p, v, lambda, mu, QpStatus::MaxIter, iter),
                });
            }
        };

        // Newton direction for complementarity target `rc`; fills r1 (dv), r2 (dλ), dw, dmu.
        let mut direction = |rc: &[f64], r1: &mut [f64], r2: &mut [f64], dw: &mut [f64], dmu: &mut [f64]| {
            for i in 0..mi {
                tmp[i] = d[i] * ri[i] - rc[i] / w[i];
            }
            for j in 0..n {
                r1[j] = -rd[j];
            }
            for x in tmp.iter_mut() {
                *x = -*x;
            }
            p.in_tmul_add(&tmp, r1);
            for j in 0..me {
                r2[j] = -re[j];
            }
            p.solve(&factor, r1, r2);
            p.in_mul(r1, &mut cdv);
            for i in 0..mi {
                dw[i] = -ri[i] - cdv[i];
                dmu[i] = d[i] * (cdv[i] + ri[i]) - rc[i] / w[i];
            }
        };

        let alpha = if mi > 0 {
            for i in 0..mi {
                rc[i] = w[i] * mu[i];
            }
            direction(&rc, &mut r1, &mut r2, &mut dw, &mut dmu);
            let a_aff = max_step(&w, &dw).min(max_step(&mu, &dmu)).min(1.0);
            let tau_aff = (0..mi)
                .map(|i| (w[i] + a_aff * dw[i]) * (mu[i] + a_aff * dmu[i]))
                .sum::<f64>()
                / mi as f64;
            let sigma = (tau_aff / tau).powi(3).min(1.0);
            for i in 0..mi {
                rc[i] = w[i] * mu[i] + dw[i] * dmu[i] - sigma * tau;
            }
            direction(&rc, &mut r1, &mut r2, &mut dw, &mut dmu);
            (s.fraction_to_boundary * max_step(&w, &dw).min(max_step(&mu, &dmu))).min(1.0)
        } else {
            direction(&rc, &mut r1, &mut r2, &mut dw, &mut dmu);
            1.0
        };

        if !(alpha > 1e-14) {
            break;
        }
        for j in 0..n {
            v[j] += alpha * r1[j];
        }
        for j in 0..me {
            lambda[j] += alpha * r2[j];
        }
        for i in 0..mi {
            w[i] += alpha * dw[i];
            mu[i] += alpha * dmu[i];
        }
    }
    let iters = s.max_iter;
    Ok(finish(p, v, lambda, mu, QpStatus::MaxIter, iters))
}
