//! Convex QP solver returning primal solution and multipliers.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ vᵀ H v + gᵀ v + constant
//! subject to  A_eq v = b_eq
//!             C_in v ≤ d_in          (multipliers μ ≥ 0)
//! ```
//!
//! and are solved by a primal-dual interior point method with Mehrotra
//! predictor-corrector steps. The Lagrangian is `f + λᵀ(A v − b) + μᵀ(C v − d)`.
//! Two linear-algebra backends share the same iteration: [`DenseQp`] factors the
//! full KKT matrix, [`StagedQp`] exploits block-diagonal Hessians with
//! equality rows coupling neighbouring stages (optimal control structure).

mod dense;
mod ipm;
mod staged;

pub use dense::DenseQp;
pub use staged::{EqGroup, QpStage, StagedQp};

use alloc::vec::Vec;
use nalgebra::DVector;

use crate::error::Result;
use crate::linalg::max_abs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Max-norm tolerance on every KKT residual.
    pub tol: f64,
    pub max_iter: usize,
    pub fraction_to_boundary: f64,
    pub initial_dual: f64,
    pub initial_slack: f64,
    /// Diagonal shift applied once when the KKT system is singular.
    pub regularization: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            fraction_to_boundary: 0.995,
            initial_dual: 1.0,
            initial_slack: 1.0,
            regularization: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
    }
}

/// Read access shared by both backends; the IPM and residual checks only
/// need products with the problem matrices.
pub(crate) trait QpData {
    fn n(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_in(&self) -> usize;
    fn grad(&self) -> &[f64];
    fn b_eq(&self) -> &[f64];
    fn d_in(&self) -> &[f64];
    fn constant(&self) -> f64;
    /// `out = H v`
    fn hess_mul(&self, v: &[f64], out: &mut [f64]);
    /// `out = A v`
    fn eq_mul(&self, v: &[f64], out: &mut [f64]);
    /// `out += Aᵀ y`
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]);
    /// `out = C v`
    fn in_mul(&self, v: &[f64], out: &mut [f64]);
    /// `out += Cᵀ y`
    fn in_tmul_add(&self, y: &[f64], out: &mut [f64]);

    fn objective(&self, v: &[f64]) -> f64 {
        let mut hv = alloc::vec![0.0; self.n()];
        self.hess_mul(v, &mut hv);
        let quad: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let lin: f64 = v.iter().zip(self.grad()).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.constant()
    }
}

/// Factorization of `[H + Cᵀ diag(d) C + δI, Aᵀ; A, −δ'I]` for the IPM.
pub(crate) trait KktBackend: QpData {
    type Factor;
    fn factor(&self, d: &[f64], reg: f64) -> Option<Self::Factor>;
    /// Overwrites `(r1, r2)` with the solution of the factored system.
    fn solve(&self, f: &Self::Factor, r1: &mut [f64], r2: &mut [f64]);
    /// Whether `A v = b` admits a solution at all.
    fn equalities_consistent(&self) -> bool {
        true
    }
}

pub(crate) fn residuals_of<P: QpData + ?Sized>(p: &P, v: &[f64], lambda: &[f64], mu: &[f64]) -> KktResiduals {
    let n = p.n();
    let mut rd = alloc::vec![0.0; n];
    p.hess_mul(v, &mut rd);
    for (r, g) in rd.iter_mut().zip(p.grad()) {
        *r += g;
    }
    p.eq_tmul_add(lambda, &mut rd);
    p.in_tmul_add(mu, &mut rd);

    let mut av = alloc::vec![0.0; p.m_eq()];
    p.eq_mul(v, &mut av);
    let primal_eq = av
        .iter()
        .zip(p.b_eq())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let mut cv = alloc::vec![0.0; p.m_in()];
    p.in_mul(v, &mut cv);
    let mut primal_in = 0.0f64;
    let mut complementarity = 0.0f64;
    for i in 0..cv.len() {
        let viol = cv[i] - p.d_in()[i];
        primal_in = primal_in.max(viol);
        complementarity = complementarity.max((mu[i] * viol).abs());
        // A negative multiplier is a stationarity defect of the sign constraint.
        complementarity = complementarity.max(-mu[i]);
    }
    KktResiduals {
        stationarity: max_abs(&rd),
        primal_eq,
        primal_in,
        complementarity,
    }
}

/// Solves a dense QP. Inconsistent equalities give [`QpStatus::Infeasible`].
pub fn solve_qp(qp: &DenseQp, settings: &QpSettings, warm: Option<&QpSolution>) -> Result<QpSolution> {
    qp.validate()?;
    ipm::solve(qp, settings, warm)
}

/// Max-norm KKT residuals of `sol` for `qp`.
pub fn kkt_residuals(qp: &DenseQp, sol: &QpSolution) -> KktResiduals {
    residuals_of(qp, sol.primal.as_slice(), sol.lambda_eq.as_slice(), sol.mu_in.as_slice())
}

impl StagedQp {
    pub fn solve(&self, settings: &QpSettings, warm: Option<&QpSolution>) -> Result<QpSolution> {
        ipm::solve(self, settings, warm)
    }

    pub fn kkt_residuals(&self, v: &[f64], lambda: &[f64], mu: &[f64]) -> KktResiduals {
        residuals_of(self, v, lambda, mu)
    }

    pub fn objective_at(&self, v: &[f64]) -> f64 {
        self.objective(v)
    }

    /// `H v + g`
    pub fn objective_gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut out = zeros(self.n());
        self.hess_mul(v, &mut out);
        for (o, g) in out.iter_mut().zip(self.grad()) {
            *o += g;
        }
        out
    }

    /// `C v − d`
    pub fn inequality_excess(&self, v: &[f64]) -> Vec<f64> {
        let mut out = zeros(self.m_in());
        self.in_mul(v, &mut out);
        for (o, d) in out.iter_mut().zip(self.d_in()) {
            *o -= d;
        }
        out
    }

    pub fn num_eq(&self) -> usize {
        self.m_eq()
    }

    pub fn num_in(&self) -> usize {
        self.m_in()
    }
}

pub(crate) fn zeros(n: usize) -> Vec<f64> {
    alloc::vec![0.0; n]
}
