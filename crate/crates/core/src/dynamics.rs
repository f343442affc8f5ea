//! Continuous-time models, RK4 discretization with exact step sensitivities,
//! the cart-pole model and an iterative DARE solver for terminal weights.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, max_abs_matrix};

/// A continuous-time model `ẋ = f(x, u)`.
pub trait ContinuousModel: fmt::Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Writes `f(x, u)` into `dx`.
    fn ode(&self, x: &[f64], u: &[f64], dx: &mut [f64]);

    /// Analytic `(∂f/∂x, ∂f/∂u)` when the model provides them.
    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    /// Pole length (m).
    pub length: f64,
    /// Pole mass (kg).
    pub pole_mass: f64,
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            length: 0.8,
            pole_mass: 0.1,
            cart_mass: 1.0,
            gravity: 9.81,
        }
    }
}

/// Frictionless cart-pole with state `(p, v, θ, ω)` and scalar force `u`.
#[derive(Debug, Clone)]
pub struct CartPole {
    params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self> {
        let CartPoleParams {
            length,
            pole_mass,
            cart_mass,
            gravity,
        } = params;
        if !(length > 0.0) || !(pole_mass > 0.0) || !(cart_mass > 0.0) {
            return Err(Error::InvalidModel(format!(
                "masses and length must be positive (l={length}, m={pole_mass}, M={cart_mass})"
            )));
        }
        if !gravity.is_finite() {
            return Err(Error::InvalidModel(format!("gravity must be finite, got {gravity}")));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }
}

impl ContinuousModel for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn ode(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let CartPoleParams {
            length: l,
            pole_mass: m,
            cart_mass: big_m,
            gravity: g,
        } = self.params;
        let (v, theta, omega, f) = (x[1], x[2], x[3], u[0]);
        let (s, c) = theta.sin_cos();
        let den = big_m + m - m * c * c;
        dx[0] = v;
        dx[1] = (-m * l * s * omega * omega + m * g * c * s + f) / den;
        dx[2] = omega;
        dx[3] = (-m * l * c * s * omega * omega + (big_m + m) * g * s + f * c) / (l * den);
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let CartPoleParams {
            length: l,
            pole_mass: m,
            cart_mass: big_m,
            gravity: g,
        } = self.params;
        let (theta, omega, f) = (x[2], x[3], u[0]);
        let (s, c) = theta.sin_cos();
        let w2 = omega * omega;
        let den = big_m + m - m * c * c;
        let den_th = 2.0 * m * c * s;

        let num_v = -m * l * s * w2 + m * g * c * s + f;
        let num_v_th = -m * l * c * w2 + m * g * (c * c - s * s);
        let num_v_om = -2.0 * m * l * s * omega;

        let num_w = -m * l * c * s * w2 + (big_m + m) * g * s + f * c;
        let num_w_th = -m * l * (c * c - s * s) * w2 + (big_m + m) * g * c - f * s;
        let num_w_om = -2.0 * m * l * c * s * omega;

        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(1, 2)] = (num_v_th * den - num_v * den_th) / (den * den);
        a[(1, 3)] = num_v_om / den;
        a[(2, 3)] = 1.0;
        a[(3, 2)] = (num_w_th * den - num_w * den_th) / (l * den * den);
        a[(3, 3)] = num_w_om / (l * den);

        let mut b = DMatrix::zeros(4, 1);
        b[(1, 0)] = 1.0 / den;
        b[(3, 0)] = c / (l * den);
        Some((a, b))
    }
}

/// Convenience wrapper returning the cart-pole vector field as a `Vec`.
pub fn cartpole_ode(x: &[f64; 4], u: f64, params: &CartPoleParams) -> Result<[f64; 4]> {
    let model = CartPole::new(*params)?;
    let mut dx = [0.0; 4];
    model.ode(x, &[u], &mut dx);
    Ok(dx)
}

/// `ẋ = Λ x + B u` with constant matrices; handy for linear-quadratic tests.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ContinuousModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn ode(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        for i in 0..self.a.nrows() {
            let mut s = 0.0;
            for j in 0..self.a.ncols() {
                s += self.a[(i, j)] * x[j];
            }
            for j in 0..self.b.ncols() {
                s += self.b[(i, j)] * u[j];
            }
            dx[i] = s;
        }
    }

    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// First-order model of one discrete step: `x⁺ ≈ c + A (x − x̃) + B (u − ũ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `f(x̃, ũ)` at the linearization point.
    pub c: DVector<f64>,
}

/// Zero-order-hold RK4 discretization of a continuous model.
#[derive(Debug, Clone)]
pub struct DiscreteDynamics {
    pub model: Arc<dyn ContinuousModel>,
    pub dt: f64,
    pub substeps: usize,
}

impl DiscreteDynamics {
    pub fn new(model: Arc<dyn ContinuousModel>, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidModel(format!("dt must be positive, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::InvalidModel("substeps must be at least 1".into()));
        }
        Ok(Self {
            model,
            dt,
            substeps,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    fn check_input(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "step expects ({}, {}), got ({}, {})",
                self.state_dim(),
                self.control_dim(),
                x.len(),
                u.len()
            )));
        }
        if !all_finite(x) || !all_finite(u) {
            return Err(Error::NonFiniteInput("rk4_step"));
        }
        Ok(())
    }

    /// One shooting interval of classical RK4 (`substeps` stages of `dt/substeps`).
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, u)?;
        Ok(self.step_unchecked(x, u))
    }

    fn step_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = x.len();
        let h = self.dt / self.substeps as f64;
        let mut cur = x.to_vec();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for _ in 0..self.substeps {
            self.model.ode(&cur, u, &mut k1);
            for i in 0..n {
                tmp[i] = cur[i] + 0.5 * h * k1[i];
            }
            self.model.ode(&tmp, u, &mut k2);
            for i in 0..n {
                tmp[i] = cur[i] + 0.5 * h * k2[i];
            }
            self.model.ode(&tmp, u, &mut k3);
            for i in 0..n {
                tmp[i] = cur[i] + h * k3[i];
            }
            self.model.ode(&tmp, u, &mut k4);
            for i in 0..n {
                cur[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        cur
    }

    /// Exact Jacobians of the discrete step map. Propagated through the RK4
    /// stages when the model has analytic Jacobians, central differences on
    /// the step map otherwise.
    pub fn linearize(&self, x: &[f64], u: &[f64]) -> Result<LinearizedStep> {
        self.check_input(x, u)?;
        if self.model.jacobians(x, u).is_some() {
            Ok(self.linearize_analytic(x, u))
        } else {
            Ok(self.linearize_fd(x, u))
        }
    }

    fn linearize_analytic(&self, x: &[f64], u: &[f64]) -> LinearizedStep {
        let nx = x.len();
        let nu = u.len();
        let h = self.dt / self.substeps as f64;
        let jac = |xs: &[f64]| self.model.jacobians(xs, u).expect("model advertised jacobians");
        let eye = DMatrix::<f64>::identity(nx, nx);

        let mut cur = DVector::from_column_slice(x);
        let mut phi_x = eye.clone();
        let mut phi_u = DMatrix::<f64>::zeros(nx, nu);
        let mut k = [
            DVector::zeros(nx),
            DVector::zeros(nx),
            DVector::zeros(nx),
            DVector::zeros(nx),
        ];
        for _ in 0..self.substeps {
            // Sensitivities of each stage value w.r.t. the substep start state and control.
            let mut dk_dx: [DMatrix<f64>; 4] = Default::default();
            let mut dk_du: [DMatrix<f64>; 4] = Default::default();
            let coeff = [0.0, 0.5 * h, 0.5 * h, h];
            for s in 0..4 {
                let (stage_x, dsx, dsu) = if s == 0 {
                    (cur.clone(), eye.clone(), DMatrix::zeros(nx, nu))
                } else {
                    (
                        &cur + &k[s - 1] * coeff[s],
                        &eye + &dk_dx[s - 1] * coeff[s],
                        &dk_du[s - 1] * coeff[s],
                    )
                };
                let mut dx = vec![0.0; nx];
                self.model.ode(stage_x.as_slice(), u, &mut dx);
                k[s] = DVector::from_vec(dx);
                let (jx, ju) = jac(stage_x.as_slice());
                dk_dx[s] = &jx * dsx;
                dk_du[s] = &jx * dsu + ju;
            }
            let w = [1.0, 2.0, 2.0, 1.0];
            let mut step_x = eye.clone();
            let mut step_u = DMatrix::zeros(nx, nu);
            for s in 0..4 {
                cur += &k[s] * (h / 6.0 * w[s]);
                step_x += &dk_dx[s] * (h / 6.0 * w[s]);
                step_u += &dk_du[s] * (h / 6.0 * w[s]);
            }
            phi_u = &step_x * &phi_u + step_u;
            phi_x = step_x * phi_x;
        }
        LinearizedStep {
            a: phi_x,
            b: phi_u,
            c: cur,
        }
    }

    fn linearize_fd(&self, x: &[f64], u: &[f64]) -> LinearizedStep {
        let nx = x.len();
        let nu = u.len();
        let c = DVector::from_vec(self.step_unchecked(x, u));
        let eps = f64::EPSILON.sqrt();
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        let mut xp = x.to_vec();
        for j in 0..nx {
            let hj = eps * (1.0 + x[j].abs());
            xp[j] = x[j] + hj;
            let fp = self.step_unchecked(&xp, u);
            xp[j] = x[j] - hj;
            let fm = self.step_unchecked(&xp, u);
            xp[j] = x[j];
            for i in 0..nx {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * hj);
            }
        }
        let mut up = u.to_vec();
        for j in 0..nu {
            let hj = eps * (1.0 + u[j].abs());
            up[j] = u[j] + hj;
            let fp = self.step_unchecked(x, &up);
            up[j] = u[j] - hj;
            let fm = self.step_unchecked(x, &up);
            up[j] = u[j];
            for i in 0..nx {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * hj);
            }
        }
        LinearizedStep { a, b, c }
    }
}

pub fn rk4_step(dynamics: &DiscreteDynamics, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    dynamics.step(x, u)
}

pub fn step_jacobians(dynamics: &DiscreteDynamics, x: &[f64], u: &[f64]) -> Result<LinearizedStep> {
    dynamics.linearize(x, u)
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let at = a.transpose();
    let pb = p * b;
    let gram = r + b.transpose() * &pb;
    let gain = gram.cholesky()?.solve(&(pb.transpose() * a));
    let next = s + &at * p * a - &at * &pb * gain;
    Some((&next + next.transpose()) * 0.5)
}

/// Solves the DARE `P = S + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` by fixed-point
/// iteration of the Riccati recursion from `P₀ = S`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || s.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("solve_dare: inconsistent A, B, S, R shapes".into()));
    }
    let mut p = s.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let next = riccati_map(a, b, s, r, &p)
            .ok_or_else(|| Error::SolverFailure("R + BᵀPB is not positive definite".into()))?;
        residual = max_abs_matrix(&(&next - &p));
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(p);
        }
        p = next;
    }
    Err(Error::RiccatiNotConverged {
        iterations: max_iter,
        residual,
    })
}

/// `‖P − (S + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA)‖∞` (max-abs entry).
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_map(a, b, s, r, p) {
        Some(next) => max_abs_matrix(&(next - p)),
        None => f64::INFINITY,
    }
}
