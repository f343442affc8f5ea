//! Multiple-shooting optimal control problem with slack-softened box
//! constraints, its Gauss-Newton QP, an SQP solver and the expert MPC policy.
//!
//! Costs are written as squared residuals, `‖L̄(x, u)‖²` per stage and
//! `‖Ē(x_N)‖²` at the end, so the Gauss-Newton Hessian `2 JᵀJ` is available
//! without second derivatives. Every bounded component gets one slack `s ≥ 0`
//! that relaxes both of its bounds and is charged `z s + Z s²`.

mod gn;
mod sqp;

pub use gn::{build_gn_qp, GnQp, Layout};
pub use sqp::{mpc_policy, shift_solution, sqp_solve, sqp_solve_pinned, MpcController, SqpSettings, SqpStatus};

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::dynamics::{CartPole, CartPoleParams, DiscreteDynamics};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, sym_sqrt};

/// Vector-valued residual `r(w)` whose square is a cost term.
pub trait Residual: fmt::Debug + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, w: &[f64], out: &mut [f64]);
    /// `∂r/∂w`, `output_dim × input_dim`.
    fn jacobian(&self, w: &[f64]) -> DMatrix<f64>;
}

/// `r(w) = M w`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResidual {
    pub matrix: DMatrix<f64>,
}

impl Residual for LinearResidual {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn eval(&self, w: &[f64], out: &mut [f64]) {
        for i in 0..self.matrix.nrows() {
            out[i] = (0..w.len()).map(|j| self.matrix[(i, j)] * w[j]).sum();
        }
    }
    fn jacobian(&self, _w: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Box bounds softened by one slack per bounded component.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBounds {
    lb: DVector<f64>,
    ub: DVector<f64>,
    index: Vec<usize>,
    lin: DVector<f64>,
    quad: DVector<f64>,
}

impl SoftBounds {
    /// `lb`/`ub` may hold infinities; components with a finite bound get a
    /// slack, and `lin`/`quad` are given per slack in component order.
    pub fn new(lb: DVector<f64>, ub: DVector<f64>, lin: DVector<f64>, quad: DVector<f64>) -> Result<Self> {
        if lb.len() != ub.len() {
            return Err(Error::Dimension(format!("bounds: lb {} vs ub {}", lb.len(), ub.len())));
        }
        if lb.iter().chain(ub.iter()).any(|v| v.is_nan()) || lb.iter().zip(ub.iter()).any(|(l, u)| l > u) {
            return Err(Error::Config("bounds: need lb ≤ ub and no NaN".into()));
        }
        let index: Vec<usize> = (0..lb.len()).filter(|&i| lb[i].is_finite() || ub[i].is_finite()).collect();
        if lin.len() != index.len() || quad.len() != index.len() {
            return Err(Error::Dimension(format!(
                "bounds: {} slacks but {} linear and {} quadratic weights",
                index.len(),
                lin.len(),
                quad.len()
            )));
        }
        if lin.iter().any(|z| !(*z >= 0.0) || !z.is_finite()) || quad.iter().any(|z| !(*z > 0.0) || !z.is_finite()) {
            return Err(Error::Config("bounds: slack weights need z ≥ 0 and Z > 0".into()));
        }
        Ok(Self { lb, ub, index, lin, quad })
    }

    /// Number of components the bounds act on.
    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn num_slacks(&self) -> usize {
        self.index.len()
    }

    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    /// Component bounded by each slack.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn lin(&self) -> &DVector<f64> {
        &self.lin
    }

    pub fn quad(&self) -> &DVector<f64> {
        &self.quad
    }

    /// Smallest slacks that make `w` feasible.
    pub fn violation(&self, w: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.index.len(),
            self.index
                .iter()
                .map(|&c| (w[c] - self.ub[c]).max(self.lb[c] - w[c]).max(0.0)),
        )
    }

    /// `zᵀs + sᵀ diag(Z) s`
    pub fn penalty(&self, s: &[f64]) -> f64 {
        s.iter()
            .zip(self.lin.iter().zip(self.quad.iter()))
            .map(|(s, (z, q))| z * s + q * s * s)
            .sum()
    }

    /// Same bounds with every slack weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lin: &self.lin * factor,
            quad: &self.quad * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub horizon: usize,
    pub dynamics: DiscreteDynamics,
    /// Residual over `(x, u)`.
    pub stage_residual: Arc<dyn Residual>,
    /// Residual over `x_N`.
    pub terminal_residual: Arc<dyn Residual>,
    /// Bounds over `(x, u)` at stages `0..N`.
    pub path_bounds: SoftBounds,
    /// Bounds over `x_N`.
    pub terminal_bounds: SoftBounds,
}

impl OcpSpec {
    pub fn new(
        horizon: usize,
        dynamics: DiscreteDynamics,
        stage_residual: Arc<dyn Residual>,
        terminal_residual: Arc<dyn Residual>,
        path_bounds: SoftBounds,
        terminal_bounds: SoftBounds,
    ) -> Result<Self> {
        let (nx, nu) = (dynamics.state_dim(), dynamics.control_dim());
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if stage_residual.input_dim() != nx + nu || path_bounds.dim() != nx + nu {
            return Err(Error::Dimension(format!("ocp: stage terms must act on {} components", nx + nu)));
        }
        if terminal_residual.input_dim() != nx || terminal_bounds.dim() != nx {
            return Err(Error::Dimension(format!("ocp: terminal terms must act on {nx} components")));
        }
        Ok(Self {
            horizon,
            dynamics,
            stage_residual,
            terminal_residual,
            path_bounds,
            terminal_bounds,
        })
    }

    pub fn nx(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn nu(&self) -> usize {
        self.dynamics.control_dim()
    }

    /// `‖L̄(x, u)‖²`
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut w = Vec::with_capacity(x.len() + u.len());
        w.extend_from_slice(x);
        w.extend_from_slice(u);
        squared_norm(self.stage_residual.as_ref(), &w)
    }

    /// `‖Ē(x)‖²`
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        squared_norm(self.terminal_residual.as_ref(), x)
    }

    /// Copy of the problem with all slack weights multiplied by `factor`.
    pub fn with_scaled_penalties(&self, factor: f64) -> Self {
        Self {
            path_bounds: self.path_bounds.scaled(factor),
            terminal_bounds: self.terminal_bounds.scaled(factor),
            ..self.clone()
        }
    }
}

fn squared_norm(r: &dyn Residual, w: &[f64]) -> f64 {
    let mut out = alloc::vec![0.0; r.output_dim()];
    r.eval(w, &mut out);
    out.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalTrajectory {
    /// `x₀ … x_N`
    pub xs: Vec<DVector<f64>>,
    /// `u₀ … u_{N−1}`
    pub us: Vec<DVector<f64>>,
    /// `s₀ … s_N`; `s₀` is empty when the first control is pinned.
    pub slacks: Vec<DVector<f64>>,
}

impl PrimalTrajectory {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    /// Largest slack over the whole trajectory.
    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().flat_map(|s| s.iter()).fold(0.0f64, |m, v| m.max(*v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub traj: PrimalTrajectory,
    /// Multiplier of `x₀ = x̄₀`.
    pub lambda_x0: DVector<f64>,
    /// Multiplier of `−u₀ = −ū₀` when the first control is pinned, which is
    /// `∂(objective)/∂ū₀`.
    pub lambda_pin: Option<DVector<f64>>,
    /// Multipliers of `x_{k+1} − f(x_k, u_k) = 0`, `k = 0 … N−1`.
    pub lambda_dyn: Vec<DVector<f64>>,
    /// Inequality multipliers per stage `0 … N`, rows ordered as built by [`build_gn_qp`].
    pub mu_path: Vec<DVector<f64>>,
    /// Cost including slack penalties.
    pub objective: f64,
    pub kkt_inf: f64,
    pub sqp_iters: usize,
    pub status: SqpStatus,
}

impl OcpSolution {
    pub fn u0(&self) -> &DVector<f64> {
        &self.traj.us[0]
    }
}

/// Cost of a trajectory, slack penalties included.
pub fn evaluate_cost(spec: &OcpSpec, traj: &PrimalTrajectory) -> f64 {
    let n = spec.horizon;
    debug_assert_eq!(traj.xs.len(), n + 1);
    debug_assert_eq!(traj.us.len(), n);
    let mut total = 0.0;
    for k in 0..n {
        total += spec.stage_cost(traj.xs[k].as_slice(), traj.us[k].as_slice());
        total += spec.path_bounds.penalty(traj.slacks[k].as_slice());
    }
    total + spec.terminal_cost(traj.xs[n].as_slice()) + spec.terminal_bounds.penalty(traj.slacks[n].as_slice())
}

/// Cart-pole swing-stabilization problem. Slack weights listed under `path_*`
/// are multiplied by `dt`; terminal ones are used as given.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleOcpConfig {
    pub dt: f64,
    pub horizon: usize,
    pub substeps: usize,
    pub params: CartPoleParams,
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

impl Default for CartPoleOcpConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 20,
            substeps: 1,
            params: CartPoleParams::default(),
            state_bound: [2.0, 4.0, core::f64::consts::FRAC_PI_3, 2.0],
            control_bound: 25.0,
            state_weight: [0.25, 0.025, 0.25, 0.025],
            control_weight: 0.0025,
            path_slack_linear: [0.5, 0.05, 0.5, 0.05, 5000.0],
            path_slack_quadratic: [50.0, 5.0, 50.0, 5.0, 500.0],
            terminal_slack_linear: [0.5, 0.05, 0.5, 0.05],
            terminal_slack_quadratic: [50.0, 5.0, 50.0, 5.0],
            dare_tol: 1e-10,
            dare_max_iter: 10_000,
        }
    }
}

impl CartPoleOcpConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.dt) || self.horizon == 0 || self.substeps == 0 {
            return Err(Error::Config("dt, horizon and substeps must be positive".into()));
        }
        if !self.state_bound.iter().all(|v| positive(*v)) || !positive(self.control_bound) {
            return Err(Error::Config("bounds must be positive".into()));
        }
        if !self.state_weight.iter().all(|v| positive(*v)) || !positive(self.control_weight) {
            return Err(Error::Config("cost weights must be positive".into()));
        }
        if !all_finite(&self.path_slack_linear) || !all_finite(&self.terminal_slack_linear) {
            return Err(Error::Config("slack weights must be finite".into()));
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Result<DiscreteDynamics> {
        DiscreteDynamics::new(Arc::new(CartPole::new(self.params)?), self.dt, self.substeps)
    }

    /// DARE solution on the origin linearization with weights `S`, `R`.
    pub fn terminal_weight(&self) -> Result<DMatrix<f64>> {
        let lin = self.dynamics()?.linearize(&[0.0; 4], &[0.0])?;
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.state_weight));
        let r = DMatrix::from_element(1, 1, self.control_weight);
        crate::dynamics::solve_dare(&lin.a, &lin.b, &s, &r, self.dare_tol, self.dare_max_iter)
    }
}

/// Builds the cart-pole OCP: stage cost `(1/N)(xᵀSx + uᵀRu)`, terminal cost
/// `(1/N) x_NᵀP x_N` with `P` from the DARE, and soft box bounds.
pub fn build_cartpole_ocp(config: &CartPoleOcpConfig) -> Result<OcpSpec> {
    config.validate()?;
    let dynamics = config.dynamics()?;
    let scale = 1.0 / (config.horizon as f64).sqrt();
    let mut root = [0.0; 5];
    for i in 0..4 {
        root[i] = config.state_weight[i].sqrt() * scale;
    }
    root[4] = config.control_weight.sqrt() * scale;
    let stage = LinearResidual {
        matrix: DMatrix::from_diagonal(&DVector::from_column_slice(&root)),
    };
    let terminal = LinearResidual {
        matrix: sym_sqrt(&config.terminal_weight()?) * scale,
    };

    let xb = DVector::from_column_slice(&config.state_bound);
    let mut wb = DVector::zeros(5);
    wb.rows_mut(0, 4).copy_from(&xb);
    wb[4] = config.control_bound;
    let path = SoftBounds::new(
        -&wb,
        wb.clone(),
        DVector::from_column_slice(&config.path_slack_linear) * config.dt,
        DVector::from_column_slice(&config.path_slack_quadratic) * config.dt,
    )?;
    let term = SoftBounds::new(
        -&xb,
        xb.clone(),
        DVector::from_column_slice(&config.terminal_slack_linear),
        DVector::from_column_slice(&config.terminal_slack_quadratic),
    )?;
    OcpSpec::new(config.horizon, dynamics, Arc::new(stage), Arc::new(terminal), path, term)
}
