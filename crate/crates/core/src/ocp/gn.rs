use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use super::{OcpSolution, OcpSpec, PrimalTrajectory, Residual, SoftBounds};
use crate::error::{Error, Result};
use crate::qp::{DenseQp, EqGroup, QpSettings, QpSolution, QpStage, StagedQp};

/// Position of every shooting variable in the flat QP vector. Stage `k < N`
/// holds `(x_k, u_k, s_k)`, the last stage `(x_N, s_N)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub pinned: bool,
    /// Slack count per stage `0 … N`.
    pub slacks: Vec<usize>,
    offsets: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &OcpSpec, pinned: bool) -> Self {
        let (nx, nu, n) = (spec.nx(), spec.nu(), spec.horizon);
        let mut slacks = alloc::vec![spec.path_bounds.num_slacks(); n];
        if pinned {
            slacks[0] = 0;
        }
        slacks.push(spec.terminal_bounds.num_slacks());
        let mut offsets = Vec::with_capacity(n + 2);
        let mut off = 0;
        for k in 0..=n {
            offsets.push(off);
            off += nx + if k < n { nu } else { 0 } + slacks[k];
        }
        offsets.push(off);
        Self {
            nx,
            nu,
            horizon: n,
            pinned,
            slacks,
            offsets,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.offsets[self.horizon + 1]
    }

    pub fn stage_dim(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }

    pub fn x_offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn u_offset(&self, k: usize) -> usize {
        self.offsets[k] + self.nx
    }

    pub fn s_offset(&self, k: usize) -> usize {
        self.offsets[k] + self.nx + if k < self.horizon { self.nu } else { 0 }
    }

    pub fn pack(&self, traj: &PrimalTrajectory) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.num_vars()];
        for k in 0..=self.horizon {
            v[self.x_offset(k)..self.x_offset(k) + self.nx].copy_from_slice(traj.xs[k].as_slice());
            if k < self.horizon {
                v[self.u_offset(k)..self.u_offset(k) + self.nu].copy_from_slice(traj.us[k].as_slice());
            }
            let ns = self.slacks[k].min(traj.slacks[k].len());
            v[self.s_offset(k)..self.s_offset(k) + ns].copy_from_slice(&traj.slacks[k].as_slice()[..ns]);
        }
        v
    }

    pub fn unpack(&self, v: &[f64]) -> PrimalTrajectory {
        let n = self.horizon;
        PrimalTrajectory {
            xs: (0..=n)
                .map(|k| DVector::from_column_slice(&v[self.x_offset(k)..self.x_offset(k) + self.nx]))
                .collect(),
            us: (0..n)
                .map(|k| DVector::from_column_slice(&v[self.u_offset(k)..self.u_offset(k) + self.nu]))
                .collect(),
            slacks: (0..=n)
                .map(|k| DVector::from_column_slice(&v[self.s_offset(k)..self.s_offset(k) + self.slacks[k]]))
                .collect(),
        }
    }
}

/// Gauss-Newton QP of an OCP together with the bookkeeping needed to read
/// multipliers back. Equality groups are `x₀`, then the pin (if any), then
/// the dynamics of stages `0 … N−1`.
#[derive(Debug, Clone)]
pub struct GnQp {
    pub qp: StagedQp,
    pub layout: Layout,
    /// Group holding the `−u₀ = −ū₀` row.
    pub pin_group: Option<usize>,
}

impl GnQp {
    fn dyn_group(&self, k: usize) -> usize {
        k + 1 + usize::from(self.pin_group.is_some())
    }

    /// Sets the pinned control `ū₀`.
    pub fn set_pin(&mut self, u0: &[f64]) -> Result<()> {
        let g = self
            .pin_group
            .ok_or_else(|| Error::Config("qp has no pinned control".into()))?;
        if u0.len() != self.layout.nu {
            return Err(Error::Dimension(format!("pin expects {} controls, got {}", self.layout.nu, u0.len())));
        }
        let neg: Vec<f64> = u0.iter().map(|u| -u).collect();
        self.qp.set_eq_rhs(g, &neg);
        Ok(())
    }

    /// Flat index range of the pin multipliers in `λ`.
    pub fn pin_rows(&self) -> Option<core::ops::Range<usize>> {
        self.pin_group
            .map(|g| self.qp.eq_offset(g)..self.qp.eq_offset(g) + self.layout.nu)
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution> {
        self.qp.solve(settings, None)
    }

    pub fn to_dense(&self) -> DenseQp {
        self.qp.to_dense()
    }

    /// Multipliers in the order `λ = (x₀, pin, dyn…)`, `μ = (stage 0 … N)`.
    /// An unpinned solution also seeds a pinned problem: the pin multiplier
    /// starts at zero and stage-0 inequality multipliers are dropped.
    pub(crate) fn pack_multipliers(&self, sol: &OcpSolution) -> Option<(Vec<f64>, Vec<f64>)> {
        let pinned = self.pin_group.is_some();
        if (sol.lambda_pin.is_some() && !pinned) || sol.lambda_dyn.len() != self.layout.horizon {
            return None;
        }
        let mut lambda = Vec::with_capacity(self.qp.num_eq());
        lambda.extend_from_slice(sol.lambda_x0.as_slice());
        match &sol.lambda_pin {
            Some(p) => lambda.extend_from_slice(p.as_slice()),
            None if pinned => lambda.extend(core::iter::repeat_n(0.0, self.layout.nu)),
            None => {}
        }
        for l in &sol.lambda_dyn {
            lambda.extend_from_slice(l.as_slice());
        }
        let skip = usize::from(pinned && sol.lambda_pin.is_none());
        let mu: Vec<f64> = sol.mu_path.iter().skip(skip).flat_map(|m| m.iter().copied()).collect();
        (lambda.len() == self.qp.num_eq() && mu.len() == self.qp.num_in()).then_some((lambda, mu))
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn split_multipliers(
        &self,
        lambda: &[f64],
        mu: &[f64],
    ) -> (DVector<f64>, Option<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let nx = self.layout.nx;
        let group = |g: usize, len: usize| DVector::from_column_slice(&lambda[self.qp.eq_offset(g)..self.qp.eq_offset(g) + len]);
        let x0 = group(0, nx);
        let pin = self.pin_group.map(|g| group(g, self.layout.nu));
        let dynm = (0..self.layout.horizon).map(|k| group(self.dyn_group(k), nx)).collect();
        let mu_path = (0..=self.layout.horizon)
            .map(|k| {
                let lo = self.qp.in_offset(k);
                let hi = self.qp.in_offset(k + 1);
                DVector::from_column_slice(&mu[lo..hi])
            })
            .collect();
        (x0, pin, dynm, mu_path)
    }
}

/// Soft-bound rows over a stage with `nw` bounded-space components followed
/// by the stage's slacks at `s_off`: `w_c − s ≤ ub`, `−w_c − s ≤ −lb`, `−s ≤ 0`.
fn soft_rows(bounds: &SoftBounds, s_off: usize, dim: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut rows: Vec<(usize, f64, usize, f64)> = Vec::new();
    for (j, &c) in bounds.index().iter().enumerate() {
        if bounds.ub()[c].is_finite() {
            rows.push((c, 1.0, j, bounds.ub()[c]));
        }
        if bounds.lb()[c].is_finite() {
            rows.push((c, -1.0, j, -bounds.lb()[c]));
        }
    }
    let ns = bounds.num_slacks();
    let mut c = DMatrix::zeros(rows.len() + ns, dim);
    let mut d = DVector::zeros(rows.len() + ns);
    for (i, &(comp, sign, j, rhs)) in rows.iter().enumerate() {
        c[(i, comp)] = sign;
        c[(i, s_off + j)] = -1.0;
        d[i] = rhs;
    }
    for j in 0..ns {
        c[(rows.len() + j, s_off + j)] = -1.0;
    }
    (c, d)
}

/// Gauss-Newton block of `‖r(w̃) + J (w − w̃)‖²` written in absolute `w`:
/// `(2JᵀJ, 2Jᵀ(r − J w̃), ‖r − J w̃‖²)`.
fn gn_block(res: &dyn Residual, w: &[f64]) -> (DMatrix<f64>, DVector<f64>, f64) {
    let mut r = DVector::zeros(res.output_dim());
    res.eval(w, r.as_mut_slice());
    let j = res.jacobian(w);
    let shifted = r - &j * DVector::from_column_slice(w);
    let jt = j.transpose();
    let h = &jt * &j * 2.0;
    let g = &jt * &shifted * 2.0;
    (h, g, shifted.norm_squared())
}

/// Builds the Gauss-Newton QP of `spec` around `zeta` (only its states and
/// controls are used; slack terms are exact). With `pinned_u0` the first
/// control is fixed by an equality row and the stage-0 soft rows are dropped.
pub fn build_gn_qp(spec: &OcpSpec, zeta: &PrimalTrajectory, x0_bar: &[f64], pinned_u0: Option<&[f64]>) -> Result<GnQp> {
    let (nx, nu, n) = (spec.nx(), spec.nu(), spec.horizon);
    if zeta.xs.len() != n + 1 || zeta.us.len() != n || x0_bar.len() != nx || pinned_u0.is_some_and(|u| u.len() != nu) {
        return Err(Error::Dimension(format!(
            "gn qp: expected {} states of {nx}, {n} controls of {nu}",
            n + 1
        )));
    }
    let layout = Layout::new(spec, pinned_u0.is_some());

    let mut stages = Vec::with_capacity(n + 1);
    let mut groups = Vec::with_capacity(n + 2);
    let mut constant = 0.0;
    let mut w = alloc::vec![0.0; nx + nu];
    for k in 0..=n {
        let dim = layout.stage_dim(k);
        let (res, bounds, nw): (&dyn Residual, &SoftBounds, usize) = if k < n {
            (spec.stage_residual.as_ref(), &spec.path_bounds, nx + nu)
        } else {
            (spec.terminal_residual.as_ref(), &spec.terminal_bounds, nx)
        };
        w[..nx].copy_from_slice(zeta.xs[k].as_slice());
        if k < n {
            w[nx..].copy_from_slice(zeta.us[k].as_slice());
        }
        let (hw, gw, cw) = gn_block(res, &w[..nw]);
        constant += cw;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut grad = DVector::zeros(dim);
        hess.view_mut((0, 0), (nw, nw)).copy_from(&hw);
        grad.rows_mut(0, nw).copy_from(&gw);
        let ns = layout.slacks[k];
        let (c_in, d_in) = if ns > 0 {
            for j in 0..ns {
                hess[(nw + j, nw + j)] = 2.0 * bounds.quad()[j];
                grad[nw + j] = bounds.lin()[j];
            }
            soft_rows(bounds, nw, dim)
        } else {
            (DMatrix::zeros(0, dim), DVector::zeros(0))
        };
        stages.push(QpStage { hess, grad, c_in, d_in });
    }

    let mut e0 = DMatrix::zeros(nx, layout.stage_dim(0));
    e0.view_mut((0, 0), (nx, nx)).fill_with_identity();
    groups.push(EqGroup {
        rhs: DVector::from_column_slice(x0_bar),
        blocks: alloc::vec![(0, e0)],
    });
    let pin_group = pinned_u0.map(|u| {
        let mut blk = DMatrix::zeros(nu, layout.stage_dim(0));
        for i in 0..nu {
            blk[(i, nx + i)] = -1.0;
        }
        groups.push(EqGroup {
            rhs: DVector::from_iterator(nu, u.iter().map(|v| -v)),
            blocks: alloc::vec![(0, blk)],
        });
        groups.len() - 1
    });
    for k in 0..n {
        let lin = spec.dynamics.linearize(zeta.xs[k].as_slice(), zeta.us[k].as_slice())?;
        let rhs = &lin.c - &lin.a * &zeta.xs[k] - &lin.b * &zeta.us[k];
        let mut left = DMatrix::zeros(nx, layout.stage_dim(k));
        left.view_mut((0, 0), (nx, nx)).copy_from(&(-&lin.a));
        left.view_mut((0, nx), (nx, nu)).copy_from(&(-&lin.b));
        let mut right = DMatrix::zeros(nx, layout.stage_dim(k + 1));
        right.view_mut((0, 0), (nx, nx)).fill_with_identity();
        groups.push(EqGroup {
            rhs,
            blocks: alloc::vec![(k, left), (k + 1, right)],
        });
    }

    Ok(GnQp {
        qp: StagedQp::new(stages, groups, constant)?,
        layout,
        pin_group,
    })
}
