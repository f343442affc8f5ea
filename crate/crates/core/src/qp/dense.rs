use alloc::format;
use nalgebra::{DMatrix, DVector, LU};

use super::{KktBackend, QpData};
use crate::error::{Error, Result};
use crate::linalg::max_abs_matrix;

/// Dense QP data. Equalities `A_eq v = b_eq`, inequalities `C_in v ≤ d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub d_in: DVector<f64>,
    /// Constant added to the objective value.
    pub constant: f64,
}

impl DenseQp {
    /// Unconstrained problem; add rows with [`DenseQp::with_eq`] / [`DenseQp::with_in`].
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c_in: DMatrix::zeros(0, n),
            d_in: DVector::zeros(0),
            constant: 0.0,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_in(mut self, c: DMatrix<f64>, d: DVector<f64>) -> Self {
        self.c_in = c;
        self.d_in = d;
        self
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.g.len();
        let ok = self.h.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.c_in.ncols() == n
            && self.c_in.nrows() == self.d_in.len();
        if !ok {
            return Err(Error::Dimension(format!(
                "qp: H {:?}, g {}, A {:?}, b {}, C {:?}, d {}",
                self.h.shape(),
                n,
                self.a_eq.shape(),
                self.b_eq.len(),
                self.c_in.shape(),
                self.d_in.len()
            )));
        }
        let asym = max_abs_matrix(&(&self.h - self.h.transpose()));
        if asym > 1e-12 * (1.0 + max_abs_matrix(&self.h)) {
            return Err(Error::Dimension(format!("qp: H is not symmetric (defect {asym:e})")));
        }
        Ok(())
    }
}

impl QpData for DenseQp {
    fn n(&self) -> usize {
        self.g.len()
    }
    fn m_eq(&self) -> usize {
        self.b_eq.len()
    }
    fn m_in(&self) -> usize {
        self.d_in.len()
    }
    fn grad(&self) -> &[f64] {
        self.g.as_slice()
    }
    fn b_eq(&self) -> &[f64] {
        self.b_eq.as_slice()
    }
    fn d_in(&self) -> &[f64] {
        self.d_in.as_slice()
    }
    fn constant(&self) -> f64 {
        self.constant
    }
    fn hess_mul(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.h, v, out);
    }
    fn eq_mul(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.a_eq, v, out);
    }
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        gemv_t_add(&self.a_eq, y, out);
    }
    fn in_mul(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.c_in, v, out);
    }
    fn in_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        gemv_t_add(&self.c_in, y, out);
    }
}

fn gemv(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for i in 0..m.nrows() {
        let mut s = 0.0;
        for j in 0..m.ncols() {
            s += m[(i, j)] * v[j];
        }
        out[i] = s;
    }
}

fn gemv_t_add(m: &DMatrix<f64>, y: &[f64], out: &mut [f64]) {
    for j in 0..m.ncols() {
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += m[(i, j)] * y[i];
        }
        out[j] += s;
    }
}

pub(crate) struct DenseFactor {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    kkt: DMatrix<f64>,
}

impl KktBackend for DenseQp {
    type Factor = DenseFactor;

    fn factor(&self, d: &[f64], reg: f64) -> Option<DenseFactor> {
        let n = self.g.len();
        let me = self.b_eq.len();
        let mut hd = self.h.clone();
        let cd = DMatrix::from_fn(self.c_in.nrows(), n, |i, j| self.c_in[(i, j)] * d[i]);
        hd += self.c_in.transpose() * cd;
        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hd);
        kkt.view_mut((n, 0), (me, n)).copy_from(&self.a_eq);
        kkt.view_mut((0, n), (n, me)).copy_from(&self.a_eq.transpose());
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        for i in n..n + me {
            kkt[(i, i)] -= reg;
        }
        let lu = kkt.clone().lu();
        // Reject numerically singular factorizations by checking a probe solve.
        let probe = DVector::from_fn(n + me, |i, _| 1.0 + (i % 7) as f64);
        let x = lu.solve(&probe)?;
        let defect = max_abs_matrix(&(&kkt * &x - &probe));
        if !defect.is_finite() || defect > 1e-6 * (1.0 + max_abs_matrix(&kkt) * max_abs_matrix(&x)) {
            return None;
        }
        Some(DenseFactor { lu, kkt })
    }

    fn solve(&self, f: &DenseFactor, r1: &mut [f64], r2: &mut [f64]) {
        let n = r1.len();
        let rhs = DVector::from_iterator(n + r2.len(), r1.iter().chain(r2.iter()).copied());
        let mut x = f.lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(rhs.len()));
        // One step of iterative refinement.
        let res = &rhs - &f.kkt * &x;
        if let Some(dx) = f.lu.solve(&res) {
            x += dx;
        }
        r1.copy_from_slice(&x.as_slice()[..n]);
        r2.copy_from_slice(&x.as_slice()[n..]);
    }

    fn equalities_consistent(&self) -> bool {
        if self.a_eq.nrows() == 0 {
            return true;
        }
        let svd = self.a_eq.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = 1e-12 * smax.max(1.0);
        match svd.solve(&self.b_eq, eps) {
            Ok(v) => {
                let defect = crate::linalg::max_abs((&self.a_eq * v - &self.b_eq).as_slice());
                defect <= 1e-9 * (1.0 + crate::linalg::max_abs(self.b_eq.as_slice()))
            }
            Err(_) => false,
        }
    }
}
