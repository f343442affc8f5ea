use alloc::format;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{DenseQp, KktBackend, QpData};
use crate::error::{Error, Result};
use crate::linalg::BandedCholesky;

/// One block of variables with its own Hessian block and local inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct QpStage {
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub d_in: DVector<f64>,
}

impl QpStage {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }
}

/// A group of equality rows `Σ_blocks M_k v_k = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqGroup {
    pub rhs: DVector<f64>,
    /// `(stage index, coefficient block)` pairs.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// QP with block-diagonal Hessian, stage-local inequalities and equality
/// groups that each touch a few stages. When groups are ordered so that
/// groups sharing a stage are adjacent (as in multiple shooting), the
/// Schur complement `A H⁻¹ Aᵀ` is banded and every factorization is linear
/// in the number of stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedQp {
    stages: Vec<QpStage>,
    groups: Vec<EqGroup>,
    constant: f64,
    var_off: Vec<usize>,
    in_off: Vec<usize>,
    eq_off: Vec<usize>,
    g: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
    /// For each stage, `(group, block index)` of every equality block touching it.
    incidence: Vec<Vec<(usize, usize)>>,
    bandwidth: usize,
}

impl StagedQp {
    pub fn new(stages: Vec<QpStage>, groups: Vec<EqGroup>, constant: f64) -> Result<Self> {
        let mut var_off = Vec::with_capacity(stages.len() + 1);
        let mut in_off = Vec::with_capacity(stages.len() + 1);
        let (mut nv, mut ni) = (0, 0);
        for (k, st) in stages.iter().enumerate() {
            let n = st.dim();
            if st.hess.shape() != (n, n) || st.c_in.ncols() != n || st.c_in.nrows() != st.d_in.len() {
                return Err(Error::Dimension(format!("staged qp: stage {k} blocks are inconsistent")));
            }
            var_off.push(nv);
            in_off.push(ni);
            nv += n;
            ni += st.d_in.len();
        }
        var_off.push(nv);
        in_off.push(ni);

        let mut eq_off = Vec::with_capacity(groups.len() + 1);
        let mut incidence = alloc::vec![Vec::new(); stages.len()];
        let mut me = 0;
        for (gi, grp) in groups.iter().enumerate() {
            eq_off.push(me);
            for (bi, (k, blk)) in grp.blocks.iter().enumerate() {
                if *k >= stages.len() || blk.shape() != (grp.rhs.len(), stages[*k].dim()) {
                    return Err(Error::Dimension(format!("staged qp: equality group {gi} block {bi} is inconsistent")));
                }
                incidence[*k].push((gi, bi));
            }
            me += grp.rhs.len();
        }
        eq_off.push(me);

        let mut bandwidth = 0;
        for inc in &incidence {
            if let (Some(lo), Some(hi)) = (
                inc.iter().map(|&(gi, _)| eq_off[gi]).min(),
                inc.iter().map(|&(gi, _)| eq_off[gi + 1] - 1).max(),
            ) {
                bandwidth = bandwidth.max(hi - lo);
            }
        }

        let g = stages.iter().flat_map(|s| s.grad.iter().copied()).collect();
        let d = stages.iter().flat_map(|s| s.d_in.iter().copied()).collect();
        let b = groups.iter().flat_map(|grp| grp.rhs.iter().copied()).collect();
        Ok(Self {
            stages,
            groups,
            constant,
            var_off,
            in_off,
            eq_off,
            g,
            b,
            d,
            incidence,
            bandwidth,
        })
    }

    pub fn stages(&self) -> &[QpStage] {
        &self.stages
    }

    pub fn groups(&self) -> &[EqGroup] {
        &self.groups
    }

    pub fn var_offset(&self, stage: usize) -> usize {
        self.var_off[stage]
    }

    pub fn in_offset(&self, stage: usize) -> usize {
        self.in_off[stage]
    }

    pub fn eq_offset(&self, group: usize) -> usize {
        self.eq_off[group]
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn set_constant(&mut self, c: f64) {
        self.constant = c;
    }

    /// Replaces the right-hand side of one equality group.
    pub fn set_eq_rhs(&mut self, group: usize, rhs: &[f64]) {
        let off = self.eq_off[group];
        self.b[off..off + rhs.len()].copy_from_slice(rhs);
        self.groups[group].rhs.copy_from_slice(rhs);
    }

    pub fn num_vars(&self) -> usize {
        *self.var_off.last().unwrap_or(&0)
    }

    pub fn to_dense(&self) -> DenseQp {
        let n = self.num_vars();
        let me = self.b.len();
        let mi = self.d.len();
        let mut h = DMatrix::zeros(n, n);
        let mut c = DMatrix::zeros(mi, n);
        for (k, st) in self.stages.iter().enumerate() {
            let o = self.var_off[k];
            h.view_mut((o, o), (st.dim(), st.dim())).copy_from(&st.hess);
            c.view_mut((self.in_off[k], o), st.c_in.shape()).copy_from(&st.c_in);
        }
        let mut a = DMatrix::zeros(me, n);
        for (gi, grp) in self.groups.iter().enumerate() {
            for (k, blk) in &grp.blocks {
                let mut view = a.view_mut((self.eq_off[gi], self.var_off[*k]), blk.shape());
                view += blk;
            }
        }
        DenseQp {
            h,
            g: DVector::from_column_slice(&self.g),
            a_eq: a,
            b_eq: DVector::from_column_slice(&self.b),
            c_in: c,
            d_in: DVector::from_column_slice(&self.d),
            constant: self.constant,
        }
    }

    fn stage_solve(&self, f: &StagedFactor, r: &mut [f64]) {
        for (k, ch) in f.chol.iter().enumerate() {
            let o = self.var_off[k];
            let n = self.stages[k].dim();
            let mut seg = nalgebra::DVectorViewMut::from_slice(&mut r[o..o + n], n);
            ch.solve_mut(&mut seg);
        }
    }
}

impl QpData for StagedQp {
    fn n(&self) -> usize {
        self.num_vars()
    }
    fn m_eq(&self) -> usize {
        self.b.len()
    }
    fn m_in(&self) -> usize {
        self.d.len()
    }
    fn grad(&self) -> &[f64] {
        &self.g
    }
    fn b_eq(&self) -> &[f64] {
        &self.b
    }
    fn d_in(&self) -> &[f64] {
        &self.d
    }
    fn constant(&self) -> f64 {
        self.constant
    }
    fn hess_mul(&self, v: &[f64], out: &mut [f64]) {
        for (k, st) in self.stages.iter().enumerate() {
            let o = self.var_off[k];
            let n = st.dim();
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += st.hess[(i, j)] * v[o + j];
                }
                out[o + i] = s;
            }
        }
    }
    fn eq_mul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (gi, grp) in self.groups.iter().enumerate() {
            let ro = self.eq_off[gi];
            for (k, blk) in &grp.blocks {
                let o = self.var_off[*k];
                for i in 0..blk.nrows() {
                    let mut s = 0.0;
                    for j in 0..blk.ncols() {
                        s += blk[(i, j)] * v[o + j];
                    }
                    out[ro + i] += s;
                }
            }
        }
    }
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        for (gi, grp) in self.groups.iter().enumerate() {
            let ro = self.eq_off[gi];
            for (k, blk) in &grp.blocks {
                let o = self.var_off[*k];
                for j in 0..blk.ncols() {
                    let mut s = 0.0;
                    for i in 0..blk.nrows() {
                        s += blk[(i, j)] * y[ro + i];
                    }
                    out[o + j] += s;
                }
            }
        }
    }
    fn in_mul(&self, v: &[f64], out: &mut [f64]) {
        for (k, st) in self.stages.iter().enumerate() {
            let o = self.var_off[k];
            let ro = self.in_off[k];
            for i in 0..st.c_in.nrows() {
                let mut s = 0.0;
                for j in 0..st.c_in.ncols() {
                    s += st.c_in[(i, j)] * v[o + j];
                }
                out[ro + i] = s;
            }
        }
    }
    fn in_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        for (k, st) in self.stages.iter().enumerate() {
            let o = self.var_off[k];
            let ro = self.in_off[k];
            for j in 0..st.c_in.ncols() {
                let mut s = 0.0;
                for i in 0..st.c_in.nrows() {
                    s += st.c_in[(i, j)] * y[ro + i];
                }
                out[o + j] += s;
            }
        }
    }
}

pub(crate) struct StagedFactor {
    chol: Vec<Cholesky<f64, Dyn>>,
    schur: Option<BandedCholesky>,
}

impl KktBackend for StagedQp {
    type Factor = StagedFactor;

    fn factor(&self, dvals: &[f64], reg: f64) -> Option<StagedFactor> {
        let mut chol = Vec::with_capacity(self.stages.len());
        for (k, st) in self.stages.iter().enumerate() {
            let n = st.dim();
            let ro = self.in_off[k];
            let mut h = st.hess.clone();
            let c = &st.c_in;
            for r in 0..c.nrows() {
                let dr = dvals[ro + r];
                for i in 0..n {
                    let ci = c[(r, i)];
                    if ci == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        h[(i, j)] += ci * dr * c[(r, j)];
                    }
                }
            }
            for i in 0..n {
                h[(i, i)] += reg;
            }
            chol.push(h.cholesky()?);
        }

        let me = self.b.len();
        if me == 0 {
            return Some(StagedFactor { chol, schur: None });
        }
        let mut s = DMatrix::<f64>::zeros(me, me);
        for (k, inc) in self.incidence.iter().enumerate() {
            if inc.is_empty() {
                continue;
            }
            let n = self.stages[k].dim();
            let rows: usize = inc.iter().map(|&(gi, _)| self.groups[gi].rhs.len()).sum();
            let mut e = DMatrix::zeros(rows, n);
            let mut global = Vec::with_capacity(rows);
            let mut r = 0;
            for &(gi, bi) in inc {
                let blk = &self.groups[gi].blocks[bi].1;
                e.view_mut((r, 0), blk.shape()).copy_from(blk);
                for i in 0..blk.nrows() {
                    global.push(self.eq_off[gi] + i);
                }
                r += blk.nrows();
            }
            let y = chol[k].solve(&e.transpose());
            let w = &e * y;
            for (i, gi) in global.iter().enumerate() {
                for (j, gj) in global.iter().enumerate() {
                    s[(*gi, *gj)] += w[(i, j)];
                }
            }
        }
        if reg > 0.0 {
            // Relative shift: degenerate active sets leave S singular at its own scale.
            let scale = (0..me).fold(1.0f64, |m, i| m.max(s[(i, i)].abs()));
            for i in 0..me {
                s[(i, i)] += reg * scale;
            }
        }
        let schur = BandedCholesky::factor(s, self.bandwidth)?;
        Some(StagedFactor {
            chol,
            schur: Some(schur),
        })
    }

    fn solve(&self, f: &StagedFactor, r1: &mut [f64], r2: &mut [f64]) {
        let me = r2.len();
        if me > 0 {
            let mut t = r1.to_vec();
            self.stage_solve(f, &mut t);
            let mut q = alloc::vec![0.0; me];
            self.eq_mul(&t, &mut q);
            for i in 0..me {
                q[i] -= r2[i];
            }
            if let Some(schur) = &f.schur {
                schur.solve_mut(&mut q);
            }
            r2.copy_from_slice(&q);
            let mut neg = q;
            neg.iter_mut().for_each(|x| *x = -*x);
            self.eq_tmul_add(&neg, r1);
        }
        self.stage_solve(f, r1);
    }
}
