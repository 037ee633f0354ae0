//! Profiled (restricted) deviance of a linear mixed model and its minimizer.
//!
//! The random-effect covariance of term `r` is `σ² Λ_r Λ_rᵀ`, with `Λ_r`
//! lower triangular. The term with the most levels is eliminated blockwise,
//! one small dense block per level; remaining random terms and the fixed
//! effects form a dense "tail" whose Schur complement is factored once per
//! evaluation. Regressors are standardized internally, which leaves the
//! likelihood unchanged but makes the optimizer's job far easier.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::DesignMatrices;
use super::optimize::{nelder_mead, NelderMeadOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Reml,
    Ml,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Reml => "REML",
            Method::Ml => "ML",
        })
    }
}

/// Number of free covariance parameters for a term with `q` regressors.
pub fn theta_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Lower-triangular factor from its column-major lower entries.
pub fn lambda_from_theta(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for j in 0..q {
        for i in j..q {
            l[(i, j)] = theta[k];
            k += 1;
        }
    }
    l
}

pub fn theta_from_lambda(l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut out = Vec::with_capacity(theta_len(q));
    for j in 0..q {
        for i in j..q {
            out.push(l[(i, j)]);
        }
    }
    out
}

/// Lower-triangular `L` with non-negative diagonal and `L Lᵀ = M Mᵀ`.
pub fn lower_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let r = m.transpose().qr().r();
    let mut l = r.transpose();
    for j in 0..l.ncols() {
        if l[(j, j)] < 0.0 {
            l.column_mut(j).neg_mut();
        }
    }
    l
}

/// Positions of the diagonal entries of `Λ` within a term's parameters.
fn diagonal_positions(q: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(q);
    let mut k = 0;
    for j in 0..q {
        out.push(k);
        k += q - j;
    }
    out
}

/// Standardizing map of a term's regressors: `Z̃ = Z T`, so `b = T b̃`.
/// Non-intercept columns are centred when the term has an intercept.
fn term_transform(values: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = values.shape();
    let nf = n as f64;
    let intercept = (0..q).find(|&j| values.column(j).iter().all(|v| *v == 1.0));
    let mut t = DMatrix::identity(q, q);
    for j in 0..q {
        if Some(j) == intercept {
            continue;
        }
        let col = values.column(j);
        let mean = col.sum() / nf;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
        match intercept {
            Some(i0) if sd > 0.0 => {
                t[(j, j)] = 1.0 / sd;
                t[(i0, j)] = -mean / sd;
            }
            _ => {
                let rms = (col.norm_squared() / nf).sqrt();
                t[(j, j)] = if rms > 0.0 { 1.0 / rms } else { 1.0 };
            }
        }
    }
    t
}

struct GroupBlock {
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    /// Tail columns touched by this level, ascending.
    cols: Vec<usize>,
    ztw: DMatrix<f64>,
    /// (compact start, term) of every secondary level block within `cols`.
    sec_blocks: Vec<(usize, usize)>,
}

/// Precomputed cross products for repeated deviance evaluation.
pub struct RemlProblem {
    n: usize,
    p: usize,
    /// Width of the secondary random-effect block of the tail.
    m: usize,
    q: Vec<usize>,
    levels: Vec<usize>,
    primary: Option<usize>,
    /// (term, offset within tail) of secondary terms.
    secondary: Vec<(usize, usize)>,
    transforms: Vec<DMatrix<f64>>,
    inverse_transforms: Vec<DMatrix<f64>>,
    x_scale: Vec<f64>,
    log_x_scale: f64,
    groups: Vec<GroupBlock>,
    wtw: DMatrix<f64>,
    wty: DVector<f64>,
    row_ptr: Vec<usize>,
    row_cols: Vec<usize>,
    row_vals: Vec<f64>,
    z1: DMatrix<f64>,
    group_of_row: Vec<usize>,
    y: DVector<f64>,
}

/// One factored evaluation at a given (internal) parameter vector.
struct Factorization {
    lambdas: Vec<DMatrix<f64>>,
    lg: Vec<DMatrix<f64>>,
    rg: Vec<DMatrix<f64>>,
    ls: DMatrix<f64>,
    sol: DVector<f64>,
    u1: Vec<DVector<f64>>,
    residuals: DVector<f64>,
    pwrss: f64,
    ld_l1: f64,
    ld_u2: f64,
    ld_x: f64,
}

/// Estimates at the optimum, on the original scale of the regressors.
#[derive(Debug, Clone)]
pub struct RemlSolution {
    pub method: Method,
    pub criterion: f64,
    pub sigma2: f64,
    pub beta: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    /// Per term, the relative factor `Λ_r` (lower triangular).
    pub lambdas: Vec<DMatrix<f64>>,
    /// Per term, a `levels × q` matrix of conditional modes.
    pub blups: Vec<DMatrix<f64>>,
    /// Per term and level, the conditional covariance of the random effects.
    pub cond_var: Vec<Vec<DMatrix<f64>>>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub singular: bool,
    pub evaluations: usize,
}

fn chol_lower(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.cholesky().map(|c| c.unpack())
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has a positive diagonal")
}

fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has a positive diagonal")
}

fn solve_upper_tr_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a positive diagonal")
}

fn log_det(l: &DMatrix<f64>, range: std::ops::Range<usize>) -> f64 {
    range.map(|i| 2.0 * l[(i, i)].ln()).sum()
}

impl RemlProblem {
    pub fn new(design: &DesignMatrices) -> Result<Self> {
        let n = design.n();
        let p = design.p();
        if n <= p {
            return Err(Error::Validation(format!("{n} observations cannot support {p} fixed effects")));
        }
        let q: Vec<usize> = design.terms.iter().map(|t| t.q()).collect();
        let levels: Vec<usize> = design.terms.iter().map(|t| t.n_levels()).collect();
        let primary = (0..levels.len()).max_by_key(|&r| (levels[r], std::cmp::Reverse(r)));
        let mut secondary = Vec::new();
        let mut m = 0;
        for r in 0..levels.len() {
            if Some(r) != primary {
                secondary.push((r, m));
                m += levels[r] * q[r];
            }
        }
        let transforms: Vec<DMatrix<f64>> =
            design.terms.iter().map(|t| term_transform(&t.values)).collect();
        let inverse_transforms = transforms
            .iter()
            .map(|t| t.clone().try_inverse().ok_or_else(|| Error::Numerical("regressor scaling is singular".into())))
            .collect::<Result<Vec<_>>>()?;
        let scaled: Vec<DMatrix<f64>> =
            design.terms.iter().zip(&transforms).map(|(t, tr)| &t.values * tr).collect();
        let x_scale: Vec<f64> =
            (0..p).map(|j| (design.x.column(j).norm_squared() / n as f64).sqrt()).collect();
        let log_x_scale = x_scale.iter().map(|s| s.ln()).sum();

        let width = m + p;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut row_cols = Vec::new();
        let mut row_vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for &(r, off) in &secondary {
                let base = off + design.terms[r].group_of_row[i] * q[r];
                for k in 0..q[r] {
                    let v = scaled[r][(i, k)];
                    if v != 0.0 {
                        row_cols.push(base + k);
                        row_vals.push(v);
                    }
                }
            }
            for j in 0..p {
                let v = design.x[(i, j)];
                if v != 0.0 {
                    row_cols.push(m + j);
                    row_vals.push(v / x_scale[j]);
                }
            }
            row_ptr.push(row_cols.len());
        }
        let mut wtw = DMatrix::zeros(width, width);
        let mut wty = DVector::zeros(width);
        for i in 0..n {
            let range = row_ptr[i]..row_ptr[i + 1];
            for a in range.clone() {
                wty[row_cols[a]] += row_vals[a] * design.y[i];
                for b in range.clone() {
                    wtw[(row_cols[a], row_cols[b])] += row_vals[a] * row_vals[b];
                }
            }
        }

        let (z1, group_of_row, groups) = match primary {
            None => (DMatrix::zeros(n, 0), vec![0; n], Vec::new()),
            Some(pr) => {
                let term = &design.terms[pr];
                let z1 = scaled[pr].clone();
                let q1 = q[pr];
                let mut acc: Vec<(DMatrix<f64>, DVector<f64>, BTreeMap<usize, DVector<f64>>)> =
                    (0..levels[pr]).map(|_| (DMatrix::zeros(q1, q1), DVector::zeros(q1), BTreeMap::new())).collect();
                for i in 0..n {
                    let g = term.group_of_row[i];
                    let z = z1.row(i).transpose();
                    let entry = &mut acc[g];
                    entry.0 += &z * z.transpose();
                    entry.1 += &z * design.y[i];
                    for a in row_ptr[i]..row_ptr[i + 1] {
                        let col = entry.2.entry(row_cols[a]).or_insert_with(|| DVector::zeros(q1));
                        *col += &z * row_vals[a];
                    }
                }
                let mut groups = Vec::with_capacity(acc.len());
                for (ztz, zty, mut sparse) in acc {
                    // Secondary level blocks must be complete for the Λ transform.
                    let touched: Vec<usize> = sparse.keys().copied().filter(|&c| c < m).collect();
                    for c in touched {
                        let &(r, off) = secondary.iter().rev().find(|(_, off)| *off <= c).expect("secondary column");
                        let start = off + (c - off) / q[r] * q[r];
                        for k in 0..q[r] {
                            sparse.entry(start + k).or_insert_with(|| DVector::zeros(q1));
                        }
                    }
                    let cols: Vec<usize> = sparse.keys().copied().collect();
                    let mut ztw = DMatrix::zeros(q1, cols.len());
                    for (k, v) in sparse.values().enumerate() {
                        ztw.set_column(k, v);
                    }
                    let mut sec_blocks = Vec::new();
                    let mut k = 0;
                    while k < cols.len() && cols[k] < m {
                        let &(r, _) = secondary.iter().rev().find(|(_, off)| *off <= cols[k]).expect("secondary column");
                        sec_blocks.push((k, r));
                        k += q[r];
                    }
                    groups.push(GroupBlock { ztz, zty, cols, ztw, sec_blocks });
                }
                (z1, term.group_of_row.clone(), groups)
            }
        };

        Ok(Self {
            n,
            p,
            m,
            q,
            levels,
            primary,
            secondary,
            transforms,
            inverse_transforms,
            x_scale,
            log_x_scale,
            groups,
            wtw,
            wty,
            row_ptr,
            row_cols,
            row_vals,
            z1,
            group_of_row,
            y: design.y.clone(),
        })
    }

    pub fn n_theta(&self) -> usize {
        self.q.iter().map(|&q| theta_len(q)).sum()
    }

    /// Lower bounds on the parameters: diagonals of `Λ` are non-negative.
    fn lower_bounds(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_theta());
        for &q in &self.q {
            let diag = diagonal_positions(q);
            for k in 0..theta_len(q) {
                out.push(if diag.contains(&k) { 0.0 } else { f64::NEG_INFINITY });
            }
        }
        out
    }

    fn split_theta(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.q.len());
        let mut k = 0;
        for &q in &self.q {
            out.push(lambda_from_theta(&theta[k..k + theta_len(q)], q));
            k += theta_len(q);
        }
        out
    }

    fn factor(&self, lambdas: Vec<DMatrix<f64>>) -> Option<Factorization> {
        let (m, p) = (self.m, self.p);
        let mut s = self.wtw.clone();
        let mut rhs = self.wty.clone();
        for &(r, off) in &self.secondary {
            let lam = &lambdas[r];
            let q = self.q[r];
            for l in 0..self.levels[r] {
                let b = off + l * q;
                let cols = s.columns(b, q) * lam;
                s.columns_mut(b, q).copy_from(&cols);
                let rows = lam.transpose() * s.rows(b, q);
                s.rows_mut(b, q).copy_from(&rows);
                for k in 0..q {
                    s[(b + k, b + k)] += 1.0;
                }
                let seg = lam.transpose() * rhs.rows(b, q);
                rhs.rows_mut(b, q).copy_from(&seg);
            }
        }
        let mut lg = Vec::with_capacity(self.groups.len());
        let mut rg = Vec::with_capacity(self.groups.len());
        let mut cg = Vec::with_capacity(self.groups.len());
        let mut ld_l1 = 0.0;
        if let Some(pr) = self.primary {
            let lam = &lambdas[pr];
            let q1 = self.q[pr];
            for g in &self.groups {
                let a = lam.transpose() * &g.ztz * lam + DMatrix::identity(q1, q1);
                let l = chol_lower(a)?;
                ld_l1 += log_det(&l, 0..q1);
                let c = solve_lower_vec(&l, &(lam.transpose() * &g.zty));
                let mut b = lam.transpose() * &g.ztw;
                for &(start, r) in &g.sec_blocks {
                    let qr = self.q[r];
                    let blk = b.columns(start, qr) * &lambdas[r];
                    b.columns_mut(start, qr).copy_from(&blk);
                }
                let rmat = solve_lower(&l, &b);
                let rtr = rmat.tr_mul(&rmat);
                let rtc = rmat.tr_mul(&c);
                for (a_idx, &ca) in g.cols.iter().enumerate() {
                    rhs[ca] -= rtc[a_idx];
                    for (b_idx, &cb) in g.cols.iter().enumerate() {
                        s[(ca, cb)] -= rtr[(a_idx, b_idx)];
                    }
                }
                lg.push(l);
                rg.push(rmat);
                cg.push(c);
            }
        }
        let ls = chol_lower(s)?;
        let d = solve_lower_vec(&ls, &rhs);
        let sol = solve_upper_tr_vec(&ls, &d);
        let mut u1 = Vec::with_capacity(self.groups.len());
        for (k, g) in self.groups.iter().enumerate() {
            let sub = DVector::from_iterator(g.cols.len(), g.cols.iter().map(|&c| sol[c]));
            let v = &cg[k] - &rg[k] * sub;
            u1.push(solve_upper_tr_vec(&lg[k], &v));
        }
        // Effective tail coefficients: Λ u2 for secondary levels, β̃ for X.
        let mut eff = sol.clone();
        for &(r, off) in &self.secondary {
            let q = self.q[r];
            for l in 0..self.levels[r] {
                let b = off + l * q;
                let v = &lambdas[r] * sol.rows(b, q);
                eff.rows_mut(b, q).copy_from(&v);
            }
        }
        let b1: Vec<DVector<f64>> = match self.primary {
            Some(pr) => u1.iter().map(|u| &lambdas[pr] * u).collect(),
            None => Vec::new(),
        };
        let mut residuals = self.y.clone();
        for i in 0..self.n {
            let mut fit = 0.0;
            for a in self.row_ptr[i]..self.row_ptr[i + 1] {
                fit += self.row_vals[a] * eff[self.row_cols[a]];
            }
            if self.primary.is_some() {
                fit += self.z1.row(i).transpose().dot(&b1[self.group_of_row[i]]);
            }
            residuals[i] -= fit;
        }
        let penalty: f64 =
            u1.iter().map(|u| u.norm_squared()).sum::<f64>() + sol.rows(0, m).norm_squared();
        let pwrss = residuals.norm_squared() + penalty;
        let ld_u2 = log_det(&ls, 0..m);
        let ld_x = log_det(&ls, m..m + p);
        Some(Factorization { lambdas, lg, rg, ls, sol, u1, residuals, pwrss, ld_l1, ld_u2, ld_x })
    }

    fn criterion(&self, f: &Factorization, method: Method) -> f64 {
        let n = self.n as f64;
        let two_pi = 2.0 * std::f64::consts::PI;
        match method {
            Method::Ml => f.ld_l1 + f.ld_u2 + n * (1.0 + (two_pi * f.pwrss / n).ln()),
            Method::Reml => {
                let df = (self.n - self.p) as f64;
                f.ld_l1
                    + f.ld_u2
                    + f.ld_x
                    + 2.0 * self.log_x_scale
                    + df * (1.0 + (two_pi * f.pwrss / df).ln())
            }
        }
    }

    /// Profiled deviance at internal (standardized) parameters; infinite
    /// when the fixed-effect block is numerically singular.
    fn internal_deviance(&self, theta: &[f64], method: Method) -> f64 {
        match self.factor(self.split_theta(theta)) {
            Some(f) => self.criterion(&f, method),
            None => f64::INFINITY,
        }
    }

    /// Profiled deviance at relative covariance factors expressed on the
    /// original regressor scale.
    pub fn deviance(&self, theta: &[f64], method: Method) -> Result<f64> {
        if theta.len() != self.n_theta() {
            return Err(Error::Validation(format!(
                "expected {} covariance parameters, got {}",
                self.n_theta(),
                theta.len()
            )));
        }
        let lambdas: Vec<DMatrix<f64>> = self
            .split_theta(theta)
            .iter()
            .zip(&self.inverse_transforms)
            .map(|(l, tinv)| tinv * l)
            .collect();
        let f = self
            .factor(lambdas)
            .ok_or_else(|| Error::Numerical("singular fixed block".into()))?;
        Ok(self.criterion(&f, method))
    }

    /// Minimizes the profiled deviance and returns estimates at the optimum.
    pub fn fit(&self, method: Method, opts: &NelderMeadOptions) -> Result<RemlSolution> {
        let mut starts = Vec::new();
        for scale in [1.0, 0.1] {
            let mut theta = Vec::with_capacity(self.n_theta());
            for &q in &self.q {
                theta.extend(theta_from_lambda(&(DMatrix::identity(q, q) * scale)));
            }
            starts.push(theta);
        }
        let start = starts
            .into_iter()
            .map(|t| (self.internal_deviance(&t, method), t))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("two starting points")
            .1;
        let lower = self.lower_bounds();
        let res = nelder_mead(|t| self.internal_deviance(t, method), &start, &lower, opts);
        if !res.f.is_finite() {
            return Err(Error::Numerical("singular fixed block at every parameter tried".into()));
        }
        let mut singular = false;
        let mut k = 0;
        for &q in &self.q {
            for pos in diagonal_positions(q) {
                singular |= res.x[k + pos] < 1e-4;
            }
            k += theta_len(q);
        }
        let f = self
            .factor(self.split_theta(&res.x))
            .ok_or_else(|| Error::Numerical("singular fixed block".into()))?;
        let mut sol = self.solution(&f, method);
        sol.converged = res.converged;
        sol.singular = singular;
        sol.evaluations = res.evals;
        Ok(sol)
    }

    fn solution(&self, f: &Factorization, method: Method) -> RemlSolution {
        let (m, p) = (self.m, self.p);
        let df = match method {
            Method::Reml => (self.n - p) as f64,
            Method::Ml => self.n as f64,
        };
        let sigma2 = f.pwrss / df;
        let beta = DVector::from_iterator(p, (0..p).map(|j| f.sol[m + j] / self.x_scale[j]));
        let lx = f.ls.view((m, m), (p, p)).clone_owned();
        let lx_inv = solve_lower(&lx, &DMatrix::identity(p, p));
        let mut beta_cov = lx_inv.tr_mul(&lx_inv) * sigma2;
        for i in 0..p {
            for j in 0..p {
                beta_cov[(i, j)] /= self.x_scale[i] * self.x_scale[j];
            }
        }
        let originals: Vec<DMatrix<f64>> =
            f.lambdas.iter().zip(&self.transforms).map(|(l, t)| t * l).collect();
        let lambdas: Vec<DMatrix<f64>> = originals.iter().map(lower_factor).collect();
        let theta = lambdas.iter().flat_map(theta_from_lambda).collect();

        let lsu = f.ls.view((0, 0), (m, m)).clone_owned();
        let lsu_inv = solve_lower(&lsu, &DMatrix::identity(m, m));
        let mut blups: Vec<DMatrix<f64>> =
            self.q.iter().zip(&self.levels).map(|(&q, &g)| DMatrix::zeros(g, q)).collect();
        let mut cond_var: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); self.q.len()];
        if let Some(pr) = self.primary {
            let q1 = self.q[pr];
            let map = &originals[pr];
            for (g, block) in self.groups.iter().enumerate() {
                let b = map * &f.u1[g];
                blups[pr].set_row(g, &b.transpose());
                let lg_inv = solve_lower(&f.lg[g], &DMatrix::identity(q1, q1));
                let mut inner = lg_inv.tr_mul(&lg_inv);
                if m > 0 {
                    // Rows of Rᵀ for secondary columns, scattered to width m.
                    let mut rt = DMatrix::zeros(m, q1);
                    for (k, &c) in block.cols.iter().enumerate() {
                        if c < m {
                            rt.set_row(c, &f.rg[g].column(k).transpose());
                        }
                    }
                    let k_mat = &lsu_inv * rt * &lg_inv;
                    inner += k_mat.tr_mul(&k_mat);
                }
                cond_var[pr].push(map * inner * map.transpose() * sigma2);
            }
        }
        let su_inv = lsu_inv.tr_mul(&lsu_inv);
        for &(r, off) in &self.secondary {
            let q = self.q[r];
            let map = &originals[r];
            for l in 0..self.levels[r] {
                let b = off + l * q;
                let v = map * f.sol.rows(b, q);
                blups[r].set_row(l, &v.transpose());
                let block = su_inv.view((b, b), (q, q));
                cond_var[r].push(map * block * map.transpose() * sigma2);
            }
        }
        RemlSolution {
            method,
            criterion: self.criterion(f, method),
            sigma2,
            beta,
            beta_cov,
            lambdas,
            blups,
            cond_var,
            fitted: &self.y - &f.residuals,
            residuals: f.residuals.clone(),
            theta,
            converged: true,
            singular: false,
            evaluations: 0,
        }
    }
}
