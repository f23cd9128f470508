//! Dense linear programming for the L1 fit.
//!
//! Two engines live here. [`solve`] is a two-phase revised simplex for
//! general programs `min c'x, Ax <= b` with nonnegative or free variables.
//! [`solve_l1`] minimizes `||y - Phi x||_1` directly with an exchange method
//! on the condensed tableau of the residual equations; it visits the same
//! vertices as the simplex on [`l1_to_lp`] but works on an `m x n` tableau
//! instead of a `2m x (n + 3m)` one. Both use fixed pivot rules and are
//! bit-for-bit deterministic.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("system has no rows")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    IterationCapped,
    /// No progress over `degeneracy_limit` pivots and no optimality
    /// certificate at the last point.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Pivot cap; `None` means `50 * (variables + constraints)`.
    pub max_iter: Option<usize>,
    /// Tolerance on reduced costs and slopes.
    pub tol: f64,
    /// Pivots without progress before the general solver switches to
    /// Bland's rule; the L1 solver stops there and checks its certificate.
    pub degeneracy_limit: usize,
    /// Pivots between refactorizations of the basis.
    pub refactor_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: None,
            tol: 1e-9,
            degeneracy_limit: 100,
            refactor_every: 100,
        }
    }
}

/// `min c'x` subject to `Ax <= b`, with `x_j >= 0` unless `free[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
    pub free: Vec<bool>,
}

impl LinearProgram {
    pub fn new(c: Vec<f64>, a: DMatrix<f64>, b: Vec<f64>, free: Vec<bool>) -> Result<Self, LpError> {
        if a.ncols() != c.len() || free.len() != c.len() {
            return Err(LpError::Dimension(format!(
                "{} costs, {} columns, {} bound flags",
                c.len(),
                a.ncols(),
                free.len()
            )));
        }
        if a.nrows() != b.len() {
            return Err(LpError::Dimension(format!(
                "{} rows, {} right-hand sides",
                a.nrows(),
                b.len()
            )));
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(LpError::NonFinite("costs"));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(LpError::NonFinite("constraint matrix"));
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(LpError::NonFinite("right-hand side"));
        }
        Ok(LinearProgram { c, a, b, free })
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Largest violation of `Ax <= b` and of the sign bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.a.nrows() {
            let lhs: f64 = (0..self.a.ncols()).map(|j| self.a[(i, j)] * x[j]).sum();
            worst = worst.max(lhs - self.b[i]);
        }
        for (j, &xj) in x.iter().enumerate() {
            if !self.free[j] {
                worst = worst.max(-xj);
            }
        }
        worst
    }

    /// Plain-text dump in fixed MPS layout, for cross-checking with external
    /// solvers.
    pub fn to_mps(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "NAME          {name}");
        out.push_str("ROWS\n N  COST\n");
        for i in 0..self.num_constraints() {
            let _ = writeln!(out, " L  R{i}");
        }
        out.push_str("COLUMNS\n");
        for j in 0..self.num_vars() {
            if self.c[j] != 0.0 {
                let _ = writeln!(out, "    X{j:<8} COST      {:e}", self.c[j]);
            }
            for i in 0..self.num_constraints() {
                let v = self.a[(i, j)];
                if v != 0.0 {
                    let _ = writeln!(out, "    X{j:<8} R{i:<8} {v:e}");
                }
            }
        }
        out.push_str("RHS\n");
        for (i, &v) in self.b.iter().enumerate() {
            if v != 0.0 {
                let _ = writeln!(out, "    RHS       R{i:<8} {v:e}");
            }
        }
        out.push_str("BOUNDS\n");
        for (j, &f) in self.free.iter().enumerate() {
            if f {
                let _ = writeln!(out, " FR BND       X{j}");
            }
        }
        out.push_str("ENDATA\n");
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub iterations: usize,
    pub max_violation: f64,
    /// Multipliers `w >= 0` of the rows of `Ax <= b`; at an optimum
    /// `c + A'w >= 0` with equality on free variables.
    pub duals: Vec<f64>,
}

/// Epigraph form of `min ||Phi x - y||_1`: variables `(x, u)`, rows
/// `Phi x - u <= y` and `-Phi x - u <= -y`.
pub fn l1_to_lp(phi: &DMatrix<f64>, y: &[f64], nonneg: &[bool]) -> Result<LinearProgram, LpError> {
    let (m, n) = phi.shape();
    if m == 0 {
        return Err(LpError::Empty);
    }
    if y.len() != m || nonneg.len() != n {
        return Err(LpError::Dimension(format!(
            "Phi is {m}x{n}, y has {}, bound flags {}",
            y.len(),
            nonneg.len()
        )));
    }
    let mut a = DMatrix::zeros(2 * m, n + m);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = phi[(i, j)];
            a[(m + i, j)] = -phi[(i, j)];
        }
        a[(i, n + i)] = -1.0;
        a[(m + i, n + i)] = -1.0;
    }
    let mut c = vec![0.0; n + m];
    c[n..].iter_mut().for_each(|v| *v = 1.0);
    let b = y.iter().copied().chain(y.iter().map(|v| -v)).collect();
    let free = nonneg.iter().map(|&nn| !nn).chain(std::iter::repeat_n(false, m)).collect();
    LinearProgram::new(c, a, b, free)
}

/// Residuals of a claimed solution; never thresholded here.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificateReport {
    pub primal_violation: f64,
    pub objective: f64,
    pub objective_error: f64,
    pub dual_violation: f64,
    pub complementarity: f64,
    pub duality_gap: f64,
}

impl CertificateReport {
    pub fn max_residual(&self) -> f64 {
        self.primal_violation
            .max(self.objective_error)
            .max(self.dual_violation)
            .max(self.complementarity)
            .max(self.duality_gap)
    }
}

/// Recomputes feasibility, objective and the dual optimality conditions of
/// `sol` from scratch.
pub fn check_certificate(lp: &LinearProgram, sol: &LpSolution) -> CertificateReport {
    let x = &sol.x;
    let w = &sol.duals;
    let objective = lp.objective(x);
    let ax = &lp.a * DVector::from_column_slice(x);
    let mut dual_violation = 0.0f64;
    let mut complementarity = 0.0f64;
    for (i, &wi) in w.iter().enumerate() {
        dual_violation = dual_violation.max(-wi);
        complementarity = complementarity.max((wi * (lp.b[i] - ax[i])).abs());
    }
    let atw = lp.a.tr_mul(&DVector::from_column_slice(w));
    for j in 0..lp.num_vars() {
        let reduced = lp.c[j] + atw[j];
        if lp.free[j] {
            dual_violation = dual_violation.max(reduced.abs());
        } else {
            dual_violation = dual_violation.max(-reduced);
            complementarity = complementarity.max((x[j] * reduced).abs());
        }
    }
    let dual_objective: f64 = -lp.b.iter().zip(w).map(|(b, w)| b * w).sum::<f64>();
    CertificateReport {
        primal_violation: lp.max_violation(x).max(0.0),
        objective,
        objective_error: (objective - sol.objective).abs(),
        dual_violation,
        complementarity,
        duality_gap: (objective - dual_objective).abs(),
    }
}

// ---------------------------------------------------------------------------
// General revised simplex

struct Revised {
    a: DMatrix<f64>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    bland: bool,
    degenerate_run: usize,
    iterations: usize,
    since_refactor: usize,
}

enum PhaseEnd {
    Optimal,
    Unbounded,
    Capped,
}

impl Revised {
    fn duals_for(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.basis.len();
        let mut pi = vec![0.0; m];
        for (i, &bv) in self.basis.iter().enumerate() {
            let cb = cost[bv];
            if cb != 0.0 {
                for (k, p) in pi.iter_mut().enumerate() {
                    *p += cb * self.binv[(i, k)];
                }
            }
        }
        pi
    }

    fn refactor(&mut self) {
        let m = self.basis.len();
        let mut bmat = DMatrix::zeros(m, m);
        for (k, &col) in self.basis.iter().enumerate() {
            bmat.set_column(k, &self.a.column(col));
        }
        if let Some(inv) = bmat.try_inverse() {
            self.binv = inv;
            let xb = &self.binv * DVector::from_column_slice(&self.rhs);
            self.xb = xb.iter().copied().collect();
        }
        self.since_refactor = 0;
    }

    fn pivot(&mut self, row: usize, entering: usize, alpha: &[f64]) {
        let m = self.basis.len();
        let p = alpha[row];
        let theta = self.xb[row] / p;
        for i in 0..m {
            if i != row {
                self.xb[i] -= alpha[i] * theta;
            }
        }
        self.xb[row] = theta;
        for k in 0..m {
            self.binv[(row, k)] /= p;
        }
        for i in 0..m {
            if i != row && alpha[i] != 0.0 {
                let f = alpha[i];
                for k in 0..m {
                    let v = self.binv[(row, k)];
                    self.binv[(i, k)] -= f * v;
                }
            }
        }
        self.is_basic[self.basis[row]] = false;
        self.is_basic[entering] = true;
        self.basis[row] = entering;
    }

    fn run(&mut self, cost: &[f64], allowed: &[bool], opts: &SolverOptions, cap: usize) -> PhaseEnd {
        let (m, ncols) = self.a.shape();
        loop {
            if self.iterations >= cap {
                return PhaseEnd::Capped;
            }
            if self.since_refactor >= opts.refactor_every.min(50) {
                self.refactor();
            }
            let pi = self.duals_for(cost);
            let mut entering = None;
            let mut best = -opts.tol;
            for j in 0..ncols {
                if self.is_basic[j] || !allowed[j] {
                    continue;
                }
                let d = cost[j] - (0..m).map(|k| pi[k] * self.a[(k, j)]).sum::<f64>();
                if d < best {
                    entering = Some(j);
                    if self.bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                return PhaseEnd::Optimal;
            };
            let col = DVector::from_iterator(m, self.a.column(q).iter().copied());
            let alpha: Vec<f64> = (&self.binv * col).iter().copied().collect();
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                if alpha[i] <= 1e-11 {
                    continue;
                }
                let ratio = self.xb[i].max(0.0) / alpha[i];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        let tie = (ratio - best).abs() <= 1e-12 * (1.0 + best.abs());
                        let better = if tie {
                            if self.bland {
                                self.basis[i] < self.basis[r]
                            } else {
                                alpha[i] > alpha[r]
                            }
                        } else {
                            ratio < best
                        };
                        if better {
                            Some((i, ratio))
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
            let Some((r, ratio)) = leave else {
                return PhaseEnd::Unbounded;
            };
            if ratio <= 1e-12 {
                self.degenerate_run += 1;
                if self.degenerate_run > opts.degeneracy_limit {
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
            }
            self.pivot(r, q, &alpha);
            self.iterations += 1;
            self.since_refactor += 1;
        }
    }
}

/// Two-phase revised simplex with Dantzig pricing, falling back to Bland's
/// rule once degenerate pivots pile up.
pub fn solve(lp: &LinearProgram, opts: &SolverOptions) -> Result<LpSolution, LpError> {
    let m = lp.num_constraints();
    let n = lp.num_vars();
    // column layout: x+ (n), x- for free vars, slacks (m), artificials
    let mut minus_of = vec![usize::MAX; n];
    let mut ncols = n;
    for j in 0..n {
        if lp.free[j] {
            minus_of[j] = ncols;
            ncols += 1;
        }
    }
    let slack0 = ncols;
    ncols += m;
    let sign: Vec<f64> = lp.b.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
    let art_rows: Vec<usize> = (0..m).filter(|&i| sign[i] < 0.0).collect();
    let art0 = ncols;
    ncols += art_rows.len();

    let mut a = DMatrix::zeros(m, ncols);
    for i in 0..m {
        for j in 0..n {
            let v = sign[i] * lp.a[(i, j)];
            a[(i, j)] = v;
            if lp.free[j] {
                a[(i, minus_of[j])] = -v;
            }
        }
        a[(i, slack0 + i)] = sign[i];
    }
    let mut basis: Vec<usize> = (0..m).map(|i| slack0 + i).collect();
    for (k, &i) in art_rows.iter().enumerate() {
        a[(i, art0 + k)] = 1.0;
        basis[i] = art0 + k;
    }
    let rhs: Vec<f64> = lp.b.iter().map(|b| b.abs()).collect();
    let mut is_basic = vec![false; ncols];
    for &bv in &basis {
        is_basic[bv] = true;
    }
    let mut state = Revised {
        a,
        xb: rhs.clone(),
        rhs,
        basis,
        is_basic,
        binv: DMatrix::identity(m, m),
        bland: false,
        degenerate_run: 0,
        iterations: 0,
        since_refactor: 0,
    };
    let cap = opts.max_iter.unwrap_or(50 * (n + m)).max(1);

    let mut status = LpStatus::Optimal;
    if !art_rows.is_empty() {
        let mut cost1 = vec![0.0; ncols];
        cost1[art0..].iter_mut().for_each(|c| *c = 1.0);
        let allowed = vec![true; ncols];
        match state.run(&cost1, &allowed, opts, cap) {
            PhaseEnd::Capped => status = LpStatus::IterationCapped,
            PhaseEnd::Unbounded => unreachable!("phase one objective is bounded below"),
            PhaseEnd::Optimal => {
                state.refactor();
                let infeas: f64 = state
                    .basis
                    .iter()
                    .zip(&state.xb)
                    .filter(|(&bv, _)| bv >= art0)
                    .map(|(_, &x)| x)
                    .sum();
                let scale = 1.0 + lp.b.iter().fold(0.0f64, |acc, b| acc.max(b.abs()));
                if infeas > 1e-7 * scale {
                    return Err(LpError::Infeasible);
                }
                // swap zero-valued artificials out of the basis where possible
                for r in 0..m {
                    if state.basis[r] < art0 {
                        continue;
                    }
                    let pick = (0..art0).find(|&j| {
                        !state.is_basic[j]
                            && (0..m).map(|k| state.binv[(r, k)] * state.a[(k, j)]).sum::<f64>().abs() > 1e-9
                    });
                    if let Some(j) = pick {
                        let col = DVector::from_iterator(m, state.a.column(j).iter().copied());
                        let alpha: Vec<f64> = (&state.binv * col).iter().copied().collect();
                        state.pivot(r, j, &alpha);
                    }
                }
            }
        }
    }

    let mut cost2 = vec![0.0; ncols];
    for j in 0..n {
        cost2[j] = lp.c[j];
        if lp.free[j] {
            cost2[minus_of[j]] = -lp.c[j];
        }
    }
    if status == LpStatus::Optimal {
        let allowed: Vec<bool> = (0..ncols).map(|j| j < art0).collect();
        state.bland = false;
        state.degenerate_run = 0;
        match state.run(&cost2, &allowed, opts, cap) {
            PhaseEnd::Optimal => {}
            PhaseEnd::Unbounded => return Err(LpError::Unbounded),
            PhaseEnd::Capped => status = LpStatus::IterationCapped,
        }
        state.refactor();
    }

    let mut full = vec![0.0; ncols];
    for (&bv, &v) in state.basis.iter().zip(&state.xb) {
        full[bv] = v;
    }
    let x: Vec<f64> = (0..n)
        .map(|j| if lp.free[j] { full[j] - full[minus_of[j]] } else { full[j] })
        .collect();
    let pi = state.duals_for(&cost2);
    let duals = (0..m).map(|i| -pi[i] * sign[i]).collect();
    Ok(LpSolution {
        objective: lp.objective(&x),
        max_violation: lp.max_violation(&x).max(0.0),
        x,
        status,
        iterations: state.iterations,
        duals,
    })
}

// ---------------------------------------------------------------------------
// L1 exchange method

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Var {
    X(usize),
    R(usize),
}

/// Relative size of the tie-breaking perturbation of the targets.
const PERTURBATION: f64 = 1e-9;
const PERTURBATION_SEED: u64 = 0x5eed;

/// Result of [`solve_l1`].
#[derive(Clone, Debug, PartialEq)]
pub struct L1Solution {
    pub x: Vec<f64>,
    /// `y - Phi x`.
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub iterations: usize,
    /// Dual vector `d` with `|d| <= 1`, `Phi'd <= 0` on nonnegative columns
    /// and `Phi'd = 0` on free ones; `y'd` equals the objective at optimum.
    pub dual: Vec<f64>,
}

impl L1Solution {
    pub fn dual_objective(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.dual).map(|(y, d)| y * d).sum()
    }

    /// The same point as a solution of [`l1_to_lp`], for [`check_certificate`].
    pub fn to_epigraph(&self) -> LpSolution {
        let m = self.residuals.len();
        let mut x = self.x.clone();
        x.extend(self.residuals.iter().map(|r| r.abs()));
        let mut duals = vec![0.0; 2 * m];
        for (i, &d) in self.dual.iter().enumerate() {
            duals[i] = (-d).max(0.0);
            duals[m + i] = d.max(0.0);
        }
        LpSolution {
            x,
            objective: self.objective,
            status: self.status,
            iterations: self.iterations,
            max_violation: 0.0,
            duals,
        }
    }
}

struct Exchange<'a> {
    phi: &'a DMatrix<f64>,
    /// Current targets; perturbed during the first stage.
    y: Vec<f64>,
    nonneg: &'a [bool],
    m: usize,
    n: usize,
    /// Row-major `m x n` tableau: `basic_r = b_r - sum_s t[r][s] nonbasic_s`.
    t: Vec<f64>,
    b: Vec<f64>,
    row_var: Vec<Var>,
    col_var: Vec<Var>,
    /// Sign bookkeeping of basic residuals; `sigma * b >= 0` up to rounding.
    sigma: Vec<f64>,
}

impl<'a> Exchange<'a> {
    fn new(phi: &'a DMatrix<f64>, y: &'a [f64], nonneg: &'a [bool]) -> Self {
        let (m, n) = phi.shape();
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[i * n + j] = phi[(i, j)];
            }
        }
        Exchange {
            phi,
            y: y.to_vec(),
            nonneg,
            m,
            n,
            t,
            b: y.to_vec(),
            row_var: (0..m).map(Var::R).collect(),
            col_var: (0..n).map(Var::X).collect(),
            sigma: y.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect(),
        }
    }

    fn key(&self, v: Var) -> usize {
        match v {
            Var::X(j) => j,
            Var::R(i) => self.n + i,
        }
    }

    /// `z_s = sum over basic residual rows of sigma_r t[r][s]`.
    fn z(&self) -> Vec<f64> {
        let n = self.n;
        let mut z = vec![0.0; n];
        for r in 0..self.m {
            if let Var::R(_) = self.row_var[r] {
                let sg = self.sigma[r];
                let row = &self.t[r * n..(r + 1) * n];
                for (zs, &v) in z.iter_mut().zip(row) {
                    *zs += sg * v;
                }
            }
        }
        z
    }

    /// Best descent column as `(column, direction, slope)`.
    fn price(&self, z: &[f64], tol: f64) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for s in 0..self.n {
            let (dir, g) = match self.col_var[s] {
                Var::X(j) if self.nonneg[j] => (1.0, -z[s]),
                Var::X(_) => {
                    let dir = if z[s] >= 0.0 { 1.0 } else { -1.0 };
                    (dir, -z[s].abs())
                }
                Var::R(_) => {
                    let dir = if z[s] >= 0.0 { 1.0 } else { -1.0 };
                    (dir, 1.0 - z[s].abs())
                }
            };
            if g < -tol {
                let better = match best {
                    None => true,
                    Some((bs, _, bg)) => {
                        g < bg || (g == bg && self.key(self.col_var[s]) < self.key(self.col_var[bs]))
                    }
                };
                if better {
                    best = Some((s, dir, g));
                }
            }
        }
        best
    }

    /// Leaving row and the rows passed through on the way.
    fn ratio(&self, s: usize, dir: f64, slope: f64, tol: f64) -> Option<(usize, Vec<usize>)> {
        let n = self.n;
        let mut colmax = 0.0f64;
        for r in 0..self.m {
            colmax = colmax.max(self.t[r * n + s].abs());
        }
        let floor = 1e-12 * colmax.max(1e-300);
        // (t, hard stop first, variable key, row)
        let mut bps: Vec<(f64, u8, usize, usize)> = Vec::new();
        for r in 0..self.m {
            let a = self.t[r * n + s] * dir;
            if a.abs() <= floor {
                continue;
            }
            match self.row_var[r] {
                Var::X(j) => {
                    if self.nonneg[j] && a > 0.0 {
                        bps.push((self.b[r].max(0.0) / a, 0, j, r));
                    }
                }
                Var::R(i) => {
                    if self.sigma[r] * a > 0.0 {
                        bps.push(((self.sigma[r] * self.b[r]).max(0.0) / a.abs(), 1, n + i, r));
                    }
                }
            }
        }
        let cmp = |p: &(f64, u8, usize, usize), q: &(f64, u8, usize, usize)| {
            p.0.partial_cmp(&q.0)
                .unwrap_or(Ordering::Equal)
                .then(p.1.cmp(&q.1))
                .then(p.2.cmp(&q.2))
        };
        bps.sort_by(cmp);
        let mut g = slope;
        let mut passed = Vec::new();
        for &(_, hard, _, r) in &bps {
            if hard == 0 {
                return Some((r, passed));
            }
            g += 2.0 * self.t[r * n + s].abs();
            if g >= -tol {
                return Some((r, passed));
            }
            passed.push(r);
        }
        None
    }

    fn pivot(&mut self, r: usize, s: usize) {
        let n = self.n;
        let p = self.t[r * n + s];
        let br = self.b[r] / p;
        let mut prow: Vec<f64> = self.t[r * n..(r + 1) * n].iter().map(|v| v / p).collect();
        prow[s] = 1.0 / p;
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * n + s];
            if f == 0.0 {
                continue;
            }
            self.b[i] -= f * br;
            let row = &mut self.t[i * n..(i + 1) * n];
            for (v, &pv) in row.iter_mut().zip(&prow) {
                *v -= f * pv;
            }
            row[s] = -f / p;
        }
        self.t[r * n..(r + 1) * n].copy_from_slice(&prow);
        self.b[r] = br;
        std::mem::swap(&mut self.row_var[r], &mut self.col_var[s]);
    }

    /// Basic x columns and nonbasic residual rows; equal in number.
    fn active_sets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut j_basic: Vec<usize> = self
            .row_var
            .iter()
            .filter_map(|v| if let Var::X(j) = v { Some(*j) } else { None })
            .collect();
        let mut r_nonbasic: Vec<usize> = self
            .col_var
            .iter()
            .filter_map(|v| if let Var::R(i) = v { Some(*i) } else { None })
            .collect();
        j_basic.sort_unstable();
        r_nonbasic.sort_unstable();
        (j_basic, r_nonbasic)
    }

    fn basis_matrix(&self, jb: &[usize], rn: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rn.len(), jb.len(), |a, c| self.phi[(rn[a], jb[c])])
    }

    /// Rebuilds tableau and values from the basis; returns false if the basis
    /// matrix is numerically singular.
    fn refactor(&mut self) -> bool {
        let (jb, rn) = self.active_sets();
        let p = jb.len();
        let minv = if p == 0 {
            DMatrix::zeros(0, 0)
        } else {
            match self.basis_matrix(&jb, &rn).lu().try_inverse() {
                Some(inv) => inv,
                None => return false,
            }
        };
        let pos_j: std::collections::HashMap<usize, usize> =
            jb.iter().enumerate().map(|(k, &j)| (j, k)).collect();
        let pos_r: std::collections::HashMap<usize, usize> =
            rn.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let nonbasic_x: Vec<(usize, usize)> = self
            .col_var
            .iter()
            .enumerate()
            .filter_map(|(s, v)| if let Var::X(j) = v { Some((s, *j)) } else { None })
            .collect();
        let y_r = DVector::from_iterator(p, rn.iter().map(|&i| self.y[i]));
        let x_j = &minv * y_r;
        // W = Minv * Phi[R, nonbasic x]
        let phi_rn = DMatrix::from_fn(p, nonbasic_x.len(), |a, c| self.phi[(rn[a], nonbasic_x[c].1)]);
        let w = &minv * phi_rn;
        let n = self.n;
        for r in 0..self.m {
            match self.row_var[r] {
                Var::X(j) => {
                    let a = pos_j[&j];
                    self.b[r] = x_j[a];
                    for s in 0..n {
                        self.t[r * n + s] = match self.col_var[s] {
                            Var::R(i) => minv[(a, pos_r[&i])],
                            Var::X(_) => 0.0,
                        };
                    }
                    for (c, &(s, _)) in nonbasic_x.iter().enumerate() {
                        self.t[r * n + s] = w[(a, c)];
                    }
                }
                Var::R(i) => {
                    let phi_ij = DVector::from_iterator(p, jb.iter().map(|&j| self.phi[(i, j)]));
                    let u = minv.tr_mul(&phi_ij);
                    self.b[r] = self.y[i] - phi_ij.dot(&x_j);
                    for s in 0..n {
                        self.t[r * n + s] = match self.col_var[s] {
                            Var::R(k) => -u[pos_r[&k]],
                            Var::X(_) => 0.0,
                        };
                    }
                    for (c, &(s, jn)) in nonbasic_x.iter().enumerate() {
                        let uw: f64 = (0..p).map(|a| phi_ij[a] * w[(a, c)]).sum();
                        self.t[r * n + s] = self.phi[(i, jn)] - uw;
                    }
                }
            }
        }
        for r in 0..self.m {
            if let Var::R(_) = self.row_var[r] {
                if self.b[r] > 1e-12 {
                    self.sigma[r] = 1.0;
                } else if self.b[r] < -1e-12 {
                    self.sigma[r] = -1.0;
                }
            }
        }
        true
    }

    /// Pivots until no descent column remains, the cap is reached, or
    /// `degeneracy_limit` pivots pass without progress.
    fn run(&mut self, opts: &SolverOptions, cap: usize, iterations: &mut usize) -> RunEnd {
        let mut since_refactor = 0;
        let mut stalled = 0;
        let noise = 1e-11 * (1.0 + self.y.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        // progress is measured against the best value so far so that round-off
        // wobble cannot reset the stall counter
        let mut best = self.b.iter().map(|v| v.abs()).sum::<f64>();
        loop {
            if *iterations >= cap {
                self.refactor();
                return RunEnd::Capped;
            }
            if since_refactor >= opts.refactor_every {
                self.refactor();
                since_refactor = 0;
            }
            let z = self.z();
            let Some((s, dir, slope)) = self.price(&z, opts.tol) else {
                if since_refactor == 0 {
                    return RunEnd::Optimal;
                }
                // confirm optimality on a fresh factorization
                self.refactor();
                since_refactor = 0;
                continue;
            };
            let Some((r, passed)) = self.ratio(s, dir, slope, opts.tol) else {
                // the objective is bounded below, so this only happens when
                // round-off has corrupted the tableau
                self.refactor();
                if since_refactor == 0 {
                    return RunEnd::Stalled;
                }
                since_refactor = 0;
                continue;
            };
            let entering = self.col_var[s];
            self.pivot(r, s);
            for &pr in &passed {
                self.sigma[pr] = -self.sigma[pr];
            }
            if let Var::R(_) = entering {
                self.sigma[r] = dir;
            }
            for row in 0..self.m {
                if let Var::R(_) = self.row_var[row] {
                    let bv = self.b[row];
                    if bv.abs() > noise && bv * self.sigma[row] < 0.0 {
                        self.sigma[row] = bv.signum();
                    }
                }
            }
            *iterations += 1;
            since_refactor += 1;
            let objective: f64 = (0..self.m)
                .filter(|&row| matches!(self.row_var[row], Var::R(_)))
                .map(|row| self.b[row].abs())
                .sum();
            if objective < best - noise {
                best = objective;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled > opts.degeneracy_limit {
                    self.refactor();
                    return RunEnd::Stalled;
                }
            }
        }
    }

    fn solution(&self, status: LpStatus, iterations: usize) -> L1Solution {
        let mut x = vec![0.0; self.n];
        for r in 0..self.m {
            if let Var::X(j) = self.row_var[r] {
                x[j] = self.b[r];
            }
        }
        let xv = DVector::from_column_slice(&x);
        let fitted = self.phi * &xv;
        let residuals: Vec<f64> = (0..self.m).map(|i| self.y[i] - fitted[i]).collect();
        let objective = residuals.iter().map(|r| r.abs()).sum();

        // duals: basic residual rows carry their sign, the rest solve
        // M' d_R = -Phi[S, J]' sigma_S
        let (jb, rn) = self.active_sets();
        let mut dual = vec![0.0; self.m];
        let mut rhs = DVector::zeros(jb.len());
        for r in 0..self.m {
            if let Var::R(i) = self.row_var[r] {
                dual[i] = self.sigma[r];
                for (c, &j) in jb.iter().enumerate() {
                    rhs[c] -= self.phi[(i, j)] * self.sigma[r];
                }
            }
        }
        if !jb.is_empty() {
            let mt = self.basis_matrix(&jb, &rn).transpose();
            if let Some(d_r) = mt.lu().solve(&rhs) {
                for (a, &i) in rn.iter().enumerate() {
                    dual[i] = d_r[a];
                }
            }
        }
        L1Solution {
            x,
            residuals,
            objective,
            status,
            iterations,
            dual,
        }
    }
}

/// Minimizes `||y - Phi x||_1` with `x_j >= 0` where `nonneg[j]`.
pub fn solve_l1(
    phi: &DMatrix<f64>,
    y: &[f64],
    nonneg: &[bool],
    opts: &SolverOptions,
) -> Result<L1Solution, LpError> {
    let (m, n) = phi.shape();
    if m == 0 {
        return Err(LpError::Empty);
    }
    if y.len() != m || nonneg.len() != n {
        return Err(LpError::Dimension(format!(
            "Phi is {m}x{n}, y has {}, bound flags {}",
            y.len(),
            nonneg.len()
        )));
    }
    if !phi.iter().all(|v| v.is_finite()) {
        return Err(LpError::NonFinite("data matrix"));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(LpError::NonFinite("target vector"));
    }
    let mut ex = Exchange::new(phi, y, nonneg);
    if n == 0 {
        return Ok(ex.solution(LpStatus::Optimal, 0));
    }
    let cap = opts.max_iter.unwrap_or(50 * (n + 3 * m)).max(1);
    let mut iterations = 0;
    // Exact fits leave most residuals at zero, which stalls the exchange on
    // degenerate vertices. A tiny seeded perturbation of y breaks the ties;
    // the second stage restores y and finishes from the perturbed optimum.
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale > 0.0 && m > n {
        let mut rng = ChaCha8Rng::seed_from_u64(PERTURBATION_SEED);
        ex.y = y
            .iter()
            .map(|&v| v + PERTURBATION * scale * rng.random_range(-1.0..=1.0))
            .collect();
        ex.b = ex.y.clone();
        ex.sigma = ex.y.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
        ex.run(opts, cap, &mut iterations);
        ex.y = y.to_vec();
        ex.refactor();
    }
    let end = ex.run(opts, cap, &mut iterations);
    let mut sol = ex.solution(LpStatus::Optimal, iterations);
    sol.status = match end {
        RunEnd::Optimal => LpStatus::Optimal,
        RunEnd::Capped => LpStatus::IterationCapped,
        RunEnd::Stalled if l1_certified(phi, y, nonneg, &sol) => LpStatus::Optimal,
        RunEnd::Stalled => LpStatus::Stalled,
    };
    Ok(sol)
}

enum RunEnd {
    Optimal,
    Capped,
    Stalled,
}

/// Weak-duality check of an L1 solution: either the objective is already at
/// round-off level or the stored dual is feasible and closes the gap.
fn l1_certified(phi: &DMatrix<f64>, y: &[f64], nonneg: &[bool], sol: &L1Solution) -> bool {
    let tol = 1e-9;
    let gap_tol = tol * (1.0 + y.iter().map(|v| v.abs()).sum::<f64>());
    if sol.objective <= gap_tol {
        return true;
    }
    if sol.dual.iter().any(|d| d.abs() > 1.0 + tol) {
        return false;
    }
    let d = DVector::from_column_slice(&sol.dual);
    for (j, &nn) in nonneg.iter().enumerate() {
        let col = phi.column(j);
        let g = col.dot(&d);
        let slack = tol * (1.0 + col.iter().map(|v| v.abs()).sum::<f64>());
        if g > slack || (!nn && g < -slack) {
            return false;
        }
    }
    (sol.objective - sol.dual_objective(y)).abs() <= gap_tol
}
