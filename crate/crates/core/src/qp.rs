//! Dense convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ vᵀQv + qᵀv
//!     subject to  Aeq v  = beq
//!                 Ain v <= bin
//!                 lower <= v <= upper      (entries may be ±∞)
//! ```
//!
//! and are solved by a primal-dual interior-point method with Mehrotra's
//! predictor-corrector. Bounds are handled as diagonal blocks so they never
//! enter the dense constraint matrices. Variables with `lower == upper` are
//! turned into equality rows. Infeasibility is decided by an elastic phase-1
//! LP that minimizes total constraint violation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use thiserror::Error;

/// Default absolute KKT tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 200;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_PIVOT_TOL: f64 = 1e-10;
const STEP_FRACTION: f64 = 0.995;
const DIVERGENCE: f64 = 1e13;
const POLISH_ACTIVE_TOLS: [f64; 4] = [1e-7, 1e-9, 1e-5, 1e-3];
const POLISH_RELEASES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("objective matrix is not positive semidefinite (pivot {pivot:e})")]
    NotPsd { pivot: f64 },
    #[error("lower bound exceeds upper bound for variable {0}")]
    InvalidBounds(usize),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub dual_in: DVector<f64>,
    pub dual_lower: DVector<f64>,
    pub dual_upper: DVector<f64>,
    pub status: QpStatus,
    /// ∞-norm of stationarity, complementarity and feasibility violations.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Breakdown of the KKT residual of a primal-dual point.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktParts {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub stationarity_scale: f64,
    pub feasibility_scale: f64,
}

impl KktParts {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }

    fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol * self.stationarity_scale
            && self.complementarity <= tol * self.stationarity_scale
            && self.feasibility <= tol * self.feasibility_scale
    }
}

impl QpProblem {
    /// Problem with `n` variables, no constraints and free bounds.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        QpProblem {
            hessian,
            linear,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hessian * v)) + self.linear.dot(v)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(QpError::Dimension(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)))
            } else {
                Ok(())
            }
        };
        dim("Q", self.hessian.shape(), (n, n))?;
        dim("Aeq", self.a_eq.shape(), (self.b_eq.len(), n))?;
        dim("Ain", self.a_in.shape(), (self.b_in.len(), n))?;
        dim("lower", (self.lower.len(), 1), (n, 1))?;
        dim("upper", (self.upper.len(), 1), (n, 1))?;

        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.hessian.as_slice()) {
            return Err(QpError::NonFinite("Q"));
        }
        if !finite(self.linear.as_slice()) {
            return Err(QpError::NonFinite("q"));
        }
        if !finite(self.a_eq.as_slice()) || !finite(self.b_eq.as_slice()) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        if !finite(self.a_in.as_slice()) || !finite(self.b_in.as_slice()) {
            return Err(QpError::NonFinite("inequality constraints"));
        }
        for i in 0..n {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(QpError::InvalidBounds(i));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (self.hessian[(i, j)], self.hessian[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(QpError::NotSymmetric { row: i, col: j });
                }
            }
        }
        check_psd(&self.hessian)
    }

    /// KKT residual parts of an arbitrary primal-dual point.
    pub fn kkt_parts(
        &self,
        x: &DVector<f64>,
        dual_eq: &DVector<f64>,
        dual_in: &DVector<f64>,
        dual_lower: &DVector<f64>,
        dual_upper: &DVector<f64>,
    ) -> KktParts {
        let finite = |v: &DVector<f64>| v.iter().all(|e| e.is_finite());
        if ![x, dual_eq, dual_in, dual_lower, dual_upper].into_iter().all(finite) {
            return KktParts {
                stationarity: f64::INFINITY,
                feasibility: f64::INFINITY,
                complementarity: f64::INFINITY,
                stationarity_scale: 1.0,
                feasibility_scale: 1.0,
            };
        }
        let qx = &self.hessian * x;
        let at_y = self.a_eq.tr_mul(dual_eq);
        let at_z = self.a_in.tr_mul(dual_in);
        let grad = &qx + &self.linear + &at_y + &at_z - dual_lower + dual_upper;
        let stationarity = inf_norm(&grad);
        let stationarity_scale = [
            inf_norm(&qx),
            inf_norm(&self.linear),
            inf_norm(&at_y),
            inf_norm(&at_z),
            inf_norm(dual_lower),
            inf_norm(dual_upper),
        ]
        .into_iter()
        .fold(1.0, f64::max);

        let mut feasibility: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        let eq_res = &self.a_eq * x - &self.b_eq;
        feasibility = feasibility.max(inf_norm(&eq_res));
        let slack = &self.b_in - &self.a_in * x;
        for k in 0..slack.len() {
            feasibility = feasibility.max(-slack[k]);
            complementarity = complementarity.max((dual_in[k] * slack[k]).abs());
            feasibility = feasibility.max(-dual_in[k]);
        }
        for i in 0..x.len() {
            if self.lower[i].is_finite() {
                feasibility = feasibility.max(self.lower[i] - x[i]);
                complementarity = complementarity.max((dual_lower[i] * (x[i] - self.lower[i])).abs());
            }
            if self.upper[i].is_finite() {
                feasibility = feasibility.max(x[i] - self.upper[i]);
                complementarity = complementarity.max((dual_upper[i] * (self.upper[i] - x[i])).abs());
            }
            feasibility = feasibility.max(-dual_lower[i]).max(-dual_upper[i]);
        }
        let bound_scale = self
            .lower
            .iter()
            .chain(self.upper.iter())
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let feasibility_scale = 1f64.max(inf_norm(&self.b_eq)).max(inf_norm(&self.b_in)).max(bound_scale);
        KktParts {
            stationarity,
            feasibility,
            complementarity,
            stationarity_scale,
            feasibility_scale,
        }
    }

    pub fn kkt_residual(&self, sol: &QpSolution) -> f64 {
        self.kkt_parts(&sol.primal, &sol.dual_eq, &sol.dual_in, &sol.dual_lower, &sol.dual_upper)
            .max()
    }
}

/// ∞-norm that reports NaN entries as +∞.
pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter()
        .fold(0.0, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

/// Rejects matrices with a pivot below `-1e-10 · max(1, max|Qᵢᵢ|)` in a
/// diagonally pivoted symmetric elimination.
pub fn check_psd(q: &DMatrix<f64>) -> Result<(), QpError> {
    let n = q.nrows();
    let scale = (0..n).fold(1.0f64, |m, i| m.max(q[(i, i)].abs()));
    let thr = PSD_PIVOT_TOL * scale;
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || q[(i, j)] == 0.0));
    if diagonal {
        return match (0..n).map(|i| q[(i, i)]).find(|&d| d < -thr) {
            Some(pivot) => Err(QpError::NotPsd { pivot }),
            None => Ok(()),
        };
    }
    let mut a = q.clone();
    let mut remaining: Vec<usize> = (0..n).collect();
    while !remaining.is_empty() {
        let (pos, &k) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| a[(*x.1, *x.1)].total_cmp(&a[(*y.1, *y.1)]))
            .unwrap();
        let d = a[(k, k)];
        if d < -thr {
            return Err(QpError::NotPsd { pivot: d });
        }
        if d <= thr {
            // every remaining diagonal is ~0, so PSD forces the block to vanish
            for &i in &remaining {
                for &j in &remaining {
                    if a[(i, j)].abs() > 1e-8 * scale {
                        return Err(QpError::NotPsd { pivot: -a[(i, j)].abs() });
                    }
                }
            }
            return Ok(());
        }
        remaining.swap_remove(pos);
        for &i in &remaining {
            let f = a[(i, k)] / d;
            if f == 0.0 {
                continue;
            }
            for &j in &remaining {
                a[(i, j)] -= f * a[(k, j)];
            }
        }
    }
    Ok(())
}

/// Solves `p` to absolute KKT tolerance `tol` (relative to the data scale
/// when the data exceeds unit magnitude).
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    if !(tol > 0.0) {
        return Err(QpError::InvalidTolerance(tol));
    }
    p.validate()?;
    Ok(solve_validated(p, tol, max_iter, true))
}

fn solve_validated(p: &QpProblem, tol: f64, max_iter: usize, allow_phase1: bool) -> QpSolution {
    let mut ipm = Ipm::new(p);
    let outcome = ipm.run(tol, max_iter);
    let mut sol = ipm.extract(outcome.iterations);
    let parts = p.kkt_parts(&sol.primal, &sol.dual_eq, &sol.dual_in, &sol.dual_lower, &sol.dual_upper);
    sol.kkt_residual = parts.max();
    let within = parts.within(tol);
    let polished = POLISH_ACTIVE_TOLS.iter().find_map(|&t| {
        let mut exact = polish(p, &sol, t)?;
        let check = p.kkt_parts(&exact.primal, &exact.dual_eq, &exact.dual_in, &exact.dual_lower, &exact.dual_upper);
        exact.kkt_residual = check.max();
        (check.within(tol) && (!within || check.max() <= parts.max() || check.max() <= tol)).then_some(exact)
    });
    if let Some(exact) = polished {
        return exact;
    }
    if within {
        sol.status = QpStatus::Optimal;
        return sol;
    }
    sol.status = QpStatus::MaxIter;
    if allow_phase1 {
        let violation = min_violation(p, tol, max_iter);
        if violation > tol * parts.feasibility_scale {
            sol.status = QpStatus::Infeasible;
            return sol;
        }
    }
    if outcome.primal_diverged {
        sol.status = QpStatus::Unbounded;
    }
    sol
}

/// Re-solves the equality system of the active set guessed from an
/// interior-point solution: constraints whose multiplier exceeds their slack
/// are held tight, bound-active variables are fixed. Constraints that come
/// back with a negative multiplier are released one at a time. Returns
/// `None` when no consistent, primal-feasible active set is found.
fn polish(p: &QpProblem, sol: &QpSolution, active_tol: f64) -> Option<QpSolution> {
    let n = p.n();
    let x0 = &sol.primal;
    let near = active_tol * (1.0 + inf_norm(x0));
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if p.lower[i] == p.upper[i] {
            fixed[i] = Some(p.lower[i]);
        } else if p.lower[i].is_finite() && (sol.dual_lower[i] > x0[i] - p.lower[i] || x0[i] - p.lower[i] < near) {
            fixed[i] = Some(p.lower[i]);
        } else if p.upper[i].is_finite() && (sol.dual_upper[i] > p.upper[i] - x0[i] || p.upper[i] - x0[i] < near) {
            fixed[i] = Some(p.upper[i]);
        }
    }
    let slack = &p.b_in - &p.a_in * x0;
    let mut active: Vec<usize> = (0..slack.len())
        .filter(|&k| sol.dual_in[k] > slack[k] || slack[k] < near)
        .collect();
    for _ in 0..POLISH_RELEASES {
        let cand = solve_on_active(p, sol, &fixed, &active)?;
        let scale = 1e-12 * (1.0 + inf_norm(&cand.dual_in).max(inf_norm(&cand.dual_lower)).max(inf_norm(&cand.dual_upper)));
        let mut worst: Option<(f64, Release)> = None;
        let mut note = |v: f64, r: Release| {
            if v < -scale && worst.as_ref().is_none_or(|(w, _)| v < *w) {
                worst = Some((v, r));
            }
        };
        for &k in &active {
            note(cand.dual_in[k], Release::Row(k));
        }
        for i in 0..n {
            if fixed[i].is_some() && p.lower[i] != p.upper[i] {
                note(cand.dual_lower[i].min(cand.dual_upper[i]), Release::Bound(i));
            }
        }
        match worst {
            None => return Some(cand),
            Some((_, Release::Row(k))) => active.retain(|&j| j != k),
            Some((_, Release::Bound(i))) => fixed[i] = None,
        }
    }
    None
}

enum Release {
    Row(usize),
    Bound(usize),
}

/// Solves the KKT system with `active` inequality rows tight and `fixed`
/// variables pinned, as a correction to the interior-point iterate.
fn solve_on_active(p: &QpProblem, sol: &QpSolution, fixed: &[Option<f64>], active: &[usize]) -> Option<QpSolution> {
    let n = p.n();
    let x0 = &sol.primal;
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let me = p.b_eq.len();
    let (nf, m) = (free.len(), me + active.len());

    let mut xb = DVector::zeros(n);
    for i in 0..n {
        if let Some(v) = fixed[i] {
            xb[i] = v;
        }
    }
    let row = |r: usize| if r < me { p.a_eq.row(r) } else { p.a_in.row(active[r - me]) };
    let rhs = |r: usize| if r < me { p.b_eq[r] } else { p.b_in[active[r - me]] };
    let qxb = &p.hessian * &xb;
    let mut k = DMatrix::zeros(nf + m, nf + m);
    let mut r = DVector::zeros(nf + m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = p.hessian[(i, j)];
        }
        r[a] = -p.linear[i] - qxb[i];
    }
    for c in 0..m {
        let ar = row(c);
        for (a, &i) in free.iter().enumerate() {
            k[(nf + c, a)] = ar[i];
            k[(a, nf + c)] = ar[i];
        }
        r[nf + c] = rhs(c) - (ar * &xb)[0];
    }
    // correct the interior-point iterate rather than solve from scratch, so
    // degenerate faces keep the point close to where the iterate was
    let mut z0 = DVector::zeros(nf + m);
    for (a, &i) in free.iter().enumerate() {
        z0[a] = x0[i];
    }
    for c in 0..m {
        z0[nf + c] = if c < me { sol.dual_eq[c] } else { sol.dual_in[active[c - me]] };
    }
    let r = &r - &k * &z0;
    let consistent = |d: &DVector<f64>| inf_norm(&(&k * d - &r)) <= 1e-12 * (1.0 + inf_norm(&r) + inf_norm(&z0));
    let dz = match (nf + m > 0).then(|| LU::new(k.clone()).solve(&r)).flatten() {
        Some(d) if consistent(&d) => d,
        _ if nf + m == 0 => DVector::zeros(0),
        _ => k.clone().svd(true, true).solve(&r, 1e-12).ok().filter(|d| consistent(d))?,
    };
    let z = z0 + dz;
    if z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = xb;
    for (a, &i) in free.iter().enumerate() {
        x[i] = z[a];
    }
    let mut dual_eq = DVector::zeros(me);
    let mut dual_in = DVector::zeros(p.b_in.len());
    for c in 0..m {
        if c < me {
            dual_eq[c] = z[nf + c];
        } else {
            dual_in[active[c - me]] = z[nf + c];
        }
    }
    let grad = &p.hessian * &x + &p.linear + p.a_eq.tr_mul(&dual_eq) + p.a_in.tr_mul(&dual_in);
    let mut dual_lower = DVector::zeros(n);
    let mut dual_upper = DVector::zeros(n);
    for i in 0..n {
        match fixed[i] {
            Some(v) if v == p.lower[i] && (grad[i] >= 0.0 || p.lower[i] != p.upper[i]) => dual_lower[i] = grad[i],
            Some(_) => dual_upper[i] = -grad[i],
            None => {}
        }
    }
    let mut violation = inf_norm(&(&p.a_eq * &x - &p.b_eq));
    violation = violation.max((&p.a_in * &x - &p.b_in).iter().fold(0.0, |m, v| m.max(*v)));
    for i in 0..n {
        violation = violation.max(p.lower[i] - x[i]).max(x[i] - p.upper[i]);
    }
    if violation > 1e-12 * (1.0 + inf_norm(&x)) {
        return None;
    }
    Some(QpSolution {
        primal: x,
        dual_eq,
        dual_in,
        dual_lower,
        dual_upper,
        status: QpStatus::Optimal,
        kkt_residual: 0.0,
        iterations: sol.iterations,
    })
}

/// Minimum total constraint violation of `p`, by an elastic LP.
fn min_violation(p: &QpProblem, tol: f64, max_iter: usize) -> f64 {
    let n = p.n();
    let me = p.b_eq.len();
    let mi = p.b_in.len();
    if me + mi == 0 {
        return 0.0;
    }
    let nv = n + 2 * me + mi;
    let mut c = DVector::zeros(nv);
    c.rows_mut(n, 2 * me + mi).fill(1.0);
    let mut a_eq = DMatrix::zeros(me, nv);
    a_eq.view_mut((0, 0), (me, n)).copy_from(&p.a_eq);
    for k in 0..me {
        a_eq[(k, n + k)] = 1.0;
        a_eq[(k, n + me + k)] = -1.0;
    }
    let mut a_in = DMatrix::zeros(mi, nv);
    a_in.view_mut((0, 0), (mi, n)).copy_from(&p.a_in);
    for k in 0..mi {
        a_in[(k, n + 2 * me + k)] = -1.0;
    }
    let mut lower = DVector::zeros(nv);
    let mut upper = DVector::from_element(nv, f64::INFINITY);
    lower.rows_mut(0, n).copy_from(&p.lower);
    upper.rows_mut(0, n).copy_from(&p.upper);
    let elastic = QpProblem::new(DMatrix::zeros(nv, nv), c)
        .with_eq(a_eq, p.b_eq.clone())
        .with_ineq(a_in, p.b_in.clone())
        .with_bounds(lower, upper);
    let sol = solve_validated(&elastic, tol, max_iter.max(100), false);
    sol.primal.rows(n, 2 * me + mi).iter().sum::<f64>().max(0.0)
}

struct RunOutcome {
    iterations: usize,
    primal_diverged: bool,
}

/// Sparse row storage for the inequality matrix.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(a: &DMatrix<f64>) -> Self {
        let rows = (0..a.nrows())
            .map(|k| (0..a.ncols()).filter(|&j| a[(k, j)] != 0.0).map(|j| (j, a[(k, j)])).collect())
            .collect();
        SparseRows { rows }
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()))
    }

    fn tr_mul_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        for (k, r) in self.rows.iter().enumerate() {
            let zk = z[k];
            if zk != 0.0 {
                for &(j, v) in r {
                    out[j] += v * zk;
                }
            }
        }
    }
}

struct Ipm<'a> {
    p: &'a QpProblem,
    n: usize,
    // equality rows: original rows followed by fixed-variable rows
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    fixed: Vec<usize>,
    a_in: SparseRows,
    lo: Vec<usize>,
    up: Vec<usize>,
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
    zl: DVector<f64>,
    sl: DVector<f64>,
    zu: DVector<f64>,
    su: DVector<f64>,
}

struct Residuals {
    rd: DVector<f64>,
    rp: DVector<f64>,
    ri: DVector<f64>,
    rl: DVector<f64>,
    ru: DVector<f64>,
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
    dzl: DVector<f64>,
    dsl: DVector<f64>,
    dzu: DVector<f64>,
    dsu: DVector<f64>,
}

struct Factored {
    h: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    hinv_at: DMatrix<f64>,
    schur_chol: Option<Cholesky<f64, Dyn>>,
    schur_lu: Option<LU<f64, Dyn, Dyn>>,
    kkt_lu: Option<LU<f64, Dyn, Dyn>>,
}

impl<'a> Ipm<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let n = p.n();
        let fixed: Vec<usize> = (0..n).filter(|&i| p.lower[i] == p.upper[i]).collect();
        let me0 = p.b_eq.len();
        let me = me0 + fixed.len();
        let mut a_eq = DMatrix::zeros(me, n);
        let mut b_eq = DVector::zeros(me);
        a_eq.view_mut((0, 0), (me0, n)).copy_from(&p.a_eq);
        b_eq.rows_mut(0, me0).copy_from(&p.b_eq);
        for (k, &i) in fixed.iter().enumerate() {
            a_eq[(me0 + k, i)] = 1.0;
            b_eq[me0 + k] = p.lower[i];
        }
        let lo: Vec<usize> = (0..n).filter(|&i| p.lower[i].is_finite() && p.lower[i] != p.upper[i]).collect();
        let up: Vec<usize> = (0..n).filter(|&i| p.upper[i].is_finite() && p.lower[i] != p.upper[i]).collect();

        let mut x = DVector::zeros(n);
        for i in 0..n {
            let (l, u) = (p.lower[i], p.upper[i]);
            x[i] = match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => 0f64.max(l + 1.0),
                (false, true) => 0f64.min(u - 1.0),
                (false, false) => 0.0,
            };
        }
        let a_in = SparseRows::from_dense(&p.a_in);
        let s = (&p.b_in - a_in.mul(&x)).map(|v| v.max(1.0));
        let sl = DVector::from_iterator(lo.len(), lo.iter().map(|&i| (x[i] - p.lower[i]).max(1.0)));
        let su = DVector::from_iterator(up.len(), up.iter().map(|&i| (p.upper[i] - x[i]).max(1.0)));
        let mi = p.b_in.len();
        Ipm {
            p,
            n,
            a_eq,
            b_eq,
            fixed,
            a_in,
            x,
            y: DVector::zeros(me),
            z: DVector::from_element(mi, 1.0),
            s,
            zl: DVector::from_element(lo.len(), 1.0),
            sl,
            zu: DVector::from_element(up.len(), 1.0),
            su,
            lo,
            up,
        }
    }

    fn n_compl(&self) -> usize {
        self.z.len() + self.zl.len() + self.zu.len()
    }

    fn mu(&self) -> f64 {
        let m = self.n_compl();
        if m == 0 {
            return 0.0;
        }
        (self.s.dot(&self.z) + self.sl.dot(&self.zl) + self.su.dot(&self.zu)) / m as f64
    }

    fn residuals(&self) -> Residuals {
        let p = self.p;
        let mut rd = &p.hessian * &self.x + &p.linear + self.a_eq.tr_mul(&self.y);
        self.a_in.tr_mul_into(&self.z, &mut rd);
        for (k, &i) in self.lo.iter().enumerate() {
            rd[i] -= self.zl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            rd[i] += self.zu[k];
        }
        let rp = &self.a_eq * &self.x - &self.b_eq;
        let ri = self.a_in.mul(&self.x) + &self.s - &p.b_in;
        let rl = DVector::from_iterator(
            self.lo.len(),
            self.lo.iter().enumerate().map(|(k, &i)| self.x[i] - self.sl[k] - p.lower[i]),
        );
        let ru = DVector::from_iterator(
            self.up.len(),
            self.up.iter().enumerate().map(|(k, &i)| self.x[i] + self.su[k] - p.upper[i]),
        );
        Residuals { rd, rp, ri, rl, ru }
    }

    fn factor(&self) -> Factored {
        let n = self.n;
        let mut h = self.p.hessian.clone();
        for (k, &i) in self.lo.iter().enumerate() {
            h[(i, i)] += self.zl[k] / self.sl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            h[(i, i)] += self.zu[k] / self.su[k];
        }
        for (k, row) in self.a_in.rows.iter().enumerate() {
            let w = self.z[k] / self.s[k];
            for &(i, vi) in row {
                for &(j, vj) in row {
                    h[(i, j)] += w * vi * vj;
                }
            }
        }
        let max_diag = (0..n).fold(1.0f64, |m, i| m.max(h[(i, i)].abs()));
        let me = self.b_eq.len();
        let mut delta = 1e-13 * max_diag;
        let mut chol = None;
        for _ in 0..6 {
            let mut hr = h.clone();
            for i in 0..n {
                hr[(i, i)] += delta;
            }
            if let Some(c) = hr.cholesky() {
                chol = Some(c);
                break;
            }
            delta *= 100.0;
        }
        let mut f = Factored {
            h,
            chol: None,
            hinv_at: DMatrix::zeros(n, me),
            schur_chol: None,
            schur_lu: None,
            kkt_lu: None,
        };
        match chol {
            Some(c) => {
                if me > 0 {
                    let hinv_at = c.solve(&self.a_eq.transpose());
                    let mut schur = &self.a_eq * &hinv_at;
                    let sd = (0..me).fold(1.0f64, |m, i| m.max(schur[(i, i)].abs()));
                    for i in 0..me {
                        schur[(i, i)] += 1e-14 * sd;
                    }
                    match schur.clone().cholesky() {
                        Some(sc) => f.schur_chol = Some(sc),
                        None => f.schur_lu = Some(schur.lu()),
                    }
                    f.hinv_at = hinv_at;
                }
                f.chol = Some(c);
            }
            None => {
                let mut kkt = DMatrix::zeros(n + me, n + me);
                kkt.view_mut((0, 0), (n, n)).copy_from(&f.h);
                kkt.view_mut((n, 0), (me, n)).copy_from(&self.a_eq);
                kkt.view_mut((0, n), (n, me)).copy_from(&self.a_eq.transpose());
                for i in 0..n {
                    kkt[(i, i)] += 1e-10 * max_diag;
                }
                for i in 0..me {
                    kkt[(n + i, n + i)] -= 1e-12;
                }
                f.kkt_lu = Some(kkt.lu());
            }
        }
        f
    }

    fn solve_reduced_once(&self, f: &Factored, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n;
        let me = self.b_eq.len();
        if let Some(c) = &f.chol {
            let u = c.solve(r1);
            if me == 0 {
                return (u, DVector::zeros(0));
            }
            let rhs = &self.a_eq * &u - r2;
            let dy = if let Some(sc) = &f.schur_chol {
                sc.solve(&rhs)
            } else {
                f.schur_lu.as_ref().unwrap().solve(&rhs).unwrap_or_else(|| DVector::zeros(me))
            };
            let dx = u - &f.hinv_at * &dy;
            (dx, dy)
        } else {
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(r1);
            rhs.rows_mut(n, me).copy_from(r2);
            let sol = f.kkt_lu.as_ref().unwrap().solve(&rhs).unwrap_or_else(|| DVector::zeros(n + me));
            (sol.rows(0, n).into_owned(), sol.rows(n, me).into_owned())
        }
    }

    fn solve_reduced(&self, f: &Factored, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dx, mut dy) = self.solve_reduced_once(f, r1, r2);
        // one step of iterative refinement against the unregularized system
        let e1 = r1 - (&f.h * &dx + self.a_eq.tr_mul(&dy));
        let e2 = r2 - &self.a_eq * &dx;
        let (cx, cy) = self.solve_reduced_once(f, &e1, &e2);
        dx += cx;
        dy += cy;
        (dx, dy)
    }

    fn direction(&self, f: &Factored, r: &Residuals, rc_i: &DVector<f64>, rc_l: &DVector<f64>, rc_u: &DVector<f64>) -> Direction {
        // ti = S⁻¹(−rc_i + Z ri), tl = SL⁻¹(−rc_l − ZL rl), tu = SU⁻¹(−rc_u + ZU ru)
        let ti = DVector::from_iterator(
            self.s.len(),
            (0..self.s.len()).map(|k| (-rc_i[k] + self.z[k] * r.ri[k]) / self.s[k]),
        );
        let tl = DVector::from_iterator(
            self.sl.len(),
            (0..self.sl.len()).map(|k| (-rc_l[k] - self.zl[k] * r.rl[k]) / self.sl[k]),
        );
        let tu = DVector::from_iterator(
            self.su.len(),
            (0..self.su.len()).map(|k| (-rc_u[k] + self.zu[k] * r.ru[k]) / self.su[k]),
        );
        let mut r1 = -&r.rd;
        let mut tmp = DVector::zeros(self.n);
        self.a_in.tr_mul_into(&ti, &mut tmp);
        r1 -= tmp;
        for (k, &i) in self.lo.iter().enumerate() {
            r1[i] += tl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            r1[i] -= tu[k];
        }
        let r2 = -&r.rp;
        let (dx, dy) = self.solve_reduced(f, &r1, &r2);

        let adx = self.a_in.mul(&dx);
        let ds = -&r.ri - &adx;
        let dz = DVector::from_iterator(
            self.s.len(),
            (0..self.s.len()).map(|k| ti[k] + self.z[k] / self.s[k] * adx[k]),
        );
        let dsl = DVector::from_iterator(self.lo.len(), self.lo.iter().enumerate().map(|(k, &i)| dx[i] + r.rl[k]));
        let dzl = DVector::from_iterator(
            self.lo.len(),
            (0..self.lo.len()).map(|k| (-rc_l[k] - self.zl[k] * dsl[k]) / self.sl[k]),
        );
        let dsu = DVector::from_iterator(self.up.len(), self.up.iter().enumerate().map(|(k, &i)| -r.ru[k] - dx[i]));
        let dzu = DVector::from_iterator(
            self.up.len(),
            (0..self.up.len()).map(|k| (-rc_u[k] - self.zu[k] * dsu[k]) / self.su[k]),
        );
        Direction { dx, dy, dz, ds, dzl, dsl, dzu, dsu }
    }

    fn max_step(&self, d: &Direction) -> (f64, f64) {
        fn ratio(v: &DVector<f64>, dv: &DVector<f64>, a: f64) -> f64 {
            v.iter().zip(dv.iter()).fold(a, |a, (&x, &dx)| if dx < 0.0 { a.min(-x / dx) } else { a })
        }
        let mut ap = ratio(&self.s, &d.ds, 1.0);
        ap = ratio(&self.sl, &d.dsl, ap);
        ap = ratio(&self.su, &d.dsu, ap);
        let mut ad = ratio(&self.z, &d.dz, 1.0);
        ad = ratio(&self.zl, &d.dzl, ad);
        ad = ratio(&self.zu, &d.dzu, ad);
        (ap, ad)
    }

    fn step(&mut self, d: &Direction, alpha: f64) {
        self.x.axpy(alpha, &d.dx, 1.0);
        self.y.axpy(alpha, &d.dy, 1.0);
        self.z.axpy(alpha, &d.dz, 1.0);
        self.s.axpy(alpha, &d.ds, 1.0);
        self.zl.axpy(alpha, &d.dzl, 1.0);
        self.sl.axpy(alpha, &d.dsl, 1.0);
        self.zu.axpy(alpha, &d.dzu, 1.0);
        self.su.axpy(alpha, &d.dsu, 1.0);
    }

    fn kkt_now(&self) -> KktParts {
        let (y, zl, zu) = self.original_duals();
        self.p.kkt_parts(&self.x, &y, &self.z, &zl, &zu)
    }

    fn original_duals(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.n;
        let me0 = self.p.b_eq.len();
        let y = self.y.rows(0, me0).into_owned();
        let mut zl = DVector::zeros(n);
        let mut zu = DVector::zeros(n);
        for (k, &i) in self.lo.iter().enumerate() {
            zl[i] = self.zl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            zu[i] = self.zu[k];
        }
        for (k, &i) in self.fixed.iter().enumerate() {
            let m = self.y[me0 + k];
            if m >= 0.0 {
                zu[i] = m;
            } else {
                zl[i] = -m;
            }
        }
        (y, zl, zu)
    }

    fn run(&mut self, tol: f64, max_iter: usize) -> RunOutcome {
        let mut best: Option<(f64, Snapshot)> = None;
        let mut stalled = 0;
        let mut primal_diverged = false;
        let mut iterations = 0;
        for it in 0..=max_iter {
            iterations = it;
            let parts = self.kkt_now();
            let score = (parts.stationarity / parts.stationarity_scale)
                .max(parts.complementarity / parts.stationarity_scale)
                .max(parts.feasibility / parts.feasibility_scale);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, self.snapshot()));
            }
            if parts.within(tol) || it == max_iter {
                break;
            }
            if self.x.iter().any(|v| v.is_nan()) {
                break;
            }
            if inf_norm(&self.x) > DIVERGENCE {
                primal_diverged = true;
                break;
            }
            let dual_mag = inf_norm(&self.y).max(inf_norm(&self.z)).max(inf_norm(&self.zl)).max(inf_norm(&self.zu));
            if dual_mag > DIVERGENCE {
                break;
            }
            let r = self.residuals();
            let f = self.factor();
            let mu = self.mu();
            let m = self.n_compl();

            let rc_i = self.s.component_mul(&self.z);
            let rc_l = self.sl.component_mul(&self.zl);
            let rc_u = self.su.component_mul(&self.zu);
            let aff = self.direction(&f, &r, &rc_i, &rc_l, &rc_u);
            let d = if m > 0 {
                let (ap, ad) = self.max_step(&aff);
                let a = ap.min(ad);
                let mu_aff = ((&self.s + a * &aff.ds).dot(&(&self.z + a * &aff.dz))
                    + (&self.sl + a * &aff.dsl).dot(&(&self.zl + a * &aff.dzl))
                    + (&self.su + a * &aff.dsu).dot(&(&self.zu + a * &aff.dzu)))
                    / m as f64;
                let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
                let target = sigma * mu;
                let rc_i = DVector::from_iterator(
                    rc_i.len(),
                    (0..rc_i.len()).map(|k| rc_i[k] + aff.ds[k] * aff.dz[k] - target),
                );
                let rc_l = DVector::from_iterator(
                    rc_l.len(),
                    (0..rc_l.len()).map(|k| rc_l[k] + aff.dsl[k] * aff.dzl[k] - target),
                );
                let rc_u = DVector::from_iterator(
                    rc_u.len(),
                    (0..rc_u.len()).map(|k| rc_u[k] + aff.dsu[k] * aff.dzu[k] - target),
                );
                self.direction(&f, &r, &rc_i, &rc_l, &rc_u)
            } else {
                aff
            };
            let (ap, ad) = self.max_step(&d);
            let alpha = (STEP_FRACTION * ap.min(ad)).min(1.0);
            if alpha < 1e-12 {
                stalled += 1;
                if stalled >= 3 {
                    break;
                }
            } else {
                stalled = 0;
            }
            self.step(&d, alpha);
        }
        if let Some((_, snap)) = best {
            self.restore(snap);
        }
        RunOutcome { iterations, primal_diverged }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            x: self.x.clone(),
            y: self.y.clone(),
            z: self.z.clone(),
            zl: self.zl.clone(),
            zu: self.zu.clone(),
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.x = s.x;
        self.y = s.y;
        self.z = s.z;
        self.zl = s.zl;
        self.zu = s.zu;
    }

    fn extract(&self, iterations: usize) -> QpSolution {
        let (dual_eq, dual_lower, dual_upper) = self.original_duals();
        QpSolution {
            primal: self.x.clone(),
            dual_eq,
            dual_in: self.z.clone(),
            dual_lower,
            dual_upper,
            status: QpStatus::MaxIter,
            kkt_residual: f64::INFINITY,
            iterations,
        }
    }
}

struct Snapshot {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    zl: DVector<f64>,
    zu: DVector<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn active_lower_bound() {
        let p = QpProblem::new(DMatrix::from_element(1, 1, 1.0), dv(&[0.0])).with_bounds(dv(&[1.0]), dv(&[2.0]));
        let sol = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.primal[0] - 1.0).abs() < 1e-9);
        assert!((sol.dual_lower[0] - 1.0).abs() < 1e-8);
        assert!(sol.kkt_residual <= DEFAULT_TOL);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let p = QpProblem::new(DMatrix::zeros(1, 1), dv(&[0.0]))
            .with_eq(DMatrix::from_element(1, 1, 1.0), dv(&[3.0]))
            .with_bounds(dv(&[0.0]), dv(&[1.0]));
        let sol = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn fixed_variable_becomes_equality() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dv(&[-1.0, -1.0]))
            .with_bounds(dv(&[0.5, 0.0]), dv(&[0.5, 3.0]));
        let sol = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.primal[0] - 0.5).abs() < 1e-12);
        assert!((sol.primal[1] - 1.0).abs() < 1e-8);
        // multiplier of the fixed coordinate: 0.5 - 1 + (zu - zl) = 0
        assert!((sol.dual_upper[0] - sol.dual_lower[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn rejects_indefinite_and_mismatched() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = QpProblem::new(q, dv(&[0.0, 0.0]));
        assert!(matches!(solve_qp(&p, 1e-9, 10), Err(QpError::NotPsd { .. })));

        let p = QpProblem::new(DMatrix::identity(2, 2), dv(&[0.0, 0.0])).with_eq(DMatrix::zeros(1, 3), dv(&[0.0]));
        assert!(matches!(solve_qp(&p, 1e-9, 10), Err(QpError::Dimension(_))));

        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(solve_qp(&QpProblem::new(q, dv(&[0.0, 0.0])), 1e-9, 10), Err(QpError::NotSymmetric { .. })));
    }

    #[test]
    fn psd_check_accepts_singular_psd() {
        let v = dv(&[1.0, -2.0, 0.5]);
        let q = &v * v.transpose();
        assert!(check_psd(&q).is_ok());
        assert!(check_psd(&DMatrix::zeros(3, 3)).is_ok());
        let mut bad = q.clone();
        bad[(2, 2)] -= 1e-3;
        assert!(check_psd(&bad).is_err());
    }

    #[test]
    fn small_lp_with_inequalities() {
        // min -x - y  s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0  -> (1.6, 1.2)
        let p = QpProblem::new(DMatrix::zeros(2, 2), dv(&[-1.0, -1.0]))
            .with_ineq(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]), dv(&[4.0, 6.0]))
            .with_bounds(dv(&[0.0, 0.0]), dv(&[f64::INFINITY, f64::INFINITY]));
        let sol = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.primal[0] - 1.6).abs() < 1e-8);
        assert!((sol.primal[1] - 1.2).abs() < 1e-8);
        assert!((sol.dual_in[0] - 0.4).abs() < 1e-8);
        assert!((sol.dual_in[1] - 0.2).abs() < 1e-8);
    }
}
