//! Verification side of the solver: deterministic-equivalent KKT residuals
//! with multiplier estimation, a multistart alternating-minimization oracle,
//! grid brute force for tiny instances, recourse slices and empirical
//! Lipschitz probes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    accept, evaluate_lifted, evaluate_recourse, normalized_weights, FirstStage, ModelError, Recourse, Result,
    Scenario, SecondStage,
};
use crate::parallel::Workers;
use crate::qp::{self, QpProblem};

/// Constraint violation of a deterministic-equivalent point.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub abs: f64,
    pub worst_row: Option<String>,
}

/// Maximum violation over every row of the deterministic equivalent at
/// (x, y₁, …, y_S).
pub fn feasibility(fs: &FirstStage, scenarios: &[Scenario], x: &DVector<f64>, ys: &[&DVector<f64>]) -> Feasibility {
    let mut worst = Feasibility { abs: 0.0, worst_row: None };
    let mut note = |v: f64, name: &dyn Fn() -> String| {
        if v > worst.abs {
            worst.abs = v;
            worst.worst_row = Some(name());
        }
    };
    for i in 0..fs.n() {
        note(fs.lower[i] - x[i], &|| format!("x.lower[{i}]"));
        note(x[i] - fs.upper[i], &|| format!("x.upper[{i}]"));
    }
    let r = &fs.a_ineq * x - &fs.b_ineq;
    for (k, &v) in r.iter().enumerate() {
        note(v, &|| format!("first_stage.ineq[{k}]"));
    }
    let r = &fs.a_eq * x - &fs.b_eq;
    for (k, &v) in r.iter().enumerate() {
        note(v.abs(), &|| format!("first_stage.eq[{k}]"));
    }
    for (s, y) in scenarios.iter().zip(ys) {
        let id = s.id;
        let r = &s.joint_x * x + &s.joint_y * *y - &s.joint_rhs;
        for (k, &v) in r.iter().enumerate() {
            note(v, &|| format!("scenario[{id}].joint[{k}]"));
        }
        let r = &s.eq_y * *y - &s.eq_rhs;
        for (k, &v) in r.iter().enumerate() {
            note(v.abs(), &|| format!("scenario[{id}].eq[{k}]"));
        }
        for j in 0..s.n2() {
            note(s.y_lower[j] - y[j], &|| format!("scenario[{id}].y_lower[{j}]"));
            note(y[j] - s.y_upper[j], &|| format!("scenario[{id}].y_upper[{j}]"));
        }
    }
    worst
}

/// Violation at the reference point with every y at its lower bound; the
/// denominator of the relative feasibility error.
pub fn reference_feasibility(fs: &FirstStage, scenarios: &[Scenario]) -> Result<f64> {
    let x0 = fs.reference_point()?;
    let ys: Vec<&DVector<f64>> = scenarios.iter().map(|s| &s.y_lower).collect();
    Ok(feasibility(fs, scenarios, &x0, &ys).abs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub feas_abs: f64,
    pub feas_rel: f64,
    pub opt_abs: f64,
    pub opt_rel: f64,
    pub kkt_abs: f64,
    pub kkt_rel: f64,
    /// Row with the largest violation, when any row is violated.
    pub worst_row: Option<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Sign {
    Nonneg,
    Free,
}

struct Generator {
    dir: DVector<f64>,
    sign: Sign,
    slack: f64,
}

/// Minimizes ½‖g + Σ θₖ dₖ‖² + ½ Σ (θₖ slackₖ)² over sign-constrained θ and
/// returns (θ, g + Σ θₖ dₖ).
fn fit_multipliers(g: &DVector<f64>, gens: &[Generator]) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = gens.len();
    if m == 0 {
        return Ok((DVector::zeros(0), g.clone()));
    }
    let n = g.len();
    // free multipliers enter as a difference of two nonnegative columns
    let mut cols: Vec<(usize, f64)> = Vec::with_capacity(2 * m);
    for (k, gen) in gens.iter().enumerate() {
        cols.push((k, 1.0));
        if gen.sign == Sign::Free {
            cols.push((k, -1.0));
        }
    }
    let mut e = DMatrix::zeros(n + m, cols.len());
    for (c, &(k, sign)) in cols.iter().enumerate() {
        e.view_mut((0, c), (n, 1)).copy_from(&(&gens[k].dir * sign));
        e[(n + k, c)] = sign * gens[k].slack;
    }
    let mut f = DVector::zeros(n + m);
    f.rows_mut(0, n).copy_from(&(-g));
    let t = nnls(&e, &f).ok_or(ModelError::SolverFailure {
        context: "multiplier estimation",
        status: qp::QpStatus::MaxIter,
        residual: f64::NAN,
    })?;
    let mut theta = DVector::zeros(m);
    for (c, &(k, sign)) in cols.iter().enumerate() {
        theta[k] += sign * t[c];
    }
    let residual = g + DMatrix::from_fn(m, n, |k, i| gens[k].dir[i]).tr_mul(&theta);
    Ok((theta, residual))
}

/// Lawson–Hanson active-set solution of min ‖E t − f‖ subject to t >= 0.
fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
    let cols = e.ncols();
    let scale = e.amax().max(1.0) * f.amax().max(1.0);
    let tol = 1e-13 * scale;
    let mut t = DVector::zeros(cols);
    let mut passive = vec![false; cols];
    let restricted = |passive: &[bool]| -> Option<DVector<f64>> {
        let idx: Vec<usize> = (0..cols).filter(|&c| passive[c]).collect();
        let sub = DMatrix::from_fn(e.nrows(), idx.len(), |r, j| e[(r, idx[j])]);
        let z = sub.svd(true, true).solve(f, 1e-14 * scale).ok()?;
        let mut out = DVector::zeros(cols);
        for (j, &c) in idx.iter().enumerate() {
            out[c] = z[j];
        }
        Some(out)
    };
    for _ in 0..3 * cols + 10 {
        let w = e.tr_mul(&(f - e * &t));
        let Some(enter) = (0..cols).filter(|&c| !passive[c] && w[c] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b])) else {
            return Some(t);
        };
        passive[enter] = true;
        loop {
            let z = restricted(&passive)?;
            if (0..cols).all(|c| !passive[c] || z[c] > 0.0) {
                t = z;
                break;
            }
            let alpha = (0..cols)
                .filter(|&c| passive[c] && z[c] <= 0.0)
                .map(|c| t[c] / (t[c] - z[c]))
                .fold(1.0f64, f64::min);
            t += (&z - &t) * alpha;
            for c in 0..cols {
                if passive[c] && t[c] <= 1e-15 * scale {
                    passive[c] = false;
                    t[c] = 0.0;
                }
            }
            if !passive[enter] && z[enter] <= 0.0 {
                break;
            }
        }
    }
    None
}

fn first_stage_generators(fs: &FirstStage, x: &DVector<f64>) -> Vec<Generator> {
    let n = fs.n();
    let mut gens = Vec::new();
    let r = &fs.b_ineq - &fs.a_ineq * x;
    for k in 0..fs.b_ineq.len() {
        gens.push(Generator {
            dir: fs.a_ineq.row(k).transpose(),
            sign: Sign::Nonneg,
            slack: r[k].abs(),
        });
    }
    for k in 0..fs.b_eq.len() {
        gens.push(Generator {
            dir: fs.a_eq.row(k).transpose(),
            sign: Sign::Free,
            slack: 0.0,
        });
    }
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = -1.0;
        gens.push(Generator {
            dir: e.clone(),
            sign: Sign::Nonneg,
            slack: (x[i] - fs.lower[i]).abs(),
        });
        e[i] = 1.0;
        gens.push(Generator {
            dir: e,
            sign: Sign::Nonneg,
            slack: (fs.upper[i] - x[i]).abs(),
        });
    }
    gens
}

/// KKT residuals of the deterministic equivalent
///
/// ```text
///     min φ(x) + Σ_s w_s f(x, y_s; ξ_s)  s.t.  x ∈ X,  C_s x + D_s y_s <= h_s,  F_s y_s = d_s,  y_s box
/// ```
///
/// at (x, {y_s}). Second-stage multipliers are the second-stage duals scaled
/// by w_s; first-stage multipliers are fitted by a sign-constrained least
/// squares on the x-gradient of the Lagrangian, with a complementarity
/// penalty so inactive rows do not absorb the gradient.
///
/// Where a second-stage LP is dual degenerate its duals are not unique, and
/// the ones handed in may leave an x-residual that other optimal duals of
/// the same LP remove. Such scenarios get their duals re-chosen on the
/// optimal dual face jointly with the first-stage fit, and the smaller of
/// the two residuals is reported. Both are evaluated on genuine duals.
pub fn kkt_residuals(fs: &FirstStage, scenarios: &[Scenario], x: &DVector<f64>, seconds: &[SecondStage]) -> Result<KktReport> {
    if seconds.len() != scenarios.len() {
        return Err(ModelError::Dimension(format!(
            "{} second-stage solutions for {} scenarios",
            seconds.len(),
            scenarios.len()
        )));
    }
    let (mut report, g, rx) = residuals_with(fs, scenarios, x, seconds)?;
    for near in FACE_ACTIVE_TOLS {
        if report.opt_rel <= 1e-9 {
            break;
        }
        let Some(refined) = refine_degenerate_duals(fs, scenarios, x, seconds, &g, &rx, near)? else { continue };
        let (other, _, _) = residuals_with(fs, scenarios, x, &refined)?;
        if other.opt_abs < report.opt_abs {
            report = other;
        }
    }
    Ok(report)
}

/// Relative slack below which a second-stage row may carry a multiplier
/// when duals are re-chosen. Near a kink of ψ the rows that become active
/// at the kink are still slightly slack; their complementarity products
/// enter the residual.
const FACE_ACTIVE_TOLS: [f64; 3] = [1e-9, 1e-6, 1e-4];

/// The residual report at fixed duals, plus the x-gradient of the
/// Lagrangian before and after the first-stage multiplier fit.
fn residuals_with(
    fs: &FirstStage,
    scenarios: &[Scenario],
    x: &DVector<f64>,
    seconds: &[SecondStage],
) -> Result<(KktReport, DVector<f64>, DVector<f64>)> {
    let w = normalized_weights(scenarios);
    let ys: Vec<&DVector<f64>> = seconds.iter().map(|s| &s.y).collect();
    let feas = feasibility(fs, scenarios, x, &ys);
    let reference = reference_feasibility(fs, scenarios)?;

    // x-gradient of the objective and of the second-stage part of the Lagrangian
    let mut obj_grad_x = fs.grad_phi(x);
    let mut obj_grad_inf: f64 = 0.0;
    let mut opt_abs: f64 = 0.0;
    let mut g = DVector::zeros(fs.n());
    for ((s, sec), &ws) in scenarios.iter().zip(seconds).zip(&w) {
        let gx = (&s.x_cost + &s.coupling * &sec.y) * ws;
        obj_grad_x += &gx;
        g += s.joint_x.tr_mul(&sec.duals.joint) * ws;

        let gy = (&s.y_cost + s.coupling.tr_mul(x)) * ws;
        obj_grad_inf = obj_grad_inf.max(qp::inf_norm(&gy));
        let ry = &gy
            + (s.joint_y.tr_mul(&sec.duals.joint) + s.eq_y.tr_mul(&sec.duals.eq) - &sec.duals.y_lower
                + &sec.duals.y_upper)
                * ws;
        opt_abs = opt_abs.max(qp::inf_norm(&ry));

        let slack = &s.joint_rhs - &s.joint_x * x - &s.joint_y * &sec.y;
        for k in 0..slack.len() {
            opt_abs = opt_abs.max((ws * sec.duals.joint[k] * slack[k]).abs());
        }
        for j in 0..s.n2() {
            opt_abs = opt_abs.max((ws * sec.duals.y_lower[j] * (sec.y[j] - s.y_lower[j])).abs());
            opt_abs = opt_abs.max((ws * sec.duals.y_upper[j] * (s.y_upper[j] - sec.y[j])).abs());
        }
    }
    g += &obj_grad_x;
    obj_grad_inf = obj_grad_inf.max(qp::inf_norm(&obj_grad_x));

    let gens = first_stage_generators(fs, x);
    let (theta, rx) = fit_multipliers(&g, &gens)?;
    opt_abs = opt_abs.max(qp::inf_norm(&rx));
    for (k, gen) in gens.iter().enumerate() {
        opt_abs = opt_abs.max((theta[k] * gen.slack).abs());
    }

    let feas_rel = feas.abs / reference.max(1.0);
    let opt_rel = opt_abs / obj_grad_inf.max(1.0);
    let report = KktReport {
        feas_abs: feas.abs,
        feas_rel,
        opt_abs,
        opt_rel,
        kkt_abs: feas.abs.max(opt_abs),
        kkt_rel: feas_rel.max(opt_rel),
        worst_row: feas.worst_row,
    };
    Ok((report, g, rx))
}

/// Optimal dual face of one second-stage LP at fixed (x, y), with rows
/// counted as active up to a relative slack. Variables are the multipliers
/// of the active joint rows, all equality rows and the active lower and
/// upper bounds, in that order.
struct DualFace {
    joint_rows: Vec<usize>,
    lower: Vec<usize>,
    upper: Vec<usize>,
    stationarity: DMatrix<f64>,
    rhs: DVector<f64>,
    var_lower: DVector<f64>,
    /// Image C_activeᵀ λ of the variables in x-space.
    image: DMatrix<f64>,
    current: DVector<f64>,
}

impl DualFace {
    /// `None` when no joint row is active, so that the duals cannot move
    /// the x-gradient.
    fn build(s: &Scenario, x: &DVector<f64>, sec: &SecondStage, near_rel: f64) -> Option<Self> {
        let n2 = s.n2();
        let scale = 1.0 + qp::inf_norm(&sec.y).max(qp::inf_norm(&s.joint_rhs)).max(qp::inf_norm(x));
        let near = near_rel * scale;
        let slack = &s.joint_rhs - &s.joint_x * x - &s.joint_y * &sec.y;
        let joint_rows: Vec<usize> = (0..slack.len()).filter(|&k| slack[k] <= near).collect();
        let lower: Vec<usize> = (0..n2).filter(|&j| sec.y[j] - s.y_lower[j] <= near).collect();
        let upper: Vec<usize> = (0..n2).filter(|&j| s.y_upper[j] - sec.y[j] <= near).collect();
        let me = s.eq_rhs.len();
        let nv = joint_rows.len() + me + lower.len() + upper.len();
        if joint_rows.is_empty() {
            return None;
        }
        let mut stationarity = DMatrix::zeros(n2, nv);
        let mut image = DMatrix::zeros(x.len(), nv);
        let mut var_lower = DVector::zeros(nv);
        let mut current = DVector::zeros(nv);
        let mut c = 0;
        for &k in &joint_rows {
            stationarity.set_column(c, &s.joint_y.row(k).transpose());
            image.set_column(c, &s.joint_x.row(k).transpose());
            current[c] = sec.duals.joint[k];
            c += 1;
        }
        for k in 0..me {
            stationarity.set_column(c, &s.eq_y.row(k).transpose());
            var_lower[c] = f64::NEG_INFINITY;
            current[c] = sec.duals.eq[k];
            c += 1;
        }
        for &j in &lower {
            stationarity[(j, c)] = -1.0;
            current[c] = sec.duals.y_lower[j];
            c += 1;
        }
        for &j in &upper {
            stationarity[(j, c)] = 1.0;
            current[c] = sec.duals.y_upper[j];
            c += 1;
        }
        let rhs = -(&s.y_cost + s.coupling.tr_mul(x));
        Some(DualFace { joint_rows, lower, upper, stationarity, rhs, var_lower, image, current })
    }

    fn problem(&self, hessian: DMatrix<f64>, linear: DVector<f64>) -> QpProblem {
        let nv = self.current.len();
        QpProblem::new(hessian, linear)
            .with_eq(self.stationarity.clone(), self.rhs.clone())
            .with_bounds(self.var_lower.clone(), DVector::from_element(nv, f64::INFINITY))
    }

    /// Smallest and largest value of image row `k` over the face.
    fn range(&self, k: usize) -> (f64, f64) {
        let nv = self.current.len();
        let row = self.image.row(k).transpose();
        let at = row.dot(&self.current);
        let extreme = |sign: f64| match qp::solve_qp(&self.problem(DMatrix::zeros(nv, nv), &row * sign), 1e-10, qp::DEFAULT_MAX_ITER) {
            Ok(sol) if sol.status == qp::QpStatus::Optimal => row.dot(&sol.primal),
            Ok(sol) if sol.status == qp::QpStatus::Unbounded => -sign * f64::INFINITY,
            _ => at,
        };
        (extreme(1.0).min(at), extreme(-1.0).max(at))
    }

    /// Face point whose image on `coords` is closest to `target`.
    fn closest(&self, coords: &[usize], target: &[f64]) -> Option<DVector<f64>> {
        let nv = self.current.len();
        let m = DMatrix::from_fn(coords.len(), nv, |r, c| self.image[(coords[r], c)]);
        let t = DVector::from_column_slice(target);
        let mut hessian = m.tr_mul(&m);
        let scale = hessian.amax().max(1.0);
        for i in 0..nv {
            hessian[(i, i)] += 1e-10 * scale;
        }
        let linear = -m.tr_mul(&t) - &self.current * (1e-10 * scale);
        let sol = qp::solve_qp(&self.problem(hessian, linear), 1e-10, qp::DEFAULT_MAX_ITER).ok()?;
        (sol.status == qp::QpStatus::Optimal).then_some(sol.primal)
    }

    fn into_second(&self, s: &Scenario, y: &DVector<f64>, v: &DVector<f64>) -> SecondStage {
        let mut duals = crate::model::RecourseDuals::zeros(s);
        let mut c = 0;
        for &k in &self.joint_rows {
            duals.joint[k] = v[c].max(0.0);
            c += 1;
        }
        for k in 0..s.eq_rhs.len() {
            duals.eq[k] = v[c];
            c += 1;
        }
        for &j in &self.lower {
            duals.y_lower[j] = v[c].max(0.0);
            c += 1;
        }
        for &j in &self.upper {
            duals.y_upper[j] = v[c].max(0.0);
            c += 1;
        }
        SecondStage { y: y.clone(), duals }
    }
}

/// Re-chooses the duals of dual-degenerate scenarios on their optimal face
/// so that, together with fitted first-stage multipliers, the x-residual is
/// as small as the face ranges allow. `g` and `rx` are the x-gradient of
/// the Lagrangian at the given duals before and after the first-stage fit;
/// only coordinates left with a residual are moved.
fn refine_degenerate_duals(
    fs: &FirstStage,
    scenarios: &[Scenario],
    x: &DVector<f64>,
    seconds: &[SecondStage],
    g: &DVector<f64>,
    rx: &DVector<f64>,
    near_rel: f64,
) -> Result<Option<Vec<SecondStage>>> {
    let w = normalized_weights(scenarios);
    let n = fs.n();
    // (scenario, face, coordinates with a nontrivial range, their ranges)
    let mut movable = Vec::new();
    let mut g0 = g.clone();
    let floor = 1e-12 * (1.0 + qp::inf_norm(g));
    let wanted: Vec<usize> = (0..n).filter(|&k| rx[k].abs() > floor).collect();
    if wanted.is_empty() {
        return Ok(None);
    }
    for (idx, (s, sec)) in scenarios.iter().zip(seconds).enumerate() {
        let Some(face) = DualFace::build(s, x, sec, near_rel) else { continue };
        let mut coords = Vec::new();
        for &k in &wanted {
            if face.image.row(k).iter().all(|v| *v == 0.0) {
                continue;
            }
            let (lo, hi) = face.range(k);
            if hi - lo > 1e-12 * (1.0 + lo.abs().min(hi.abs())) {
                let at = face.image.row(k).transpose().dot(&face.current);
                g0[k] -= w[idx] * at;
                coords.push((k, lo, hi));
            }
        }
        if !coords.is_empty() {
            movable.push((idx, face, coords));
        }
    }
    if movable.is_empty() {
        return Ok(None);
    }

    let gens = first_stage_generators(fs, x);
    let m = gens.len();
    let nt: usize = movable.iter().map(|(_, _, c)| c.len()).sum();
    let mut a = DMatrix::zeros(n, m + nt);
    let mut lower = DVector::zeros(m + nt);
    let mut upper = DVector::from_element(m + nt, f64::INFINITY);
    let mut penalty = DVector::zeros(m + nt);
    for (k, gen) in gens.iter().enumerate() {
        a.set_column(k, &gen.dir);
        if gen.sign == Sign::Free {
            lower[k] = f64::NEG_INFINITY;
        }
        penalty[k] = gen.slack * gen.slack;
    }
    let mut col = m;
    for (idx, _, coords) in &movable {
        for &(k, lo, hi) in coords {
            a[(k, col)] = w[*idx];
            lower[col] = lo;
            upper[col] = hi;
            col += 1;
        }
    }
    let mut hessian = a.tr_mul(&a) + DMatrix::from_diagonal(&penalty);
    let scale = hessian.amax().max(1.0);
    for i in 0..m + nt {
        hessian[(i, i)] += 1e-12 * scale;
    }
    let p = QpProblem::new(hessian, a.tr_mul(&g0)).with_bounds(lower, upper);
    let Ok(sol) = qp::solve_qp(&p, 1e-10, qp::DEFAULT_MAX_ITER) else { return Ok(None) };
    if !matches!(sol.status, qp::QpStatus::Optimal | qp::QpStatus::MaxIter) {
        return Ok(None);
    }

    let mut refined = seconds.to_vec();
    let mut col = m;
    for (idx, face, coords) in &movable {
        let ks: Vec<usize> = coords.iter().map(|c| c.0).collect();
        let target: Vec<f64> = (0..coords.len()).map(|i| sol.primal[col + i]).collect();
        col += coords.len();
        if let Some(v) = face.closest(&ks, &target) {
            refined[*idx] = face.into_second(&scenarios[*idx], &seconds[*idx].y, &v);
        }
    }
    Ok(Some(refined))
}

/// Euclidean distance from the origin to `v + Σ cone(generators)`, where the
/// generators are the outward normals of the active rows of X at `x` plus
/// the extra nonnegative directions given.
pub(crate) fn normal_cone_distance(
    fs: &FirstStage,
    x: &DVector<f64>,
    v: &DVector<f64>,
    extra: &[DVector<f64>],
    active_tol: f64,
) -> Result<f64> {
    let mut gens: Vec<Generator> = first_stage_generators(fs, x)
        .into_iter()
        .filter(|g| g.sign == Sign::Free || g.slack <= active_tol)
        .map(|g| Generator { slack: 0.0, ..g })
        .collect();
    gens.extend(extra.iter().map(|d| Generator {
        dir: d.clone(),
        sign: Sign::Nonneg,
        slack: 0.0,
    }));
    let (_, r) = fit_multipliers(v, &gens)?;
    Ok(r.norm())
}

/// ζ̄(x) = φ(x) + Σ w_s ψ(x; ξ_s) together with the second-stage solutions.
pub fn sample_average(
    fs: &FirstStage,
    scenarios: &[Scenario],
    x: &DVector<f64>,
    tol: f64,
    workers: &Workers,
) -> Result<(f64, Vec<SecondStage>)> {
    let w = normalized_weights(scenarios);
    let evals = workers.try_map(scenarios.len(), |k| evaluate_recourse(fs, &scenarios[k], x, tol))?;
    let mut total = fs.phi(x);
    let mut seconds = Vec::with_capacity(evals.len());
    for (e, ws) in evals.into_iter().zip(w) {
        match e {
            Recourse::Finite { value, second } => {
                total += ws * value;
                seconds.push(second);
            }
            Recourse::OutsideDomain => return Ok((f64::INFINITY, Vec::new())),
        }
    }
    Ok((total, seconds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_objective: f64,
    pub best_x: Vec<f64>,
    pub starts: usize,
    pub objectives: Vec<f64>,
    /// Whether the best start ended with a sweep in which x did not move.
    pub best_stationary: bool,
}

/// Oracle configuration; the defaults are the sweep cap and decrease
/// tolerance of the alternating scheme.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub max_sweeps: usize,
    pub decrease_tol: f64,
    pub qp_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_sweeps: 500,
            decrease_tol: 1e-9,
            qp_tol: qp::DEFAULT_TOL,
        }
    }
}

fn random_point_in_x(fs: &FirstStage, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let u = DVector::from_iterator(fs.n(), (0..fs.n()).map(|i| rng.random_range(fs.lower[i]..=fs.upper[i])));
    fs.project(&u, qp::DEFAULT_TOL)
}

/// The x-block of the alternating scheme: with all y_s fixed the problem is
/// a convex QP in x.
fn x_block(fs: &FirstStage, scenarios: &[Scenario], w: &[f64], seconds: &[SecondStage], tol: f64) -> Result<DVector<f64>> {
    let n = fs.n();
    let mut linear = fs.cost.clone();
    let rows = fs.b_ineq.len() + scenarios.iter().map(|s| s.joint_rhs.len()).sum::<usize>();
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    a.view_mut((0, 0), (fs.b_ineq.len(), n)).copy_from(&fs.a_ineq);
    b.rows_mut(0, fs.b_ineq.len()).copy_from(&fs.b_ineq);
    let mut r = fs.b_ineq.len();
    for ((s, sec), &ws) in scenarios.iter().zip(seconds).zip(w) {
        linear += (&s.x_cost + &s.coupling * &sec.y) * ws;
        let mj = s.joint_rhs.len();
        a.view_mut((r, 0), (mj, n)).copy_from(&s.joint_x);
        b.rows_mut(r, mj).copy_from(&(&s.joint_rhs - &s.joint_y * &sec.y));
        r += mj;
    }
    let p = QpProblem::new(fs.hessian.clone(), linear)
        .with_eq(fs.a_eq.clone(), fs.b_eq.clone())
        .with_ineq(a, b)
        .with_bounds(fs.lower.clone(), fs.upper.clone());
    Ok(accept(qp::solve_qp(&p, tol, qp::DEFAULT_MAX_ITER)?, "oracle x-block")?.primal)
}

/// Result of one alternating run from a given start.
#[derive(Debug, Clone)]
pub struct AlternatingRun {
    pub x: DVector<f64>,
    pub objective: f64,
    pub sweeps: usize,
    pub stationary: bool,
}

pub fn alternate_from(
    fs: &FirstStage,
    scenarios: &[Scenario],
    start: &DVector<f64>,
    opts: &OracleOptions,
    workers: &Workers,
) -> Result<AlternatingRun> {
    let w = normalized_weights(scenarios);
    let mut x = start.clone();
    let (mut obj, mut seconds) = sample_average(fs, scenarios, &x, opts.qp_tol, workers)?;
    let mut stationary = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let x_new = x_block(fs, scenarios, &w, &seconds, opts.qp_tol)?;
        let moved = (&x_new - &x).amax() > 1e-9 * (1.0 + x.amax());
        let (obj_new, seconds_new) = sample_average(fs, scenarios, &x_new, opts.qp_tol, workers)?;
        if obj_new > obj - opts.decrease_tol {
            // no sufficient decrease: keep the better of the two points
            if obj_new < obj {
                x = x_new;
                obj = obj_new;
            }
            stationary = !moved;
            break;
        }
        x = x_new;
        obj = obj_new;
        seconds = seconds_new;
    }
    Ok(AlternatingRun {
        x,
        objective: obj,
        sweeps,
        stationary,
    })
}

/// Multistart alternating convex minimization over the y-blocks and the
/// x-block; an independent reference for the decomposition solver.
pub fn oracle_solve(
    fs: &FirstStage,
    scenarios: &[Scenario],
    n_starts: usize,
    seed: u64,
    opts: &OracleOptions,
    workers: &Workers,
) -> Result<OracleResult> {
    if n_starts == 0 {
        return Err(ModelError::Invalid("oracle needs at least one start".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<AlternatingRun> = None;
    let mut objectives = Vec::with_capacity(n_starts);
    for _ in 0..n_starts {
        let start = random_point_in_x(fs, &mut rng)?;
        let run = alternate_from(fs, scenarios, &start, opts, workers)?;
        objectives.push(run.objective);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    Ok(OracleResult {
        best_objective: best.objective,
        best_x: best.x.iter().copied().collect(),
        starts: n_starts,
        objectives,
        best_stationary: best.stationary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub minimum: f64,
    pub argmin: DVector<f64>,
    pub points: usize,
}

fn axis_points(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    let k = ((hi - lo) / resolution).round().max(1.0) as usize;
    (0..=k).map(|i| if i == k { hi } else { lo + i as f64 * resolution }).collect()
}

/// ζ̄ at every grid point of the first-stage box that lies in X.
pub fn grid_values(fs: &FirstStage, scenarios: &[Scenario], resolution: f64) -> Result<Vec<(DVector<f64>, f64)>> {
    let n = fs.n();
    if n == 0 || n > 2 {
        return Err(ModelError::Dimension(format!("grid brute force needs 1 or 2 first-stage variables, got {n}")));
    }
    if !(resolution > 0.0) {
        return Err(ModelError::Invalid("grid resolution must be positive".into()));
    }
    let axes: Vec<Vec<f64>> = (0..n).map(|i| axis_points(fs.lower[i], fs.upper[i], resolution)).collect();
    let mut points = Vec::new();
    if n == 1 {
        points.extend(axes[0].iter().map(|&t| DVector::from_element(1, t)));
    } else {
        for &a in &axes[0] {
            for &b in &axes[1] {
                points.push(DVector::from_row_slice(&[a, b]));
            }
        }
    }
    let workers = Workers::sequential();
    let mut out = Vec::new();
    for x in points.into_iter().filter(|x| fs.contains(x, 1e-12)) {
        let (v, _) = sample_average(fs, scenarios, &x, qp::DEFAULT_TOL, &workers)?;
        out.push((x, v));
    }
    Ok(out)
}

/// Minimum of ζ̄ over a uniform grid on X (one or two first-stage variables).
pub fn grid_bruteforce(fs: &FirstStage, scenarios: &[Scenario], resolution: f64) -> Result<GridResult> {
    let values = grid_values(fs, scenarios, resolution)?;
    let points = values.len();
    let (argmin, minimum) = values
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| ModelError::EmptyFirstStage)?;
    Ok(GridResult { minimum, argmin, points })
}

/// One coordinate direction of a recourse slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceStatus {
    Finite,
    /// Outside X̄.
    OutsideDomain,
    /// Inside X̄ but with an empty second-stage feasible set.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRow {
    pub coords: Vec<f64>,
    pub value: f64,
    pub status: SliceStatus,
}

/// ψ(·; ξ) along one or two coordinate axes through `base`.
pub fn recourse_slice(fs: &FirstStage, s: &Scenario, axes: &[AxisSpec], base: &DVector<f64>) -> Result<Vec<SliceRow>> {
    if axes.is_empty() || axes.len() > 2 {
        return Err(ModelError::Dimension(format!("slice needs 1 or 2 axes, got {}", axes.len())));
    }
    if base.len() != fs.n() {
        return Err(ModelError::Dimension("slice base point length".into()));
    }
    for a in axes {
        if a.coord >= fs.n() || a.points < 2 || !(a.lo < a.hi) {
            return Err(ModelError::Invalid(format!("bad axis spec {a:?}")));
        }
    }
    let ticks = |a: &AxisSpec| -> Vec<f64> {
        (0..a.points)
            .map(|k| a.lo + (a.hi - a.lo) * k as f64 / (a.points - 1) as f64)
            .collect()
    };
    let mut grid: Vec<Vec<f64>> = ticks(&axes[0]).into_iter().map(|t| vec![t]).collect();
    if axes.len() == 2 {
        let second = ticks(&axes[1]);
        grid = grid
            .into_iter()
            .flat_map(|c| second.iter().map(move |&t| vec![c[0], t]))
            .collect();
    }
    let mut rows = Vec::with_capacity(grid.len());
    for coords in grid {
        let mut x = base.clone();
        for (a, &t) in axes.iter().zip(&coords) {
            x[a.coord] = t;
        }
        let (value, status) = match evaluate_recourse(fs, s, &x, qp::DEFAULT_TOL) {
            Ok(Recourse::Finite { value, .. }) => (value, SliceStatus::Finite),
            Ok(Recourse::OutsideDomain) => (f64::INFINITY, SliceStatus::OutsideDomain),
            Err(ModelError::InfeasibleRecourse { .. }) => (f64::INFINITY, SliceStatus::Infeasible),
            Err(e) => return Err(e),
        };
        rows.push(SliceRow { coords, value, status });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub kappa1: f64,
    pub kappa2: f64,
    pub pairs_used: usize,
}

/// Empirical moduli of ψ̄ in its first and second argument over random
/// pairs in X̄. Pairs hitting an infeasible second stage are skipped.
pub fn probe_lipschitz(fs: &FirstStage, s: &Scenario, n_pairs: usize, seed: u64) -> Result<LipschitzEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (fs.xbar_lower(), fs.xbar_upper());
    let draw = |rng: &mut ChaCha8Rng| DVector::from_iterator(fs.n(), (0..fs.n()).map(|i| rng.random_range(lo[i]..=hi[i])));
    let lifted = |x: &DVector<f64>, z: &DVector<f64>| -> Result<Option<f64>> {
        match evaluate_lifted(fs, s, x, z, qp::DEFAULT_TOL) {
            Ok(r) => Ok(Some(r.value())),
            Err(ModelError::InfeasibleRecourse { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (mut k1, mut k2, mut used) = (0.0f64, 0.0f64, 0);
    for _ in 0..n_pairs {
        let (x1, x2, z) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        if let (Some(a), Some(b)) = (lifted(&x1, &z)?, lifted(&x2, &z)?) {
            let d = (&x1 - &x2).norm();
            if d > 0.0 {
                k1 = k1.max((a - b).abs() / d);
                used += 1;
            }
        }
        let (x, z1, z2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        if let (Some(a), Some(b)) = (lifted(&x, &z1)?, lifted(&x, &z2)?) {
            let d = (&z1 - &z2).norm();
            if d > 0.0 {
                k2 = k2.max((a - b).abs() / d);
                used += 1;
            }
        }
    }
    Ok(LipschitzEstimate {
        kappa1: k1,
        kappa2: k2,
        pairs_used: used,
    })
}
