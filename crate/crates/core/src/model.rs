//! Bilinear two-stage model and the recourse-side evaluations.
//!
//! The second-stage problem of scenario ξ at first-stage decision x is
//!
//! ```text
//!     ψ(x; ξ) = aᵀx + min_y { (b + Bᵀx)ᵀy : C x + D y <= h, F y = d, y_lo <= y <= y_hi }
//! ```
//!
//! and ψ(x) = +∞ outside the inflated box X̄. The lifted function ψ̄(x, z)
//! keeps x in the constraints and z in the objective, so ψ̄(·, z) is convex,
//! ψ̄(x, ·) is concave, and ψ(x) = ψ̄(x, x).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qp::{self, QpError, QpProblem, QpSolution, QpStatus};

/// MaxIter solutions are accepted when their KKT residual is below this.
const APPROX_ACCEPT: f64 = 1e-6;
/// Prox coordinates closer than this to a face of X̄ count as touching it.
pub const BOUNDARY_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("second-stage problem of scenario {scenario} is infeasible")]
    InfeasibleRecourse { scenario: usize },
    #[error("first-stage feasible set X is empty")]
    EmptyFirstStage,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{context}: QP solver returned {status:?} (kkt residual {residual:e})")]
    SolverFailure {
        context: &'static str,
        status: QpStatus,
        residual: f64,
    },
    #[error(transparent)]
    Qp(#[from] QpError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn accept(sol: QpSolution, context: &'static str) -> Result<QpSolution> {
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::MaxIter if sol.kkt_residual <= APPROX_ACCEPT => Ok(sol),
        status => Err(ModelError::SolverFailure {
            context,
            status,
            residual: sol.kkt_residual,
        }),
    }
}

/// Default per-coordinate inflation of the first-stage box.
pub fn default_margin(lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    lower.zip_map(upper, |l, u| (0.05 * (u - l)).max(1e-3))
}

/// First-stage data: φ(x) = cᵀx + ½xᵀPx over
/// X = { lower <= x <= upper, A_ineq x <= b_ineq, A_eq x = b_eq }.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStage {
    pub cost: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// X̄ = [lower - margin, upper + margin].
    pub margin: DVector<f64>,
}

impl FirstStage {
    pub fn new(cost: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = cost.len();
        let margin = default_margin(&lower, &upper);
        FirstStage {
            cost,
            hessian: DMatrix::zeros(n, n),
            lower,
            upper,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            margin,
        }
    }

    pub fn with_hessian(mut self, p: DMatrix<f64>) -> Self {
        self.hessian = p;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_margin(mut self, margin: DVector<f64>) -> Self {
        self.margin = margin;
        self
    }

    pub fn n(&self) -> usize {
        self.cost.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |what: &str| Err(ModelError::Dimension(format!("first stage: {what}")));
        if self.hessian.shape() != (n, n) {
            return bad("P");
        }
        if self.lower.len() != n || self.upper.len() != n || self.margin.len() != n {
            return bad("box or margin length");
        }
        if self.a_ineq.shape() != (self.b_ineq.len(), n) {
            return bad("A_ineq");
        }
        if self.a_eq.shape() != (self.b_eq.len(), n) {
            return bad("A_eq");
        }
        for i in 0..n {
            if !(self.lower[i] < self.upper[i]) || !self.lower[i].is_finite() || !self.upper[i].is_finite() {
                return Err(ModelError::Invalid(format!("first-stage box coordinate {i} is empty or unbounded")));
            }
            if !(self.margin[i] > 0.0) {
                return Err(ModelError::Invalid(format!("X̄ margin of coordinate {i} must be positive")));
            }
        }
        qp::check_psd(&self.hessian)?;
        Ok(())
    }

    pub fn xbar_lower(&self) -> DVector<f64> {
        &self.lower - &self.margin
    }

    pub fn xbar_upper(&self) -> DVector<f64> {
        &self.upper + &self.margin
    }

    pub fn in_xbar(&self, x: &DVector<f64>) -> bool {
        x.len() == self.n()
            && (0..self.n()).all(|i| x[i] >= self.lower[i] - self.margin[i] && x[i] <= self.upper[i] + self.margin[i])
    }

    /// Maximum violation of the constraints defining X.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.n() {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        let r = &self.a_ineq * x - &self.b_ineq;
        v = r.iter().fold(v, |m, &e| m.max(e));
        let r = &self.a_eq * x - &self.b_eq;
        r.iter().fold(v, |m, &e| m.max(e.abs()))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.violation(x) <= tol
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        self.cost.dot(x) + 0.5 * x.dot(&(&self.hessian * x))
    }

    pub fn grad_phi(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.cost + &self.hessian * x
    }

    /// QP over X with the given objective.
    pub(crate) fn qp_over_x(&self, hessian: DMatrix<f64>, linear: DVector<f64>) -> QpProblem {
        QpProblem::new(hessian, linear)
            .with_eq(self.a_eq.clone(), self.b_eq.clone())
            .with_ineq(self.a_ineq.clone(), self.b_ineq.clone())
            .with_bounds(self.lower.clone(), self.upper.clone())
    }

    /// Euclidean projection onto X.
    pub fn project(&self, point: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        let n = self.n();
        let p = self.qp_over_x(DMatrix::identity(n, n), -point);
        let sol = qp::solve_qp(&p, tol, qp::DEFAULT_MAX_ITER)?;
        if sol.status == QpStatus::Infeasible {
            return Err(ModelError::EmptyFirstStage);
        }
        Ok(accept(sol, "projection onto X")?.primal)
    }

    /// Projection of the box midpoint onto X; the default starting point and
    /// the reference point for relative feasibility.
    pub fn reference_point(&self) -> Result<DVector<f64>> {
        self.project(&((&self.lower + &self.upper) * 0.5), qp::DEFAULT_TOL)
    }

    /// Number of constraint rows of X, counting each finite bound.
    pub fn row_count(&self) -> usize {
        self.b_ineq.len() + self.b_eq.len() + 2 * self.n()
    }
}

/// One realization ξ of the second-stage data.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: usize,
    /// Linear-in-x objective term a.
    pub x_cost: DVector<f64>,
    /// Linear-in-y objective term b.
    pub y_cost: DVector<f64>,
    /// Bilinear coupling B (n1 × n2).
    pub coupling: DMatrix<f64>,
    /// C in C x + D y <= h.
    pub joint_x: DMatrix<f64>,
    /// D in C x + D y <= h.
    pub joint_y: DMatrix<f64>,
    pub joint_rhs: DVector<f64>,
    /// F in F y = d.
    pub eq_y: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub y_lower: DVector<f64>,
    pub y_upper: DVector<f64>,
    /// Relative probability mass; normalized over the active scenario set.
    pub weight: f64,
}

impl Scenario {
    pub fn n1(&self) -> usize {
        self.x_cost.len()
    }

    pub fn n2(&self) -> usize {
        self.y_cost.len()
    }

    pub fn validate(&self, n1: usize) -> Result<()> {
        let n2 = self.n2();
        let mj = self.joint_rhs.len();
        let me = self.eq_rhs.len();
        let bad = |what: &str| Err(ModelError::Dimension(format!("scenario {}: {what}", self.id)));
        if self.x_cost.len() != n1 {
            return bad("a");
        }
        if self.coupling.shape() != (n1, n2) {
            return bad("B");
        }
        if self.joint_x.shape() != (mj, n1) || self.joint_y.shape() != (mj, n2) {
            return bad("C/D");
        }
        if self.eq_y.shape() != (me, n2) {
            return bad("F");
        }
        if self.y_lower.len() != n2 || self.y_upper.len() != n2 {
            return bad("y box");
        }
        for j in 0..n2 {
            if !(self.y_lower[j] <= self.y_upper[j]) || !self.y_lower[j].is_finite() || !self.y_upper[j].is_finite() {
                return Err(ModelError::Invalid(format!("scenario {}: y box coordinate {j} must be finite and nonempty", self.id)));
            }
        }
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(ModelError::Invalid(format!("scenario {}: weight must be positive", self.id)));
        }
        Ok(())
    }

    /// f(z, y) = aᵀz + bᵀy + zᵀBy.
    pub fn f(&self, z: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.x_cost.dot(z) + self.y_cost.dot(y) + z.dot(&(&self.coupling * y))
    }

    /// Number of constraint rows of one scenario block, counting each y bound.
    pub fn row_count(&self) -> usize {
        self.joint_rhs.len() + self.eq_rhs.len() + 2 * self.n2()
    }

    /// Maximum violation of the second-stage constraints at (x, y).
    pub fn violation(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        let r = &self.joint_x * x + &self.joint_y * y - &self.joint_rhs;
        v = r.iter().fold(v, |m, &e| m.max(e));
        let r = &self.eq_y * y - &self.eq_rhs;
        v = r.iter().fold(v, |m, &e| m.max(e.abs()));
        for j in 0..self.n2() {
            v = v.max(self.y_lower[j] - y[j]).max(y[j] - self.y_upper[j]);
        }
        v
    }
}

/// Second-stage multipliers, in the sign convention of the unweighted
/// second-stage problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RecourseDuals {
    pub joint: DVector<f64>,
    pub eq: DVector<f64>,
    pub y_lower: DVector<f64>,
    pub y_upper: DVector<f64>,
}

impl RecourseDuals {
    pub fn zeros(s: &Scenario) -> Self {
        RecourseDuals {
            joint: DVector::zeros(s.joint_rhs.len()),
            eq: DVector::zeros(s.eq_rhs.len()),
            y_lower: DVector::zeros(s.n2()),
            y_upper: DVector::zeros(s.n2()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStage {
    pub y: DVector<f64>,
    pub duals: RecourseDuals,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recourse {
    Finite { value: f64, second: SecondStage },
    /// The query point lies outside X̄, where ψ = +∞.
    OutsideDomain,
}

impl Recourse {
    pub fn value(&self) -> f64 {
        match self {
            Recourse::Finite { value, .. } => *value,
            Recourse::OutsideDomain => f64::INFINITY,
        }
    }

    pub fn second(&self) -> Option<&SecondStage> {
        match self {
            Recourse::Finite { second, .. } => Some(second),
            Recourse::OutsideDomain => None,
        }
    }
}

/// Solves min_y (b + Bᵀz)ᵀy s.t. C x + D y <= h, F y = d, y box, without
/// any domain check on x or z.
pub fn solve_second_stage(s: &Scenario, x: &DVector<f64>, z: &DVector<f64>, tol: f64) -> Result<(f64, SecondStage)> {
    let n2 = s.n2();
    let linear = &s.y_cost + s.coupling.tr_mul(z);
    let p = QpProblem::new(DMatrix::zeros(n2, n2), linear.clone())
        .with_ineq(s.joint_y.clone(), &s.joint_rhs - &s.joint_x * x)
        .with_eq(s.eq_y.clone(), s.eq_rhs.clone())
        .with_bounds(s.y_lower.clone(), s.y_upper.clone());
    let sol = qp::solve_qp(&p, tol, qp::DEFAULT_MAX_ITER)?;
    if sol.status == QpStatus::Infeasible {
        return Err(ModelError::InfeasibleRecourse { scenario: s.id });
    }
    let sol = accept(sol, "second-stage problem")?;
    let value = s.x_cost.dot(z) + linear.dot(&sol.primal);
    Ok((
        value,
        SecondStage {
            y: sol.primal,
            duals: RecourseDuals {
                joint: sol.dual_in,
                eq: sol.dual_eq,
                y_lower: sol.dual_lower,
                y_upper: sol.dual_upper,
            },
        },
    ))
}

/// ψ(z; ξ), +∞ outside X̄.
pub fn evaluate_recourse(fs: &FirstStage, s: &Scenario, z: &DVector<f64>, tol: f64) -> Result<Recourse> {
    check_dims(fs, s, z)?;
    if !fs.in_xbar(z) {
        return Ok(Recourse::OutsideDomain);
    }
    let (value, second) = solve_second_stage(s, z, z, tol)?;
    Ok(Recourse::Finite { value, second })
}

/// ψ̄(x, z; ξ), +∞ when either argument leaves X̄.
pub fn evaluate_lifted(fs: &FirstStage, s: &Scenario, x: &DVector<f64>, z: &DVector<f64>, tol: f64) -> Result<Recourse> {
    check_dims(fs, s, x)?;
    check_dims(fs, s, z)?;
    if !fs.in_xbar(x) || !fs.in_xbar(z) {
        return Ok(Recourse::OutsideDomain);
    }
    let (value, second) = solve_second_stage(s, x, z, tol)?;
    Ok(Recourse::Finite { value, second })
}

fn check_dims(fs: &FirstStage, s: &Scenario, x: &DVector<f64>) -> Result<()> {
    if x.len() != fs.n() || s.n1() != fs.n() {
        return Err(ModelError::Dimension(format!(
            "point has {} entries, model has {} first-stage variables, scenario {} has {}",
            x.len(),
            fs.n(),
            s.id,
            s.n1()
        )));
    }
    Ok(())
}

/// Value and minimizers of the partial Moreau envelope at z.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeResult {
    /// e_γψ(z; ξ).
    pub value: f64,
    /// Proximal point P_γψ(z; ξ) ∈ X̄.
    pub prox_x: DVector<f64>,
    pub y_opt: DVector<f64>,
    /// −(a + B y_opt), an element of ∂₂(−ψ̄)(prox_x, z).
    pub c_sub: DVector<f64>,
    pub duals: RecourseDuals,
}

impl EnvelopeResult {
    /// Coordinates where the prox point sits on the lower (−1) or upper (+1)
    /// face of X̄.
    pub fn xbar_contacts(&self, fs: &FirstStage) -> Vec<(usize, f64)> {
        let (lo, hi) = (fs.xbar_lower(), fs.xbar_upper());
        let mut out = Vec::new();
        for i in 0..fs.n() {
            let scale = 1.0 + lo[i].abs().max(hi[i].abs());
            if self.prox_x[i] - lo[i] <= BOUNDARY_TOL * scale {
                out.push((i, -1.0));
            } else if hi[i] - self.prox_x[i] <= BOUNDARY_TOL * scale {
                out.push((i, 1.0));
            }
        }
        out
    }
}

/// e_γψ(z; ξ) = min_{x ∈ X̄, y} f(z, y) + ‖x − z‖²/(2γ) s.t. C x + D y <= h, F y = d, y box.
pub fn partial_moreau(fs: &FirstStage, s: &Scenario, z: &DVector<f64>, gamma: f64, tol: f64) -> Result<EnvelopeResult> {
    check_dims(fs, s, z)?;
    if !(gamma > 0.0) {
        return Err(ModelError::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    let n1 = fs.n();
    let n2 = s.n2();
    let n = n1 + n2;
    let mj = s.joint_rhs.len();
    let me = s.eq_rhs.len();
    let inv_gamma = 1.0 / gamma;

    let mut hessian = DMatrix::zeros(n, n);
    for i in 0..n1 {
        hessian[(i, i)] = inv_gamma;
    }
    let mut linear = DVector::zeros(n);
    linear.rows_mut(0, n1).copy_from(&(-inv_gamma * z));
    let y_linear = &s.y_cost + s.coupling.tr_mul(z);
    linear.rows_mut(n1, n2).copy_from(&y_linear);

    let mut a_in = DMatrix::zeros(mj, n);
    a_in.view_mut((0, 0), (mj, n1)).copy_from(&s.joint_x);
    a_in.view_mut((0, n1), (mj, n2)).copy_from(&s.joint_y);
    let mut a_eq = DMatrix::zeros(me, n);
    a_eq.view_mut((0, n1), (me, n2)).copy_from(&s.eq_y);
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    lower.rows_mut(0, n1).copy_from(&fs.xbar_lower());
    upper.rows_mut(0, n1).copy_from(&fs.xbar_upper());
    lower.rows_mut(n1, n2).copy_from(&s.y_lower);
    upper.rows_mut(n1, n2).copy_from(&s.y_upper);

    let p = QpProblem::new(hessian, linear)
        .with_ineq(a_in, s.joint_rhs.clone())
        .with_eq(a_eq, s.eq_rhs.clone())
        .with_bounds(lower, upper);
    let sol = qp::solve_qp(&p, tol, qp::DEFAULT_MAX_ITER)?;
    if sol.status == QpStatus::Infeasible {
        return Err(ModelError::InfeasibleRecourse { scenario: s.id });
    }
    let sol = accept(sol, "partial Moreau envelope")?;
    let prox_x = sol.primal.rows(0, n1).into_owned();
    let y_opt = sol.primal.rows(n1, n2).into_owned();
    let d = &prox_x - z;
    let value = s.x_cost.dot(z) + y_linear.dot(&y_opt) + 0.5 * inv_gamma * d.norm_squared();
    let c_sub = -(&s.x_cost + &s.coupling * &y_opt);
    Ok(EnvelopeResult {
        value,
        prox_x,
        y_opt,
        c_sub,
        duals: RecourseDuals {
            joint: sol.dual_in,
            eq: sol.dual_eq,
            y_lower: sol.dual_lower.rows(n1, n2).into_owned(),
            y_upper: sol.dual_upper.rows(n1, n2).into_owned(),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFailure {
    pub probe: usize,
    pub scenario: usize,
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub x_nonempty: bool,
    pub probes: usize,
    pub failures: Vec<ProbeFailure>,
    /// Empirical Lipschitz moduli of ψ̄ in x and in z (max over probed scenarios).
    pub kappa1: f64,
    pub kappa2: f64,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.x_nonempty && self.failures.is_empty()
    }
}

/// Empirical check of relatively complete recourse: X nonempty and every
/// scenario feasible at `n_probe` uniform points of X̄.
pub fn validate_instance(fs: &FirstStage, scenarios: &[Scenario], n_probe: usize, seed: u64) -> Result<ValidationReport> {
    fs.validate()?;
    for s in scenarios {
        s.validate(fs.n())?;
    }
    let x_nonempty = match fs.reference_point() {
        Ok(_) => true,
        Err(ModelError::EmptyFirstStage) => false,
        Err(e) => return Err(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (fs.xbar_lower(), fs.xbar_upper());
    let mut failures = Vec::new();
    for probe in 0..n_probe {
        let x = DVector::from_iterator(fs.n(), (0..fs.n()).map(|i| rng.random_range(lo[i]..=hi[i])));
        for s in scenarios {
            match solve_second_stage(s, &x, &x, qp::DEFAULT_TOL) {
                Ok(_) => {}
                Err(ModelError::InfeasibleRecourse { .. }) => failures.push(ProbeFailure {
                    probe,
                    scenario: s.id,
                    x: x.clone(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    let (mut kappa1, mut kappa2) = (0.0f64, 0.0f64);
    for (k, s) in scenarios.iter().take(5).enumerate() {
        let est = crate::diagnostics::probe_lipschitz(fs, s, n_probe.clamp(1, 20), seed.wrapping_add(k as u64 + 1))?;
        kappa1 = kappa1.max(est.kappa1);
        kappa2 = kappa2.max(est.kappa2);
    }
    Ok(ValidationReport {
        x_nonempty,
        probes: n_probe,
        failures,
        kappa1,
        kappa2,
    })
}

/// Scenario weights normalized to sum to one.
pub fn normalized_weights(scenarios: &[Scenario]) -> Vec<f64> {
    let total: f64 = scenarios.iter().map(|s| s.weight).sum();
    scenarios.iter().map(|s| s.weight / total).collect()
}

/// The one-dimensional toy problem: ψ(x) = min { −x·y : 0 <= y <= x } = −x²
/// on X = [0, 1] with X̄ = [−0.05, 1.05].
pub fn toy_problem() -> (FirstStage, Vec<Scenario>) {
    let one = |v: f64| DVector::from_element(1, v);
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let fs = FirstStage::new(one(0.0), one(0.0), one(1.0));
    let s = Scenario {
        id: 0,
        x_cost: one(0.0),
        y_cost: one(0.0),
        coupling: m(-1.0),
        joint_x: m(-1.0),
        joint_y: m(1.0),
        joint_rhs: one(0.0),
        eq_y: DMatrix::zeros(0, 1),
        eq_rhs: DVector::zeros(0),
        y_lower: one(0.0),
        y_upper: one(2.0),
        weight: 1.0,
    };
    (fs, vec![s])
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = qp::DEFAULT_TOL;

    fn pt(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn toy_recourse_closed_form() {
        let (fs, sc) = toy_problem();
        let r = evaluate_recourse(&fs, &sc[0], &pt(0.5), TOL).unwrap();
        assert!((r.value() + 0.25).abs() < 1e-8);
        assert!((r.second().unwrap().y[0] - 0.5).abs() < 1e-8);
        let r = evaluate_recourse(&fs, &sc[0], &pt(0.0), TOL).unwrap();
        assert!(r.value().abs() < 1e-8);
        assert!(r.second().unwrap().y[0].abs() < 1e-8);
    }

    #[test]
    fn outside_xbar_is_infinite() {
        let (fs, sc) = toy_problem();
        let r = evaluate_recourse(&fs, &sc[0], &pt(1.2), TOL).unwrap();
        assert_eq!(r, Recourse::OutsideDomain);
        assert_eq!(r.value(), f64::INFINITY);
    }

    #[test]
    fn toy_negative_capacity_is_infeasible() {
        let (fs, sc) = toy_problem();
        let err = evaluate_recourse(&fs, &sc[0], &pt(-0.03), TOL).unwrap_err();
        assert_eq!(err, ModelError::InfeasibleRecourse { scenario: 0 });
    }

    #[test]
    fn toy_lifted_values() {
        let (fs, sc) = toy_problem();
        let r = evaluate_lifted(&fs, &sc[0], &pt(1.0), &pt(0.5), TOL).unwrap();
        assert!((r.value() + 0.5).abs() < 1e-8);
        assert!((r.second().unwrap().y[0] - 1.0).abs() < 1e-8);
        let r = evaluate_lifted(&fs, &sc[0], &pt(0.8), &pt(-0.02), TOL).unwrap();
        assert!(r.value().abs() < 1e-8);
        assert!(r.second().unwrap().y[0].abs() < 1e-8);
    }

    #[test]
    fn toy_envelope_closed_form() {
        let (fs, sc) = toy_problem();
        let e = partial_moreau(&fs, &sc[0], &pt(0.5), 0.1, TOL).unwrap();
        assert!((e.value + 0.2625).abs() < 1e-8);
        assert!((e.prox_x[0] - 0.55).abs() < 1e-8);
        assert!((e.y_opt[0] - 0.55).abs() < 1e-8);
        assert!((e.c_sub[0] - 0.55).abs() < 1e-8);
        assert!(e.xbar_contacts(&fs).is_empty());
    }

    #[test]
    fn toy_envelope_clipped_by_xbar() {
        let (fs, sc) = toy_problem();
        let e = partial_moreau(&fs, &sc[0], &pt(1.0), 0.1, TOL).unwrap();
        assert!((e.prox_x[0] - 1.05).abs() < 1e-8);
        assert_eq!(e.xbar_contacts(&fs), vec![(0, 1.0)]);
    }

    #[test]
    fn rejects_bad_gamma_and_dims() {
        let (fs, sc) = toy_problem();
        assert!(matches!(partial_moreau(&fs, &sc[0], &pt(0.5), 0.0, TOL), Err(ModelError::Invalid(_))));
        let z = DVector::from_element(2, 0.5);
        assert!(matches!(evaluate_recourse(&fs, &sc[0], &z, TOL), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn empty_first_stage_detected() {
        let (fs, sc) = toy_problem();
        let fs = fs.with_ineq(DMatrix::from_element(1, 1, 1.0), pt(-1.0));
        let rep = validate_instance(&fs, &sc, 3, 1).unwrap();
        assert!(!rep.x_nonempty);
        assert!(!rep.ok());
    }

    #[test]
    fn reference_point_is_projected_midpoint() {
        let (fs, _) = toy_problem();
        let x0 = fs.reference_point().unwrap();
        assert!((x0[0] - 0.5).abs() < 1e-9);
    }
}
