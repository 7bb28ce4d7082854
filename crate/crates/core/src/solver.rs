//! The decomposition algorithm: surrogate cuts built from partial Moreau
//! envelopes, a strongly convex master problem per inner step, and an outer
//! loop driving the prox parameter to zero.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{self, KktReport};
use crate::model::{accept, normalized_weights, partial_moreau, EnvelopeResult, FirstStage, ModelError, Scenario, SecondStage};
use crate::parallel::Workers;
use crate::qp;

/// Allowed slack in the per-step descent inequality, covering QP accuracy.
pub const DESCENT_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("inner loop did not reach its stopping rule within {iterations} iterations (gamma {gamma:e})")]
    InnerStall { gamma: f64, iterations: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub gamma0: f64,
    pub gamma_decay: f64,
    pub eps0: f64,
    pub eps_decay: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol_feas_abs: f64,
    pub tol_feas_rel: f64,
    pub tol_obj_rel: f64,
    pub qp_tol: f64,
    /// Worker threads for scenario subproblems; 0 picks the rayon default.
    pub threads: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma0: 1.0,
            gamma_decay: 0.5,
            eps0: 0.1,
            eps_decay: 0.5,
            max_outer: 100,
            max_inner: 10_000,
            tol_feas_abs: 1e-2,
            tol_feas_rel: 1e-4,
            tol_obj_rel: 1e-4,
            qp_tol: qp::DEFAULT_TOL,
            threads: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SolverError::InvalidConfig(m));
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad(format!("gamma0 must be positive, got {}", self.gamma0));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return bad(format!("eps0 must be positive, got {}", self.eps0));
        }
        for (name, v) in [("gamma_decay", self.gamma_decay), ("eps_decay", self.eps_decay)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return bad("iteration limits must be positive".into());
        }
        for (name, v) in [
            ("tol_feas_abs", self.tol_feas_abs),
            ("tol_feas_rel", self.tol_feas_rel),
            ("tol_obj_rel", self.tol_obj_rel),
            ("qp_tol", self.qp_tol),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// γ_ν for the zero-based outer index ν.
    pub fn gamma(&self, outer: usize) -> f64 {
        self.gamma0 * self.gamma_decay.powi(outer as i32)
    }

    pub fn epsilon(&self, outer: usize) -> f64 {
        self.eps0 * self.eps_decay.powi(outer as i32)
    }
}

/// Convex quadratic majorant of e_γψ(·; ξ) that is tight at its anchor:
/// ‖x‖²/(2γ) − g_val − slopeᵀ(x − anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateCut {
    pub anchor: DVector<f64>,
    pub gamma: f64,
    pub g_val: f64,
    pub slope: DVector<f64>,
    pub scenario_id: usize,
    /// The envelope evaluation the cut was built from.
    pub envelope: EnvelopeResult,
}

impl SurrogateCut {
    pub fn value_at(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared() / (2.0 * self.gamma) - self.g_val - self.slope.dot(&(x - &self.anchor))
    }
}

pub fn build_cut(fs: &FirstStage, s: &Scenario, anchor: &DVector<f64>, gamma: f64, tol: f64) -> Result<SurrogateCut> {
    let envelope = partial_moreau(fs, s, anchor, gamma, tol)?;
    let g_val = anchor.norm_squared() / (2.0 * gamma) - envelope.value;
    let slope = &envelope.prox_x / gamma + &envelope.c_sub;
    Ok(SurrogateCut {
        anchor: anchor.clone(),
        gamma,
        g_val,
        slope,
        scenario_id: s.id,
        envelope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub x: DVector<f64>,
    /// φ(x) + Σ w_s cut_s(x), constants included.
    pub value: f64,
}

/// Minimizes φ(x) + Σ w_s cut_s(x) over X.
pub fn solve_master(fs: &FirstStage, cuts: &[SurrogateCut], weights: &[f64], tol: f64) -> Result<MasterSolution> {
    if cuts.is_empty() || cuts.len() != weights.len() {
        return Err(SolverError::Model(ModelError::Dimension(format!(
            "{} cuts with {} weights",
            cuts.len(),
            weights.len()
        ))));
    }
    let gamma = cuts[0].gamma;
    if cuts.iter().any(|c| c.gamma != gamma) {
        return Err(SolverError::InvalidConfig("cuts built with different gamma".into()));
    }
    let n = fs.n();
    let total: f64 = weights.iter().sum();
    let mut hessian = fs.hessian.clone();
    for i in 0..n {
        hessian[(i, i)] += total / gamma;
    }
    let mut linear = fs.cost.clone();
    let mut constant = 0.0;
    for (c, &w) in cuts.iter().zip(weights) {
        linear.axpy(-w, &c.slope, 1.0);
        constant += w * (c.slope.dot(&c.anchor) - c.g_val);
    }
    let p = fs.qp_over_x(hessian, linear);
    let sol = qp::solve_qp(&p, tol, qp::DEFAULT_MAX_ITER).map_err(ModelError::from)?;
    if sol.status == qp::QpStatus::Infeasible {
        return Err(ModelError::EmptyFirstStage.into());
    }
    let sol = accept(sol, "master problem")?;
    let value = p.objective(&sol.primal) + constant;
    Ok(MasterSolution { x: sol.primal, value })
}

/// One master step of the inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerStep {
    /// ζ̂ at the anchor of this step.
    pub zeta_before: f64,
    /// ζ̂ at the new iterate, known once the next step has been built.
    pub zeta_after: Option<f64>,
    pub step_norm: f64,
}

impl InnerStep {
    /// ζ̂(x_i) − ζ̂(x_{i+1}) − ‖x_i − x_{i+1}‖²/(2γ); nonnegative up to QP accuracy.
    pub fn descent_margin(&self, gamma: f64) -> Option<f64> {
        self.zeta_after
            .map(|after| self.zeta_before - after - self.step_norm * self.step_norm / (2.0 * gamma))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub x_next: DVector<f64>,
    /// Anchor of the final master step.
    pub anchor: DVector<f64>,
    pub iterations: usize,
    pub steps: Vec<InnerStep>,
    /// Cuts of the final master step.
    pub cuts: Vec<SurrogateCut>,
}

/// Repeats cut building and master solves from `x_start` until
/// ‖x_{i+1} − x_i‖ <= ε γ.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    fs: &FirstStage,
    scenarios: &[Scenario],
    weights: &[f64],
    x_start: &DVector<f64>,
    gamma: f64,
    eps: f64,
    cfg: &SolverConfig,
    workers: &Workers,
) -> Result<InnerOutcome> {
    let mut x = x_start.clone();
    let mut steps: Vec<InnerStep> = Vec::new();
    for it in 0..cfg.max_inner {
        let cuts = workers.try_map(scenarios.len(), |k| build_cut(fs, &scenarios[k], &x, gamma, cfg.qp_tol))?;
        let zeta = fs.phi(&x) + cuts.iter().zip(weights).map(|(c, w)| w * c.envelope.value).sum::<f64>();
        if let Some(last) = steps.last_mut() {
            last.zeta_after = Some(zeta);
        }
        let master = solve_master(fs, &cuts, weights, cfg.qp_tol)?;
        let step_norm = (&master.x - &x).norm();
        steps.push(InnerStep {
            zeta_before: zeta,
            zeta_after: None,
            step_norm,
        });
        if step_norm <= eps * gamma {
            return Ok(InnerOutcome {
                x_next: master.x,
                anchor: x,
                iterations: it + 1,
                steps,
                cuts,
            });
        }
        x = master.x;
    }
    Err(SolverError::InnerStall {
        gamma,
        iterations: cfg.max_inner,
    })
}

/// dist(0, ∇φ(x_next) + Σ w_s[(anchor − x^s)/γ − c^s + N_X̄(x^s)] + N_X(x_next)),
/// with x^s, c^s taken from the envelopes evaluated at `anchor`.
pub fn criticality_residual(
    fs: &FirstStage,
    weights: &[f64],
    anchor: &DVector<f64>,
    x_next: &DVector<f64>,
    envelopes: &[&EnvelopeResult],
    gamma: f64,
) -> Result<f64> {
    let mut v = fs.grad_phi(x_next);
    let mut extra = Vec::new();
    for (e, &w) in envelopes.iter().zip(weights) {
        v += ((anchor - &e.prox_x) / gamma - &e.c_sub) * w;
        for (i, sign) in e.xbar_contacts(fs) {
            let mut d = DVector::zeros(fs.n());
            d[i] = sign;
            extra.push(d);
        }
    }
    extra.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
    extra.dedup();
    Ok(diagnostics::normal_cone_distance(fs, x_next, &v, &extra, 1e-7)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxOuter,
    InnerStall,
    RecourseInfeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub inner_iters: usize,
    pub s_nu: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub objective: f64,
    pub feas_abs: f64,
    pub feas_rel: f64,
    pub kkt_abs: f64,
    pub kkt_rel: f64,
    pub criticality: f64,
    pub time_s: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str =
        "outer,inner_iters,S_nu,gamma,epsilon,objective,feas_abs,feas_rel,kkt_abs,kkt_rel,criticality,time_s";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:.12e},{:e},{:e},{:e},{:e},{:e},{:.6}",
            self.outer,
            self.inner_iters,
            self.s_nu,
            self.gamma,
            self.epsilon,
            self.objective,
            self.feas_abs,
            self.feas_rel,
            self.kkt_abs,
            self.kkt_rel,
            self.criticality,
            self.time_s
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x_final: DVector<f64>,
    /// ζ̄ over the reference scenarios at x_final.
    pub objective: f64,
    /// Exact second-stage solutions at x_final, one per reference scenario.
    pub second_stage: Vec<SecondStage>,
    pub kkt: Option<KktReport>,
    /// ‖x_{i+1} − x_i‖/γ at exit.
    pub criticality: f64,
    /// Normal-cone distance of the final inner step.
    pub criticality_distance: f64,
    /// Smallest descent margin seen over all inner steps.
    pub min_descent_margin: f64,
    pub trace: Vec<TraceRow>,
    pub failed_scenario: Option<usize>,
    /// Set when the scenarios come from a continuous distribution, where the
    /// stopping test is only a heuristic.
    pub heuristic: bool,
    pub config: SolverConfig,
}

impl SolveReport {
    pub fn kkt_abs(&self) -> f64 {
        self.kkt.as_ref().map_or(f64::INFINITY, |k| k.kkt_abs)
    }

    pub fn kkt_rel(&self) -> f64 {
        self.kkt.as_ref().map_or(f64::INFINITY, |k| k.kkt_rel)
    }
}

/// Source of the scenarios used at each outer iteration. Active scenarios
/// are always a prefix of [`ActiveSet::scenarios`].
pub trait ActiveSet {
    /// Prepares outer iteration `outer` (zero-based) and returns the number
    /// of leading scenarios it uses.
    fn prepare(&mut self, outer: usize) -> Result<usize>;
    fn scenarios(&self) -> &[Scenario];
    /// Number of leading scenarios used for objective and KKT evaluation.
    fn reference_len(&self) -> usize;
    fn heuristic(&self) -> bool {
        false
    }
}

/// A fixed scenario set used in full at every outer iteration.
pub struct FixedSet<'a>(pub &'a [Scenario]);

impl ActiveSet for FixedSet<'_> {
    fn prepare(&mut self, _outer: usize) -> Result<usize> {
        Ok(self.0.len())
    }

    fn scenarios(&self) -> &[Scenario] {
        self.0
    }

    fn reference_len(&self) -> usize {
        self.0.len()
    }
}

pub fn solve(fs: &FirstStage, scenarios: &[Scenario], cfg: &SolverConfig) -> Result<SolveReport> {
    solve_with(fs, &mut FixedSet(scenarios), cfg)
}

fn second_stages_at(
    fs: &FirstStage,
    scenarios: &[Scenario],
    x: &DVector<f64>,
    tol: f64,
    workers: &Workers,
) -> std::result::Result<(f64, Vec<SecondStage>), ModelError> {
    diagnostics::sample_average(fs, scenarios, x, tol, workers)
}

/// The outer loop over any scenario source.
pub fn solve_with(fs: &FirstStage, set: &mut dyn ActiveSet, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    fs.validate()?;
    for s in set.scenarios() {
        s.validate(fs.n())?;
    }
    let workers = Workers::new(cfg.threads);
    let clock = Instant::now();
    let mut x = fs.reference_point()?;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut min_descent = f64::INFINITY;
    let mut criticality = f64::INFINITY;
    let mut criticality_distance = f64::INFINITY;
    let mut prev_objective: Option<f64> = None;
    let mut status = SolveStatus::MaxOuter;
    let mut failed_scenario = None;
    let mut last_eval: Option<(f64, Vec<SecondStage>, KktReport)> = None;

    for outer in 0..cfg.max_outer {
        let gamma = cfg.gamma(outer);
        let eps = cfg.epsilon(outer);
        let n_active = set.prepare(outer)?;
        let active = &set.scenarios()[..n_active];
        if active.is_empty() {
            return Err(SolverError::InvalidConfig("no active scenarios".into()));
        }
        let weights = normalized_weights(active);
        let inner = match inner_loop(fs, active, &weights, &x, gamma, eps, cfg, &workers) {
            Ok(inner) => inner,
            Err(SolverError::InnerStall { .. }) => {
                status = SolveStatus::InnerStall;
                break;
            }
            Err(SolverError::Model(ModelError::InfeasibleRecourse { scenario })) => {
                status = SolveStatus::RecourseInfeasible;
                failed_scenario = Some(scenario);
                break;
            }
            Err(e) => return Err(e),
        };
        for step in &inner.steps {
            if let Some(m) = step.descent_margin(gamma) {
                min_descent = min_descent.min(m);
            }
        }
        let last_step = inner.steps.last().map_or(0.0, |s| s.step_norm);
        criticality = last_step / gamma;
        let envelopes: Vec<&EnvelopeResult> = inner.cuts.iter().map(|c| &c.envelope).collect();
        criticality_distance = criticality_residual(fs, &weights, &inner.anchor, &inner.x_next, &envelopes, gamma)?;
        x = inner.x_next;

        let reference = &set.scenarios()[..set.reference_len()];
        let (objective, seconds) = match second_stages_at(fs, reference, &x, cfg.qp_tol, &workers) {
            Ok(v) => v,
            Err(ModelError::InfeasibleRecourse { scenario }) => {
                status = SolveStatus::RecourseInfeasible;
                failed_scenario = Some(scenario);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let kkt = diagnostics::kkt_residuals(fs, reference, &x, &seconds)?;
        trace.push(TraceRow {
            outer,
            inner_iters: inner.iterations,
            s_nu: n_active,
            gamma,
            epsilon: eps,
            objective,
            feas_abs: kkt.feas_abs,
            feas_rel: kkt.feas_rel,
            kkt_abs: kkt.kkt_abs,
            kkt_rel: kkt.kkt_rel,
            criticality,
            time_s: clock.elapsed().as_secs_f64(),
        });
        let stop = kkt.feas_abs <= cfg.tol_feas_abs
            && kkt.feas_rel <= cfg.tol_feas_rel
            && prev_objective.is_some_and(|p| (objective - p).abs() / p.abs().max(1.0) <= cfg.tol_obj_rel);
        prev_objective = Some(objective);
        last_eval = Some((objective, seconds, kkt));
        if stop {
            status = SolveStatus::Converged;
            break;
        }
    }

    let (objective, second_stage, kkt) = match last_eval {
        Some((o, s, k)) if failed_scenario.is_none() => (o, s, Some(k)),
        _ => (f64::INFINITY, Vec::new(), None),
    };
    Ok(SolveReport {
        status,
        x_final: x,
        objective,
        second_stage,
        kkt,
        criticality,
        criticality_distance,
        min_descent_margin: min_descent,
        trace,
        failed_scenario,
        heuristic: set.heuristic(),
        config: cfg.clone(),
    })
}
