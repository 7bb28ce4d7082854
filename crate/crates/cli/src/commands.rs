use std::path::Path;
use std::time::Instant;

use dpme_core::diagnostics::{self, AxisSpec, SliceStatus};
use dpme_core::instances::{
    self, compute_de_size, digest, generate_power_instance, power_first_stage, toy_instance, Instance, InstanceError,
    MixtureNormalization, PowerConfig, PowerSampler, TruncNormal,
};
use dpme_core::model::{evaluate_recourse, normalized_weights, ModelError, Recourse, RecourseDuals, SecondStage};
use dpme_core::parallel::Workers;
use dpme_core::sampling::{solve_sampled as run_sampled, SampleSchedule, ScenarioPool};
use dpme_core::solver::{self, build_cut, solve_master, SolveReport, SolveStatus, SolverConfig, SolverError};
use nalgebra::DVector;
use serde_json::json;
use thiserror::Error;

use crate::output::{trace_csv, write_json, write_text, OutputHeader, SolutionFile};
use crate::{BenchArgs, GenArgs, InstanceKind, Normalization, PowerArgs, SampledArgs, SliceArgs, SolveArgs, SolverArgs, VerifyArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_MAX_OUTER: u8 = 3;
pub const EXIT_INNER_STALL: u8 = 4;
pub const EXIT_VERIFY_FAILED: u8 = 2;

fn exit_for(status: SolveStatus) -> u8 {
    match status {
        SolveStatus::Converged => EXIT_OK,
        SolveStatus::RecourseInfeasible => EXIT_INFEASIBLE,
        SolveStatus::MaxOuter => EXIT_MAX_OUTER,
        SolveStatus::InnerStall => EXIT_INNER_STALL,
    }
}

fn parse_range(text: &str, flag: &str) -> Result<(f64, f64)> {
    let bad = || CliError::Usage(format!("--{flag} expects LO,HI, got '{text}'"));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn power_config(a: &PowerArgs) -> Result<PowerConfig> {
    let trunc = |text: &str, flag: &str| -> Result<TruncNormal> {
        let (lo, hi) = parse_range(text, flag)?;
        Ok(TruncNormal::new(1.0, a.sigma, lo, hi))
    };
    let cfg = PowerConfig {
        n_plants: a.plants,
        n_mix: a.mix,
        n_locations: a.locations,
        q_trunc: trunc(&a.q_range, "q-range")?,
        pi_trunc: trunc(&a.pi_range, "pi-range")?,
        d_trunc: trunc(&a.d_range, "d-range")?,
        budget_fraction: a.beta,
        normalization: match a.normalization {
            Normalization::AcrossScenarios => MixtureNormalization::AcrossScenarios,
            Normalization::PerScenario => MixtureNormalization::PerScenario,
        },
        seed: a.seed,
        ..PowerConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn solver_config(a: &SolverArgs) -> Result<SolverConfig> {
    let cfg = SolverConfig {
        gamma0: a.gamma0,
        gamma_decay: a.gamma_decay,
        eps0: a.eps0,
        eps_decay: a.eps_decay,
        max_outer: a.max_outer,
        max_inner: a.max_inner,
        tol_feas_abs: a.tol_feas_abs,
        tol_feas_rel: a.tol_feas_rel,
        tol_obj_rel: a.tol_obj_rel,
        qp_tol: a.qp_tol,
        threads: a.threads,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads an instance and the digest of its bytes.
fn load_instance(path: &Path) -> Result<(Instance, String)> {
    let bytes = std::fs::read(path)?;
    let inst = instances::deserialize_instance(&bytes)?;
    Ok((inst, digest(&bytes)))
}

pub fn gen(a: &GenArgs) -> Result<u8> {
    let inst = match a.kind {
        InstanceKind::Toy => toy_instance(),
        InstanceKind::Power => generate_power_instance(&power_config(&a.power)?, a.scenarios)?,
    };
    let bytes = instances::serialize_instance(&inst)?;
    instances::write_atomic(&a.out, &bytes)?;
    let size = instances::count_de_size(&inst.first_stage, &inst.scenarios);
    if a.kind == InstanceKind::Power {
        let formula = compute_de_size(&power_config(&a.power)?, a.scenarios as u64);
        debug_assert_eq!(formula, size);
    }
    println!("instance: {}", a.out.display());
    println!("scenarios: {}", inst.scenarios.len());
    println!("deterministic equivalent: {} rows, {} cols", size.rows, size.cols);
    println!("digest: {}", digest(&bytes));
    Ok(EXIT_OK)
}

fn finish_solve(
    command: &str,
    rep: &SolveReport,
    scenario_ids: &[usize],
    header: OutputHeader,
    record_time: bool,
    report_path: &Path,
    trace_path: &Path,
) -> Result<u8> {
    let mut rows = rep.trace.clone();
    if !record_time {
        for r in &mut rows {
            r.time_s = 0.0;
        }
    }
    write_text(trace_path, &trace_csv(&header, &rows))?;
    let file = SolutionFile::from_report(header, rep, scenario_ids, rows);
    write_json(report_path, &file)?;
    println!("{command}: status {:?} after {} outer iterations", rep.status, rep.trace.len());
    println!("objective: {}", rep.objective);
    println!("x_final: {:?}", rep.x_final.as_slice());
    if let Some(k) = &rep.kkt {
        println!("kkt_abs: {:e} kkt_rel: {:e}", k.kkt_abs, k.kkt_rel);
    }
    if let Some(s) = rep.failed_scenario {
        eprintln!("second-stage problem of scenario {s} is infeasible");
    }
    if rep.heuristic {
        println!("note: continuous scenario source, stopping test is heuristic");
    }
    Ok(exit_for(rep.status))
}

pub fn solve(a: &SolveArgs) -> Result<u8> {
    let cfg = solver_config(&a.solver)?;
    let (inst, dig) = load_instance(&a.instance)?;
    let header = OutputHeader::new(
        "solve",
        inst.header.seed,
        Some(dig),
        json!({ "instance": a.instance, "solver": cfg, "record_time": a.solver.record_time }),
    );
    let rep = solver::solve(&inst.first_stage, &inst.scenarios, &cfg)?;
    let ids: Vec<usize> = inst.scenarios.iter().map(|s| s.id).collect();
    finish_solve("solve", &rep, &ids, header, a.solver.record_time, &a.report, &a.trace)
}

pub fn solve_sampled(a: &SampledArgs) -> Result<u8> {
    let cfg = solver_config(&a.solver)?;
    let schedule = match (&a.schedule, a.eta) {
        (Some(text), _) => SampleSchedule::parse(text)?,
        (None, eta) => {
            let s = SampleSchedule::Linear(eta.unwrap_or(100));
            s.validate()?;
            s
        }
    };
    let (fs, mut pool, seed, dig) = match (&a.instance, a.continuous) {
        (Some(path), _) => {
            let (inst, dig) = load_instance(path)?;
            (inst.first_stage, ScenarioPool::finite(inst.scenarios), inst.header.seed, Some(dig))
        }
        (None, true) => {
            let pcfg = power_config(&a.power)?;
            let fs = power_first_stage(&pcfg)?;
            (fs, ScenarioPool::sampler(PowerSampler::new(pcfg)?), Some(a.power.seed), None)
        }
        (None, false) => return Err(CliError::Usage("give --instance or --continuous".into())),
    };
    let header = OutputHeader::new(
        "solve-sampled",
        seed,
        dig,
        json!({
            "instance": a.instance,
            "continuous": a.continuous,
            "generator": if a.continuous { serde_json::to_value(&a.power)? } else { serde_json::Value::Null },
            "schedule": format!("{schedule:?}"),
            "solver": cfg,
            "record_time": a.solver.record_time,
        }),
    );
    let rep = run_sampled(&fs, &mut pool, &schedule, &cfg)?;
    let ids: Vec<usize> = pool.reference().iter().map(|s| s.id).collect();
    finish_solve("solve-sampled", &rep, &ids, header, a.solver.record_time, &a.report, &a.trace)
}

pub fn verify(a: &VerifyArgs) -> Result<u8> {
    let (inst, dig) = load_instance(&a.instance)?;
    let sol: SolutionFile = serde_json::from_slice(&std::fs::read(&a.solution)?)?;
    let fs = &inst.first_stage;
    if sol.x_final.len() != fs.n() {
        return Err(CliError::Usage(format!(
            "solution has {} first-stage values, instance has {}",
            sol.x_final.len(),
            fs.n()
        )));
    }
    let x = DVector::from_vec(sol.x_final.clone());
    // Second-stage values come from the file when present; duals are
    // recomputed from the second-stage problem at x.
    let mut seconds = Vec::with_capacity(inst.scenarios.len());
    for (k, s) in inst.scenarios.iter().enumerate() {
        let stored = sol.second_stage.iter().find(|r| r.scenario == s.id).or_else(|| sol.second_stage.get(k));
        let solved = match evaluate_recourse(fs, s, &x, dpme_core::qp::DEFAULT_TOL) {
            Ok(Recourse::Finite { second, .. }) => Some(second),
            Ok(Recourse::OutsideDomain) | Err(ModelError::InfeasibleRecourse { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let second = match (stored, solved) {
            (Some(r), solved) if r.y.len() == s.n2() => SecondStage {
                y: DVector::from_vec(r.y.clone()),
                duals: solved.map_or_else(|| RecourseDuals::zeros(s), |v| v.duals),
            },
            (_, Some(solved)) => solved,
            (_, None) => SecondStage {
                y: s.y_lower.clone(),
                duals: RecourseDuals::zeros(s),
            },
        };
        seconds.push(second);
    }
    let kkt = diagnostics::kkt_residuals(fs, &inst.scenarios, &x, &seconds)?;
    let pass = kkt.kkt_abs <= a.tol_abs && kkt.kkt_rel <= a.tol_rel;
    let header = OutputHeader::new("verify", inst.header.seed, Some(dig), serde_json::to_value(a)?);
    let out = json!({ "header": header, "kkt": kkt, "pass": pass });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if !pass {
        eprintln!(
            "verification failed: kkt_abs {:e} (tol {:e}), kkt_rel {:e} (tol {:e}); worst row {}",
            kkt.kkt_abs,
            a.tol_abs,
            kkt.kkt_rel,
            a.tol_rel,
            kkt.worst_row.as_deref().unwrap_or("none (optimality residual)")
        );
        return Ok(EXIT_VERIFY_FAILED);
    }
    Ok(EXIT_OK)
}

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::Usage(format!("bad sample size '{t}'")))
        })
        .collect()
}

pub fn bench(a: &BenchArgs) -> Result<u8> {
    let sizes = parse_sizes(&a.sizes)?;
    if a.reps == 0 || !(a.gamma > 0.0) {
        return Err(CliError::Usage("reps and gamma must be positive".into()));
    }
    let workers = Workers::new(a.threads);
    let header = OutputHeader::new("bench", Some(a.seed), None, serde_json::to_value(a)?);
    let mut csv = header.comment_lines();
    csv += "S,threads,reps,cut_time_s,cut_time_per_scenario_s,master_time_s,verify_time_s\n";
    for &s in &sizes {
        let pcfg = PowerConfig {
            seed: a.seed,
            ..PowerConfig::default()
        };
        let inst = generate_power_instance(&pcfg, s)?;
        let fs = &inst.first_stage;
        let x = fs.reference_point()?;
        let weights = normalized_weights(&inst.scenarios);
        let (mut cut_t, mut master_t, mut verify_t) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for _ in 0..a.reps {
            let t = Instant::now();
            let cuts = workers.try_map(inst.scenarios.len(), |k| {
                build_cut(fs, &inst.scenarios[k], &x, a.gamma, dpme_core::qp::DEFAULT_TOL)
            })?;
            cut_t = cut_t.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            solve_master(fs, &cuts, &weights, dpme_core::qp::DEFAULT_TOL)?;
            master_t = master_t.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            let (_, seconds) = diagnostics::sample_average(fs, &inst.scenarios, &x, dpme_core::qp::DEFAULT_TOL, &workers)?;
            diagnostics::kkt_residuals(fs, &inst.scenarios, &x, &seconds)?;
            verify_t = verify_t.min(t.elapsed().as_secs_f64());
        }
        let line = format!(
            "{s},{},{},{cut_t:.6},{:.9},{master_t:.6},{verify_t:.6}\n",
            a.threads,
            a.reps,
            cut_t / s as f64
        );
        print!("{line}");
        csv += &line;
    }
    write_text(&a.out, &csv)?;
    Ok(EXIT_OK)
}

fn parse_axis(text: &str) -> Result<AxisSpec> {
    let bad = || CliError::Usage(format!("--axis expects COORD:LO:HI:POINTS, got '{text}'"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok(AxisSpec {
        coord: parts[0].parse().map_err(|_| bad())?,
        lo: parts[1].parse().map_err(|_| bad())?,
        hi: parts[2].parse().map_err(|_| bad())?,
        points: parts[3].parse().map_err(|_| bad())?,
    })
}

pub fn slice(a: &SliceArgs) -> Result<u8> {
    let (inst, dig) = load_instance(&a.instance)?;
    let fs = &inst.first_stage;
    let s = inst
        .scenarios
        .get(a.scenario)
        .ok_or_else(|| CliError::Usage(format!("instance has {} scenarios", inst.scenarios.len())))?;
    let axes = a.axes.iter().map(|t| parse_axis(t)).collect::<Result<Vec<_>>>()?;
    let base = match &a.base {
        Some(text) => {
            let v = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| CliError::Usage(format!("bad base point '{text}'")))?;
            DVector::from_vec(v)
        }
        None => fs.reference_point()?,
    };
    let rows = diagnostics::recourse_slice(fs, s, &axes, &base)?;
    let header = OutputHeader::new("slice", inst.header.seed, Some(dig), serde_json::to_value(a)?);
    let mut csv = header.comment_lines();
    let names: Vec<String> = axes.iter().map(|ax| format!("x{}", ax.coord)).collect();
    csv += &format!("{},value,status\n", names.join(","));
    for r in rows {
        let coords: Vec<String> = r.coords.iter().map(|c| format!("{c:.12e}")).collect();
        let (value, status) = match r.status {
            SliceStatus::Finite => (format!("{:.12e}", r.value), "finite"),
            SliceStatus::OutsideDomain => ("inf".to_string(), "outside_domain"),
            SliceStatus::Infeasible => ("inf".to_string(), "infeasible"),
        };
        csv += &format!("{},{value},{status}\n", coords.join(","));
    }
    write_text(&a.out, &csv)?;
    println!("slice: {} points written to {}", csv.lines().filter(|l| !l.starts_with('#')).count() - 1, a.out.display());
    Ok(EXIT_OK)
}
