//! `dpme`: generate benchmark instances, run the decomposition solver and its
//! sampling variant, verify solutions, benchmark scaling and export recourse
//! slices.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "dpme", version, about = "Partial-Moreau-envelope decomposition for two-stage stochastic programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a benchmark instance file.
    Gen(GenArgs),
    /// Solve a fixed-scenario instance.
    Solve(SolveArgs),
    /// Solve with an incrementally growing scenario sample.
    SolveSampled(SampledArgs),
    /// Check the KKT residuals of a solution file.
    Verify(VerifyArgs),
    /// Time cut building, master solves and verification across sample sizes.
    Bench(BenchArgs),
    /// Tabulate the recourse function of one scenario along one or two axes.
    Slice(SliceArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum InstanceKind {
    Power,
    Toy,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Normalization {
    AcrossScenarios,
    PerScenario,
}

/// Flags of the power-planning generator.
#[derive(Args, Debug, Clone, Serialize)]
struct PowerArgs {
    #[arg(long, default_value_t = 5)]
    plants: usize,
    #[arg(long, default_value_t = 5)]
    mix: usize,
    #[arg(long, default_value_t = 8)]
    locations: usize,
    /// Standard deviation of the truncated normals.
    #[arg(long, default_value_t = 5.0)]
    sigma: f64,
    /// Budget position between the minimum and maximum first-stage cost.
    #[arg(long, default_value_t = 0.75)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Truncation interval of unit production costs, as LO,HI.
    #[arg(long, default_value = "2,4")]
    q_range: String,
    /// Truncation interval of prices, as LO,HI.
    #[arg(long, default_value = "3,5")]
    pi_range: String,
    /// Truncation interval of demands, as LO,HI.
    #[arg(long, default_value = "2,5")]
    d_range: String,
    #[arg(long, value_enum, default_value_t = Normalization::AcrossScenarios)]
    normalization: Normalization,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = InstanceKind::Power)]
    kind: InstanceKind,
    #[arg(long, default_value_t = 100)]
    scenarios: usize,
    #[command(flatten)]
    power: PowerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SolverArgs {
    #[arg(long, default_value_t = 1.0)]
    gamma0: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    eps0: f64,
    #[arg(long, default_value_t = 0.5)]
    eps_decay: f64,
    #[arg(long, default_value_t = 100)]
    max_outer: usize,
    #[arg(long, default_value_t = 10_000)]
    max_inner: usize,
    #[arg(long, default_value_t = 1e-2)]
    tol_feas_abs: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol_feas_rel: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol_obj_rel: f64,
    #[arg(long, default_value_t = 1e-9)]
    qp_tol: f64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "DPME_THREADS", default_value_t = 1)]
    threads: usize,
    /// Write wall-clock seconds in the time_s column instead of zeros.
    #[arg(long)]
    record_time: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Solution report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Per-outer-iteration trace (CSV).
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SampledArgs {
    /// Finite scenario pool; without it scenarios are drawn from the generator.
    #[arg(long, conflicts_with = "continuous")]
    instance: Option<PathBuf>,
    /// Draw scenarios from the continuous power-planning distribution.
    #[arg(long)]
    continuous: bool,
    #[command(flatten)]
    power: PowerArgs,
    /// Linear growth rate: S_nu = eta * nu.
    #[arg(long, conflicts_with = "schedule")]
    eta: Option<usize>,
    /// Schedule as linear:ETA, constant:S or custom:S1,S2,...
    #[arg(long)]
    schedule: Option<String>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Solution report written by solve or solve-sampled.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    tol_abs: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol_rel: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BenchArgs {
    /// Comma-separated sample sizes.
    #[arg(long, default_value = "100,200,400")]
    sizes: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, env = "DPME_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SliceArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Index of the scenario in the instance file.
    #[arg(long, default_value_t = 0)]
    scenario: usize,
    /// Axis as COORD:LO:HI:POINTS; give one or two.
    #[arg(long = "axis", required = true)]
    axes: Vec<String>,
    /// Base point as comma-separated values; defaults to the reference point of X.
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Solve(a) => commands::solve(a),
        Command::SolveSampled(a) => commands::solve_sampled(a),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
        Command::Slice(a) => commands::slice(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
