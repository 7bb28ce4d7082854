//! Output headers, the solution report format and CSV helpers.

use std::path::Path;

use dpme_core::diagnostics::KktReport;
use dpme_core::instances::{self, TOOL_VERSION};
use dpme_core::solver::{SolveReport, SolveStatus, TraceRow};
use serde::{Deserialize, Serialize};

/// Provenance written at the top of every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputHeader {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub instance_digest: Option<String>,
    pub config: serde_json::Value,
}

impl OutputHeader {
    pub fn new(command: &str, seed: Option<u64>, instance_digest: Option<String>, config: serde_json::Value) -> Self {
        OutputHeader {
            tool: "dpme".into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            seed,
            instance_digest,
            config,
        }
    }

    /// `# key: value` comment lines for CSV outputs.
    pub fn comment_lines(&self) -> String {
        let mut s = format!("# tool: {} {}\n# command: {}\n", self.tool, self.tool_version, self.command);
        s += &format!("# seed: {}\n", self.seed.map_or("none".to_string(), |v| v.to_string()));
        s += &format!("# instance_digest: {}\n", self.instance_digest.as_deref().unwrap_or("none"));
        s += &format!("# config: {}\n", self.config);
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondStageRecord {
    pub scenario: usize,
    pub y: Vec<f64>,
}

/// The solution report; also the input of `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub header: OutputHeader,
    pub status: SolveStatus,
    pub x_final: Vec<f64>,
    pub objective: Option<f64>,
    pub kkt: Option<KktReport>,
    pub criticality: Option<f64>,
    pub criticality_distance: Option<f64>,
    pub min_descent_margin: Option<f64>,
    pub failed_scenario: Option<usize>,
    /// Continuous-distribution runs have no rigorous stopping test.
    pub heuristic: bool,
    #[serde(default)]
    pub second_stage: Vec<SecondStageRecord>,
    #[serde(default)]
    pub trace: Vec<TraceRow>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl SolutionFile {
    pub fn from_report(header: OutputHeader, rep: &SolveReport, scenario_ids: &[usize], trace: Vec<TraceRow>) -> Self {
        SolutionFile {
            header,
            status: rep.status,
            x_final: rep.x_final.iter().copied().collect(),
            objective: finite(rep.objective),
            kkt: rep.kkt.clone(),
            criticality: finite(rep.criticality),
            criticality_distance: finite(rep.criticality_distance),
            min_descent_margin: finite(rep.min_descent_margin),
            failed_scenario: rep.failed_scenario,
            heuristic: rep.heuristic,
            second_stage: rep
                .second_stage
                .iter()
                .zip(scenario_ids)
                .map(|(s, &id)| SecondStageRecord {
                    scenario: id,
                    y: s.y.iter().copied().collect(),
                })
                .collect(),
            trace,
        }
    }
}

pub fn trace_csv(header: &OutputHeader, rows: &[TraceRow]) -> String {
    let mut s = header.comment_lines();
    s += TraceRow::CSV_HEADER;
    s.push('\n');
    for r in rows {
        s += &r.csv_line();
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    instances::write_atomic(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), crate::commands::CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)?;
    Ok(())
}
