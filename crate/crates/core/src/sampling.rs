//! Incremental sampling: the same inner loop, run on a scenario set that
//! grows with the outer iteration count.

use serde::{Deserialize, Serialize};

use crate::instances::PowerSampler;
use crate::model::{FirstStage, Scenario};
use crate::solver::{self, ActiveSet, SolveReport, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSchedule {
    /// S_ν = η·ν.
    Linear(usize),
    /// Explicit sizes for ν = 1, 2, …; the last entry repeats.
    Custom(Vec<usize>),
}

impl SampleSchedule {
    pub fn validate(&self) -> Result<(), SolverError> {
        match self {
            SampleSchedule::Linear(0) => Err(SolverError::InvalidConfig("eta must be positive".into())),
            SampleSchedule::Linear(_) => Ok(()),
            SampleSchedule::Custom(sizes) => {
                if sizes.is_empty() || sizes[0] == 0 {
                    return Err(SolverError::InvalidConfig("custom schedule needs positive sizes".into()));
                }
                if sizes.windows(2).any(|w| w[1] < w[0]) {
                    return Err(SolverError::InvalidConfig("sample sizes must not decrease".into()));
                }
                Ok(())
            }
        }
    }

    /// S_ν for the one-based outer index ν.
    pub fn size_at(&self, nu: usize) -> usize {
        let nu = nu.max(1);
        match self {
            SampleSchedule::Linear(eta) => eta * nu,
            SampleSchedule::Custom(sizes) => sizes[(nu - 1).min(sizes.len() - 1)],
        }
    }

    /// Parses `linear:ETA`, `constant:S` or `custom:S1,S2,...`.
    pub fn parse(text: &str) -> Result<Self, SolverError> {
        let bad = || SolverError::InvalidConfig(format!("cannot parse schedule '{text}'"));
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let schedule = match kind {
            "linear" => SampleSchedule::Linear(num(rest)?),
            "constant" => SampleSchedule::Custom(vec![num(rest)?]),
            "custom" => SampleSchedule::Custom(rest.split(',').map(num).collect::<Result<_, _>>()?),
            _ => return Err(bad()),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone)]
enum Source {
    Finite,
    Sampler(PowerSampler),
}

/// Append-only scenario pool. A finite pool hands out its stored scenarios
/// in order; a sampler pool draws new ones on demand.
#[derive(Debug, Clone)]
pub struct ScenarioPool {
    source: Source,
    items: Vec<Scenario>,
    drawn: usize,
}

impl ScenarioPool {
    pub fn finite(scenarios: Vec<Scenario>) -> Self {
        ScenarioPool {
            source: Source::Finite,
            items: scenarios,
            drawn: 0,
        }
    }

    pub fn sampler(sampler: PowerSampler) -> Self {
        ScenarioPool {
            source: Source::Sampler(sampler),
            items: Vec::new(),
            drawn: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.source, Source::Finite)
    }

    /// Total size of a finite pool.
    pub fn capacity(&self) -> Option<usize> {
        self.is_finite().then_some(self.items.len())
    }

    pub fn drawn(&self) -> &[Scenario] {
        &self.items[..self.drawn]
    }

    /// Scenarios used for objective and KKT evaluation: the whole pool when
    /// finite, every draw so far otherwise.
    pub fn reference(&self) -> &[Scenario] {
        &self.items
    }

    /// Ensures at least `target` scenarios are drawn and returns the drawn
    /// prefix. A finite pool stops at its size.
    pub fn extend_pool(&mut self, target: usize) -> &[Scenario] {
        match &self.source {
            Source::Finite => self.drawn = self.drawn.max(target.min(self.items.len())),
            Source::Sampler(sampler) => {
                while self.items.len() < target {
                    let k = self.items.len();
                    self.items.push(sampler.draw(k));
                }
                self.drawn = self.drawn.max(target);
            }
        }
        self.drawn()
    }
}

struct SampledSet<'a> {
    pool: &'a mut ScenarioPool,
    schedule: &'a SampleSchedule,
}

impl ActiveSet for SampledSet<'_> {
    fn prepare(&mut self, outer: usize) -> Result<usize, SolverError> {
        let target = self.schedule.size_at(outer + 1);
        let target = self.pool.capacity().map_or(target, |c| target.min(c));
        Ok(self.pool.extend_pool(target).len().min(target))
    }

    fn scenarios(&self) -> &[Scenario] {
        &self.pool.items
    }

    fn reference_len(&self) -> usize {
        self.pool.items.len()
    }

    fn heuristic(&self) -> bool {
        !self.pool.is_finite()
    }
}

/// Runs the outer loop with S_ν scenarios at outer iteration ν. Objective
/// and KKT checks use the full pool when it is finite, and every scenario
/// drawn so far otherwise.
pub fn solve_sampled(
    fs: &FirstStage,
    pool: &mut ScenarioPool,
    schedule: &SampleSchedule,
    cfg: &SolverConfig,
) -> Result<SolveReport, SolverError> {
    schedule.validate()?;
    if pool.is_finite() && pool.items.is_empty() {
        return Err(SolverError::InvalidConfig("empty scenario pool".into()));
    }
    solver::solve_with(fs, &mut SampledSet { pool, schedule }, cfg)
}
