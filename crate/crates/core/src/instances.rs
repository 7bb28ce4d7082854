//! Power-system capacity planning benchmark: plants with capacities, a
//! mixture over scenario distributions chosen in the first stage, and a
//! transportation-style second stage. Also the instance file format.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{accept, FirstStage, ModelError, Scenario};
use crate::qp::{self, QpProblem, QpStatus};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stream offset of the continuous sampler, kept clear of instance streams.
const SAMPLER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("budget fraction {beta} leaves no room above the minimum first-stage cost")]
    InfeasibleBudget { beta: f64 },
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed instance file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("instance data: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InstanceError>;

/// Normal distribution N(mean, sigma²) truncated to [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncNormal {
    pub fn new(mean: f64, sigma: f64, lo: f64, hi: f64) -> Self {
        TruncNormal { mean, sigma, lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mean.is_finite() {
            return Err(InstanceError::InvalidConfig(format!("bad normal parameters {self:?}")));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(InstanceError::InvalidConfig(format!("empty truncation interval {self:?}")));
        }
        Ok(())
    }

    /// Exact sampling: plain rejection from the normal when the interval
    /// covers a reasonable share of the mass, exponential-proposal rejection
    /// when it sits in a far tail.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let a = (self.lo - self.mean) / self.sigma;
        let b = (self.hi - self.mean) / self.sigma;
        let z = if a >= 1.0 {
            tail_sample(a, b, rng)
        } else if b <= -1.0 {
            -tail_sample(-b, -a, rng)
        } else {
            loop {
                let z: f64 = StandardNormal.sample(rng);
                if (a..=b).contains(&z) {
                    break z;
                }
            }
        };
        (self.mean + self.sigma * z).clamp(self.lo, self.hi)
    }
}

/// Standard normal restricted to [a, b] with a > 0.
fn tail_sample<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(alpha).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z > b {
            continue;
        }
        let u: f64 = rng.random();
        if u <= (-(z - alpha) * (z - alpha) / 2.0).exp() {
            return z;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureNormalization {
    /// Σ_s p_sg = 1 for each mixture component g.
    AcrossScenarios,
    /// Σ_g p_sg = 1 for each scenario s.
    PerScenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub n_plants: usize,
    pub n_mix: usize,
    pub n_locations: usize,
    pub capacity_box: (f64, f64),
    pub weight_box: (f64, f64),
    pub y_box: (f64, f64),
    pub cost_range: (f64, f64),
    pub q_trunc: TruncNormal,
    pub pi_trunc: TruncNormal,
    pub d_trunc: TruncNormal,
    pub budget_fraction: f64,
    pub normalization: MixtureNormalization,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            n_plants: 5,
            n_mix: 5,
            n_locations: 8,
            capacity_box: (8.0, 15.0),
            weight_box: (0.0, 1.0),
            y_box: (0.0, 5.0),
            cost_range: (0.0, 5.0),
            q_trunc: TruncNormal::new(1.0, 5.0, 2.0, 4.0),
            pi_trunc: TruncNormal::new(1.0, 5.0, 3.0, 5.0),
            d_trunc: TruncNormal::new(1.0, 5.0, 2.0, 5.0),
            budget_fraction: 0.75,
            normalization: MixtureNormalization::AcrossScenarios,
            seed: 0,
        }
    }
}

impl PowerConfig {
    /// Sets σ of all three truncated normals.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.q_trunc.sigma = sigma;
        self.pi_trunc.sigma = sigma;
        self.d_trunc.sigma = sigma;
        self
    }

    pub fn n1(&self) -> usize {
        self.n_plants + self.n_mix
    }

    pub fn n2(&self) -> usize {
        self.n_plants * self.n_locations
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_plants == 0 || self.n_mix == 0 || self.n_locations == 0 {
            return Err(InstanceError::InvalidConfig("dimensions must be positive".into()));
        }
        for (name, (lo, hi)) in [
            ("capacity_box", self.capacity_box),
            ("weight_box", self.weight_box),
            ("y_box", self.y_box),
            ("cost_range", self.cost_range),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(InstanceError::InvalidConfig(format!("{name} must be a nonempty finite interval")));
            }
        }
        self.q_trunc.validate()?;
        self.pi_trunc.validate()?;
        self.d_trunc.validate()?;
        if !(self.budget_fraction > 0.0) {
            return Err(InstanceError::InfeasibleBudget {
                beta: self.budget_fraction,
            });
        }
        if self.budget_fraction > 1.0 {
            return Err(InstanceError::InvalidConfig(format!(
                "budget fraction must lie in (0, 1], got {}",
                self.budget_fraction
            )));
        }
        Ok(())
    }

    fn y_index(&self, plant: usize, location: usize) -> usize {
        plant * self.n_locations + location
    }
}

/// Raw random data of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerScenarioData {
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
    pub d: Vec<f64>,
    /// Mixture probabilities p_sg after normalization.
    pub p: Vec<f64>,
}

fn draw_raw(cfg: &PowerConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let q = (0..cfg.n_plants).map(|_| cfg.q_trunc.sample(rng)).collect();
    let pi = (0..cfg.n_locations).map(|_| cfg.pi_trunc.sample(rng)).collect();
    let d = (0..cfg.n_locations).map(|_| cfg.d_trunc.sample(rng)).collect();
    let u = (0..cfg.n_mix).map(|_| rng.random::<f64>()).collect();
    (q, pi, d, u)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the random data of `n_scenarios` scenarios and normalizes the
/// mixture probabilities.
pub fn draw_scenario_data(cfg: &PowerConfig, n_scenarios: usize) -> Vec<PowerScenarioData> {
    let raw: Vec<_> = (0..n_scenarios)
        .map(|k| draw_raw(cfg, &mut stream_rng(cfg.seed, 1 + k as u64)))
        .collect();
    let mut col_sum = vec![0.0; cfg.n_mix];
    for (_, _, _, u) in &raw {
        for (g, v) in u.iter().enumerate() {
            col_sum[g] += v;
        }
    }
    raw.into_iter()
        .map(|(q, pi, d, u)| {
            let p = match cfg.normalization {
                MixtureNormalization::AcrossScenarios => u.iter().zip(&col_sum).map(|(v, s)| v / s).collect(),
                MixtureNormalization::PerScenario => {
                    let total: f64 = u.iter().sum();
                    u.iter().map(|v| v / total).collect()
                }
            };
            PowerScenarioData { q, pi, d, p }
        })
        .collect()
}

/// Builds the scenario block; `mixture_coef[g]` multiplies x_g in the
/// bilinear objective.
pub fn power_scenario(cfg: &PowerConfig, id: usize, data: &PowerScenarioData, mixture_coef: &[f64]) -> Scenario {
    let (ni, nj) = (cfg.n_plants, cfg.n_locations);
    let n1 = cfg.n1();
    let n2 = cfg.n2();
    let mut coupling = DMatrix::zeros(n1, n2);
    for (g, &w) in mixture_coef.iter().enumerate() {
        for i in 0..ni {
            for j in 0..nj {
                coupling[(ni + g, cfg.y_index(i, j))] = w * (data.q[i] - data.pi[j]);
            }
        }
    }
    let mut joint_x = DMatrix::zeros(ni, n1);
    let mut joint_y = DMatrix::zeros(ni, n2);
    for i in 0..ni {
        joint_x[(i, i)] = -1.0;
        for j in 0..nj {
            joint_y[(i, cfg.y_index(i, j))] = 1.0;
        }
    }
    let mut eq_y = DMatrix::zeros(nj, n2);
    for j in 0..nj {
        for i in 0..ni {
            eq_y[(j, cfg.y_index(i, j))] = 1.0;
        }
    }
    Scenario {
        id,
        x_cost: DVector::zeros(n1),
        y_cost: DVector::zeros(n2),
        coupling,
        joint_x,
        joint_y,
        joint_rhs: DVector::zeros(ni),
        eq_y,
        eq_rhs: DVector::from_column_slice(&data.d),
        y_lower: DVector::from_element(n2, cfg.y_box.0),
        y_upper: DVector::from_element(n2, cfg.y_box.1),
        weight: 1.0,
    }
}

fn lp_over(fs: &FirstStage, cost: DVector<f64>) -> Result<f64> {
    let n = fs.n();
    let p = QpProblem::new(DMatrix::zeros(n, n), cost.clone())
        .with_eq(fs.a_eq.clone(), fs.b_eq.clone())
        .with_ineq(fs.a_ineq.clone(), fs.b_ineq.clone())
        .with_bounds(fs.lower.clone(), fs.upper.clone());
    let sol = qp::solve_qp(&p, qp::DEFAULT_TOL, qp::DEFAULT_MAX_ITER).map_err(ModelError::from)?;
    if sol.status == QpStatus::Infeasible {
        return Err(ModelError::EmptyFirstStage.into());
    }
    let sol = accept(sol, "budget bound LP")?;
    Ok(cost.dot(&sol.primal))
}

/// Minimum and maximum of the first-stage cost over the box and simplex.
pub fn cost_bounds(cfg: &PowerConfig, cost: &DVector<f64>) -> Result<(f64, f64)> {
    let fs = power_first_stage_without_budget(cfg, cost.clone());
    let lo = lp_over(&fs, cost.clone())?;
    let hi = -lp_over(&fs, -cost)?;
    Ok((lo, hi))
}

fn power_first_stage_without_budget(cfg: &PowerConfig, cost: DVector<f64>) -> FirstStage {
    let (ni, ng) = (cfg.n_plants, cfg.n_mix);
    let n1 = cfg.n1();
    let mut lower = DVector::zeros(n1);
    let mut upper = DVector::zeros(n1);
    for i in 0..ni {
        lower[i] = cfg.capacity_box.0;
        upper[i] = cfg.capacity_box.1;
    }
    for g in 0..ng {
        lower[ni + g] = cfg.weight_box.0;
        upper[ni + g] = cfg.weight_box.1;
    }
    let mut simplex = DMatrix::zeros(1, n1);
    for g in 0..ng {
        simplex[(0, ni + g)] = 1.0;
    }
    FirstStage::new(cost, lower, upper).with_eq(simplex, DVector::from_element(1, 1.0))
}

/// First stage: unit costs from the seed's stream 0, budget row and
/// simplex row over the mixture weights.
pub fn power_first_stage(cfg: &PowerConfig) -> Result<FirstStage> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let (lo, hi) = cfg.cost_range;
    let cost = DVector::from_iterator(cfg.n1(), (0..cfg.n1()).map(|_| rng.random_range(lo..=hi)));
    let (cost_min, cost_max) = cost_bounds(cfg, &cost)?;
    let budget = cost_min + cfg.budget_fraction * (cost_max - cost_min);
    let row = DMatrix::from_row_slice(1, cfg.n1(), cost.as_slice());
    let fs = power_first_stage_without_budget(cfg, cost).with_ineq(row, DVector::from_element(1, budget));
    Ok(fs)
}

/// A generated instance with its provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub header: InstanceHeader,
    pub first_stage: FirstStage,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceHeader {
    pub tool_version: String,
    pub kind: String,
    pub seed: Option<u64>,
    pub n1: usize,
    pub n2: usize,
    pub n_scenarios: usize,
    /// Generator configuration, verbatim.
    pub config: serde_json::Value,
}

/// Generates the benchmark with S scenarios.
pub fn generate_power_instance(cfg: &PowerConfig, n_scenarios: usize) -> Result<Instance> {
    if n_scenarios == 0 {
        return Err(InstanceError::InvalidConfig("at least one scenario is required".into()));
    }
    let fs = power_first_stage(cfg)?;
    let data = draw_scenario_data(cfg, n_scenarios);
    let scale = n_scenarios as f64;
    let scenarios = data
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let coef: Vec<f64> = d.p.iter().map(|p| scale * p).collect();
            power_scenario(cfg, k, d, &coef)
        })
        .collect();
    Ok(Instance {
        header: InstanceHeader {
            tool_version: TOOL_VERSION.into(),
            kind: "power".into(),
            seed: Some(cfg.seed),
            n1: cfg.n1(),
            n2: cfg.n2(),
            n_scenarios,
            config: serde_json::to_value(cfg)?,
        },
        first_stage: fs,
        scenarios,
    })
}

/// The one-dimensional toy instance, wrapped with a header.
pub fn toy_instance() -> Instance {
    let (fs, scenarios) = crate::model::toy_problem();
    Instance {
        header: InstanceHeader {
            tool_version: TOOL_VERSION.into(),
            kind: "toy".into(),
            seed: None,
            n1: 1,
            n2: 1,
            n_scenarios: 1,
            config: serde_json::Value::Null,
        },
        first_stage: fs,
        scenarios,
    }
}

/// Size of the deterministic equivalent, counting each finite bound as a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeSize {
    pub rows: u64,
    pub cols: u64,
}

pub fn compute_de_size(cfg: &PowerConfig, n_scenarios: u64) -> DeSize {
    let (ni, ng, nj) = (cfg.n_plants as u64, cfg.n_mix as u64, cfg.n_locations as u64);
    let n1 = ni + ng;
    let n2 = ni * nj;
    let first_rows = 2 * n1 + 2;
    let scenario_rows = 2 * n2 + ni + nj;
    DeSize {
        rows: first_rows + n_scenarios * scenario_rows,
        cols: n1 + n_scenarios * n2,
    }
}

/// Row and column count by enumerating the constraints of an instance.
pub fn count_de_size(fs: &FirstStage, scenarios: &[Scenario]) -> DeSize {
    DeSize {
        rows: (fs.row_count() + scenarios.iter().map(|s| s.row_count()).sum::<usize>()) as u64,
        cols: (fs.n() + scenarios.iter().map(|s| s.n2()).sum::<usize>()) as u64,
    }
}

/// Continuous scenario source for incremental sampling. Draw k uses its own
/// stream, so enlarging a pool never changes earlier draws. The mixture
/// coefficient is the likelihood ratio 2u with u uniform, which has mean one
/// like S·p_sg under across-scenario normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSampler {
    pub cfg: PowerConfig,
}

impl PowerSampler {
    pub fn new(cfg: PowerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PowerSampler { cfg })
    }

    pub fn draw(&self, k: usize) -> Scenario {
        let mut rng = stream_rng(self.cfg.seed, SAMPLER_STREAM_BASE + k as u64);
        let (q, pi, d, u) = draw_raw(&self.cfg, &mut rng);
        let coef: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let data = PowerScenarioData { q, pi, d, p: u };
        power_scenario(&self.cfg, k, &data, &coef)
    }
}

// ----- file format -----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    entries.push((i, j, m[(i, j)]));
                }
            }
        }
        SparseMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            entries,
        }
    }

    fn to_dense(&self, what: &str) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(i, j, v) in &self.entries {
            if i >= self.rows || j >= self.cols {
                return Err(InstanceError::Schema(format!("{what}: entry ({i}, {j}) outside {}x{}", self.rows, self.cols)));
            }
            m[(i, j)] = v;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FirstStageDoc {
    cost: Vec<f64>,
    hessian: SparseMatrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
    margin: Vec<f64>,
    a_ineq: SparseMatrix,
    b_ineq: Vec<f64>,
    a_eq: SparseMatrix,
    b_eq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    id: usize,
    weight: f64,
    x_cost: Vec<f64>,
    y_cost: Vec<f64>,
    coupling: SparseMatrix,
    joint_x: SparseMatrix,
    joint_y: SparseMatrix,
    joint_rhs: Vec<f64>,
    eq_y: SparseMatrix,
    eq_rhs: Vec<f64>,
    y_lower: Vec<f64>,
    y_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    schema_version: u32,
    header: InstanceHeader,
    first_stage: FirstStageDoc,
    scenarios: Vec<ScenarioDoc>,
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl ScenarioDoc {
    fn from_scenario(s: &Scenario) -> Self {
        ScenarioDoc {
            id: s.id,
            weight: s.weight,
            x_cost: vec_of(&s.x_cost),
            y_cost: vec_of(&s.y_cost),
            coupling: SparseMatrix::from_dense(&s.coupling),
            joint_x: SparseMatrix::from_dense(&s.joint_x),
            joint_y: SparseMatrix::from_dense(&s.joint_y),
            joint_rhs: vec_of(&s.joint_rhs),
            eq_y: SparseMatrix::from_dense(&s.eq_y),
            eq_rhs: vec_of(&s.eq_rhs),
            y_lower: vec_of(&s.y_lower),
            y_upper: vec_of(&s.y_upper),
        }
    }

    fn into_scenario(self) -> Result<Scenario> {
        let what = format!("scenario {}", self.id);
        Ok(Scenario {
            id: self.id,
            x_cost: DVector::from_vec(self.x_cost),
            y_cost: DVector::from_vec(self.y_cost),
            coupling: self.coupling.to_dense(&format!("{what}.coupling"))?,
            joint_x: self.joint_x.to_dense(&format!("{what}.joint_x"))?,
            joint_y: self.joint_y.to_dense(&format!("{what}.joint_y"))?,
            joint_rhs: DVector::from_vec(self.joint_rhs),
            eq_y: self.eq_y.to_dense(&format!("{what}.eq_y"))?,
            eq_rhs: DVector::from_vec(self.eq_rhs),
            y_lower: DVector::from_vec(self.y_lower),
            y_upper: DVector::from_vec(self.y_upper),
            weight: self.weight,
        })
    }
}

/// Writes every float with 17 significant digits in exponent notation.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if !value.is_finite() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("non-finite number {value} cannot be stored"),
            ));
        }
        write!(writer, "{value:.16e}")
    }
}

fn to_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloats);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

pub fn serialize_instance(inst: &Instance) -> Result<Vec<u8>> {
    let fs = &inst.first_stage;
    let doc = InstanceDoc {
        schema_version: SCHEMA_VERSION,
        header: inst.header.clone(),
        first_stage: FirstStageDoc {
            cost: vec_of(&fs.cost),
            hessian: SparseMatrix::from_dense(&fs.hessian),
            lower: vec_of(&fs.lower),
            upper: vec_of(&fs.upper),
            margin: vec_of(&fs.margin),
            a_ineq: SparseMatrix::from_dense(&fs.a_ineq),
            b_ineq: vec_of(&fs.b_ineq),
            a_eq: SparseMatrix::from_dense(&fs.a_eq),
            b_eq: vec_of(&fs.b_eq),
        },
        scenarios: inst.scenarios.iter().map(ScenarioDoc::from_scenario).collect(),
    };
    to_bytes(&doc)
}

pub fn deserialize_instance(bytes: &[u8]) -> Result<Instance> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: u32,
    }
    let version: Version = serde_json::from_slice(bytes)?;
    if version.schema_version != SCHEMA_VERSION {
        return Err(InstanceError::SchemaVersion {
            found: version.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let doc: InstanceDoc = serde_json::from_slice(bytes)?;
    let f = doc.first_stage;
    let first_stage = FirstStage {
        cost: DVector::from_vec(f.cost),
        hessian: f.hessian.to_dense("first_stage.hessian")?,
        lower: DVector::from_vec(f.lower),
        upper: DVector::from_vec(f.upper),
        a_ineq: f.a_ineq.to_dense("first_stage.a_ineq")?,
        b_ineq: DVector::from_vec(f.b_ineq),
        a_eq: f.a_eq.to_dense("first_stage.a_eq")?,
        b_eq: DVector::from_vec(f.b_eq),
        margin: DVector::from_vec(f.margin),
    };
    first_stage.validate()?;
    let scenarios = doc
        .scenarios
        .into_iter()
        .map(ScenarioDoc::into_scenario)
        .collect::<Result<Vec<_>>>()?;
    for s in &scenarios {
        s.validate(first_stage.n())?;
    }
    Ok(Instance {
        header: doc.header,
        first_stage,
        scenarios,
    })
}

pub fn write_instance(inst: &Instance, path: &Path) -> Result<()> {
    let bytes = serialize_instance(inst)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_instance(path: &Path) -> Result<Instance> {
    deserialize_instance(&std::fs::read(path)?)
}

/// Writes to `<path>.partial`, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = std::path::PathBuf::from(partial);
    std::fs::write(&partial, bytes)?;
    std::fs::rename(&partial, path)
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a scenario list in the file encoding.
pub fn scenarios_digest(scenarios: &[Scenario]) -> Result<String> {
    let docs: Vec<ScenarioDoc> = scenarios.iter().map(ScenarioDoc::from_scenario).collect();
    Ok(digest(&to_bytes(&docs)?))
}
