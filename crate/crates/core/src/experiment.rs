//! Configuration-driven experiment grids, result rows, and report
//! generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fedsim::{one_pass_baseline, BaselineConfig, Federation, FederationConfig};
use crate::localize::{
    build_schedule_smooth, build_schedule_subgrad, reference_comm_lower_bound, run_conv_smoothed, run_nesterov_smoothed,
    run_smooth, run_subgradient, BatchPolicy, DriverOptions, PhaseSchedule, ScheduleInputs,
};
use crate::model::{ParamVector, RunLedger};
use crate::privacy::PrivacyBudget;
use crate::problems::{
    gen_binary_heterolabel, gen_heterogeneous_quadratic, load_csv_problem, FederatedProblem, HeteroLabelSpec, LossKind,
    QuadraticSpec,
};
use crate::smoothing::{choose_beta_nesterov, choose_s_conv, ConvSmoother};

/// Environment variable that, when set, prefixes relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDLOC_OUTPUT_ROOT";

pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Alg1Smooth,
    Alg4Subgrad,
    Alg5Conv,
    Alg1Nesterov,
    OnePassBaseline,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Alg1Smooth => "alg1_smooth",
            Algorithm::Alg4Subgrad => "alg4_subgrad",
            Algorithm::Alg5Conv => "alg5_conv",
            Algorithm::Alg1Nesterov => "alg1_nesterov",
            Algorithm::OnePassBaseline => "one_pass_baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    Heterolabel,
    Csv,
}

/// A scalar or a list in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Experiment description read from a TOML file. Unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemKind,
    pub algorithms: OneOrMany<Algorithm>,
    pub n_silos: OneOrMany<usize>,
    /// Silos available per round; defaults to all.
    #[serde(default)]
    pub available: Option<OneOrMany<usize>>,
    /// Samples per silo.
    pub n: OneOrMany<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    /// `inf` means no privacy.
    pub epsilons: OneOrMany<f64>,
    /// Defaults to `1/n²`.
    #[serde(default)]
    pub delta: Option<f64>,
    pub seeds: OneOrMany<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,

    #[serde(default)]
    pub batch_policy: BatchPolicy,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub inner_repeats: usize,
    /// Per-phase round counts replacing the formula values.
    #[serde(default)]
    pub rounds_override: Option<Vec<u64>>,
    #[serde(default)]
    pub baseline_rounds: Option<u64>,
    #[serde(default)]
    pub baseline_batch: Option<usize>,
    #[serde(default)]
    pub transcript: bool,

    // quadratic generator
    #[serde(default)]
    pub centers_spread: Option<f64>,
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default)]
    pub sigma_x: Option<f64>,
    #[serde(default)]
    pub domain_radius: Option<f64>,
    /// Reassign pooled samples so every silo sees the same mixture.
    #[serde(default)]
    pub iid_partition: bool,

    // labelled generator
    #[serde(default)]
    pub test_per_silo: Option<usize>,

    // CSV ingestion
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    #[serde(default)]
    pub test_csv: Option<PathBuf>,
    #[serde(default)]
    pub loss: Option<LossKind>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}
fn default_multipliers() -> Vec<f64> {
    DEFAULT_MULTIPLIERS.to_vec()
}
fn default_repeats() -> usize {
    3
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &'static str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("`{name}` must not be empty")))
            } else {
                Ok(())
            }
        };
        nonempty("algorithms", self.algorithms.to_vec().len())?;
        nonempty("n_silos", self.n_silos.to_vec().len())?;
        nonempty("n", self.n.to_vec().len())?;
        nonempty("epsilons", self.epsilons.to_vec().len())?;
        nonempty("seeds", self.seeds.to_vec().len())?;
        nonempty("multipliers", self.multipliers.len())?;
        if self.inner_repeats == 0 {
            return Err(Error::Config("`inner_repeats` must be >= 1".into()));
        }
        if self.multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::Config("`multipliers` must be positive and finite".into()));
        }
        if self.epsilons.to_vec().iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("`epsilons` must be > 0 (use inf for no privacy)".into()));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("`delta` must lie in (0, 1), got {d}")));
            }
        }
        let max_n = self.n_silos.to_vec().into_iter().min().unwrap_or(0);
        if let Some(av) = &self.available {
            if av.to_vec().iter().any(|&m| m == 0 || m > max_n) {
                return Err(Error::Config(format!("`available` entries must lie in [1, {max_n}]")));
            }
        }
        match self.problem {
            ProblemKind::Quadratic | ProblemKind::Heterolabel => {
                if self.dim.is_none() {
                    return Err(Error::Config("`dim` is required for generated problems".into()));
                }
            }
            ProblemKind::Csv => {
                if self.train_csv.is_none() || self.loss.is_none() {
                    return Err(Error::Config("`train_csv` and `loss` are required for csv problems".into()));
                }
            }
        }
        Ok(())
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Grid cells in deterministic order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &n_silos in &self.n_silos.to_vec() {
            let avail = match &self.available {
                Some(a) => a.to_vec(),
                None => vec![n_silos],
            };
            for &m in &avail {
                for &n in &self.n.to_vec() {
                    for &eps in &self.epsilons.to_vec() {
                        for &alg in &self.algorithms.to_vec() {
                            for &seed in &self.seeds.to_vec() {
                                cells.push(Cell {
                                    algorithm: alg,
                                    n_silos,
                                    m_available: m,
                                    n,
                                    epsilon: eps,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    fn delta_for(&self, n: usize) -> f64 {
        self.delta.unwrap_or(1.0 / (n as f64 * n as f64))
    }

    fn budget_for(&self, cell: &Cell) -> Result<PrivacyBudget> {
        let delta = self.delta_for(cell.n);
        if cell.epsilon.is_infinite() {
            Ok(PrivacyBudget::non_private(delta))
        } else {
            PrivacyBudget::new(cell.epsilon, delta)
        }
    }

    /// Builds the problem a cell runs on; the seed controls the data.
    pub fn build_problem(&self, n_silos: usize, n: usize, seed: u64) -> Result<FederatedProblem> {
        match self.problem {
            ProblemKind::Quadratic => {
                let d = self.dim.unwrap_or(1);
                let mut spec = QuadraticSpec::new(n_silos, n, d, self.centers_spread.unwrap_or(1.0), seed);
                if let Some(o) = self.offset {
                    spec.offset = o;
                }
                if let Some(s) = self.sigma_x {
                    spec.sigma_x = s;
                    spec.truncation_radius = s * ((d as f64).sqrt() + 4.0);
                }
                if let Some(r) = self.domain_radius {
                    spec.domain_radius = r;
                }
                let p = gen_heterogeneous_quadratic(&spec)?;
                Ok(if self.iid_partition { p.repartition_iid(seed) } else { p })
            }
            ProblemKind::Heterolabel => {
                let mut spec = HeteroLabelSpec::new(n_silos, n, self.dim.unwrap_or(1), seed);
                if let Some(t) = self.test_per_silo {
                    spec.test_per_silo = t;
                }
                if let Some(r) = self.domain_radius {
                    spec.domain_radius = r;
                }
                gen_binary_heterolabel(&spec)
            }
            ProblemKind::Csv => {
                let train = self.train_csv.as_deref().ok_or_else(|| Error::Config("missing `train_csv`".into()))?;
                let kind = self.loss.ok_or_else(|| Error::Config("missing `loss`".into()))?;
                load_csv_problem(train, self.test_csv.as_deref(), kind, self.domain_radius.unwrap_or(1.0))
            }
        }
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub n_silos: usize,
    pub m_available: usize,
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
}

/// One CSV row of results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "N")]
    pub n_silos: usize,
    #[serde(rename = "M")]
    pub m_available: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub multiplier: f64,
    pub final_excess_risk: Option<f64>,
    pub test_error: Option<f64>,
    pub train_loss: f64,
    pub comm_rounds: u64,
    pub grad_calls: u64,
    /// Rounds predicted by the schedule (or `R` for the baseline).
    pub scheduled_rounds: u64,
    pub theory_risk_ref: f64,
    pub theory_comm_lb: Option<f64>,
}

impl ResultRow {
    /// Excess risk when known, otherwise test error.
    pub fn metric(&self) -> Option<f64> {
        self.final_excess_risk.or(self.test_error)
    }
}

/// Output of one driver call.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub w: ParamVector,
    pub ledger: RunLedger,
    pub scheduled_rounds: u64,
    pub schedule: Option<PhaseSchedule>,
}

/// Runs one algorithm once.
pub fn run_algorithm(
    problem: &FederatedProblem,
    algorithm: Algorithm,
    budget: PrivacyBudget,
    fed_config: FederationConfig,
    options: &DriverOptions,
    baseline: Option<BaselineConfig>,
    transcript: bool,
) -> Result<RunOutput> {
    let mut fed = Federation::new(fed_config)?;
    let mut ledger = if transcript { RunLedger::with_transcript() } else { RunLedger::new() };
    let (w, scheduled_rounds, schedule) = match algorithm {
        Algorithm::OnePassBaseline => {
            let mut cfg = baseline.unwrap_or_else(|| BaselineConfig::default_for(problem.n_per_silo()));
            cfg.step_multiplier *= options.multiplier;
            let w = one_pass_baseline(problem, &budget, &cfg, &mut fed, &mut ledger)?;
            (w, cfg.rounds, None)
        }
        _ => {
            let (out, schedule) = match algorithm {
                Algorithm::Alg1Smooth => run_smooth(problem, budget, options, &mut fed, &mut ledger)?,
                Algorithm::Alg4Subgrad => run_subgradient(problem, budget, options, &mut fed, &mut ledger)?,
                Algorithm::Alg5Conv => run_conv_smoothed(problem, budget, options, &mut fed, &mut ledger)?,
                Algorithm::Alg1Nesterov => run_nesterov_smoothed(problem, budget, options, &mut fed, &mut ledger)?,
                Algorithm::OnePassBaseline => unreachable!(),
            };
            (out.w, schedule.total_rounds(), Some(schedule))
        }
    };
    Ok(RunOutput {
        w,
        ledger,
        scheduled_rounds,
        schedule,
    })
}

/// `LD (1/√N)(1/√n + √(d ln(1/δ))/(εn))`.
pub fn theory_risk_ref(l: f64, diameter: f64, n_silos: usize, n: usize, d: usize, budget: &PrivacyBudget) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    l * diameter / (n_silos as f64).sqrt() * (1.0 / nf.sqrt() + (df * (1.0 / budget.delta).ln()).sqrt() / (budget.epsilon * nf))
}

/// Seeds of the federation streams for one inner repeat of a cell.
fn repeat_federation(cell: &Cell, repeat: usize) -> FederationConfig {
    let seed = cell.seed.wrapping_mul(1_000_003).wrapping_add(repeat as u64);
    FederationConfig::partial(cell.n_silos, cell.m_available, seed)
}

/// Runs a cell: tries every multiplier `inner_repeats` times, keeps the one
/// with the lowest mean training loss, and reports its mean metrics.
pub fn run_cell(config: &ExperimentConfig, cell: &Cell) -> Result<(ResultRow, f64)> {
    let start = Instant::now();
    let problem = config.build_problem(cell.n_silos, cell.n, cell.seed)?;
    let budget = config.budget_for(cell)?;
    let baseline = config.baseline_rounds.map(|r| BaselineConfig {
        rounds: r,
        batch: config.baseline_batch.unwrap_or((cell.n / r.max(1) as usize).max(1)),
        step_multiplier: 1.0,
    });

    struct Trial {
        multiplier: f64,
        train: f64,
        excess: Option<f64>,
        test: Option<f64>,
        first: RunOutput,
    }
    let mut best: Option<Trial> = None;
    for &multiplier in &config.multipliers {
        let options = DriverOptions {
            batch_policy: config.batch_policy,
            multiplier,
            rounds_override: config.rounds_override.clone(),
        };
        let mut train = 0.0;
        let mut excess = Some(0.0);
        let mut test = Some(0.0);
        let mut first = None;
        for repeat in 0..config.inner_repeats {
            let out = run_algorithm(&problem, cell.algorithm, budget, repeat_federation(cell, repeat), &options, baseline, config.transcript)?;
            train += problem.empirical_risk(&out.w)?;
            excess = excess.zip(problem.excess_risk(&out.w)).map(|(a, b)| a + b);
            test = test.zip(problem.test_error(&out.w)).map(|(a, b)| a + b);
            if first.is_none() {
                first = Some(out);
            }
        }
        let k = config.inner_repeats as f64;
        let trial = Trial {
            multiplier,
            train: train / k,
            excess: excess.map(|v| v / k),
            test: test.map(|v| v / k),
            first: first.expect("inner_repeats >= 1"),
        };
        if best.as_ref().is_none_or(|b| trial.train < b.train) {
            best = Some(trial);
        }
    }
    let best = best.expect("multipliers nonempty");

    let l = problem.loss.lipschitz;
    let diameter = problem.domain.diameter();
    let comm_lb = match (problem.heterogeneity_zeta, problem.loss.beta) {
        (Some(zeta), Some(beta)) => Some(reference_comm_lower_bound(l, diameter, beta, cell.n_silos, cell.n, problem.dim(), &budget, zeta)),
        _ => None,
    };
    let row = ResultRow {
        algorithm: cell.algorithm.name().into(),
        epsilon: cell.epsilon,
        delta: budget.delta,
        n_silos: cell.n_silos,
        m_available: cell.m_available,
        n: cell.n,
        d: problem.dim(),
        seed: cell.seed,
        multiplier: best.multiplier,
        final_excess_risk: best.excess,
        test_error: best.test,
        train_loss: best.train,
        comm_rounds: best.first.ledger.comm_rounds(),
        grad_calls: best.first.ledger.grad_calls(),
        scheduled_rounds: best.first.scheduled_rounds,
        theory_risk_ref: theory_risk_ref(l, diameter, cell.n_silos, cell.n, problem.dim(), &budget),
        theory_comm_lb: comm_lb,
    };
    Ok((row, start.elapsed().as_secs_f64()))
}

/// Runs every cell (in parallel) and returns rows in grid order with their
/// wall times.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<(ResultRow, f64)>> {
    config.validate()?;
    config.cells().par_iter().map(|cell| run_cell(config, cell)).collect()
}

/// Runs the grid and writes `results.csv` and `timings.csv` into the
/// output directory. Only `timings.csv` depends on the machine.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let rows = run_grid(config)?;
    let dir = config.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for (row, _) in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut t = csv::Writer::from_path(dir.join("timings.csv"))?;
    t.write_record(["row", "wall_time"])?;
    for (i, (_, secs)) in rows.iter().enumerate() {
        t.write_record([i.to_string(), format!("{secs:.6}")])?;
    }
    t.flush()?;
    Ok(rows.into_iter().map(|(r, _)| r).collect())
}

/// Schedules of the first seed of every (algorithm, N, M, n, ε) cell.
pub fn schedules(config: &ExperimentConfig) -> Result<Vec<(Cell, PhaseSchedule)>> {
    config.validate()?;
    let first_seed = config.seeds.to_vec()[0];
    let mut out = Vec::new();
    for cell in config.cells().into_iter().filter(|c| c.seed == first_seed) {
        if cell.algorithm == Algorithm::OnePassBaseline {
            continue;
        }
        let problem = config.build_problem(cell.n_silos, cell.n, cell.seed)?;
        let budget = config.budget_for(&cell)?;
        let l = problem.loss.lipschitz;
        let diameter = problem.domain.diameter();
        let (lip, beta) = match cell.algorithm {
            Algorithm::Alg1Smooth => (
                l,
                problem
                    .loss
                    .beta
                    .ok_or_else(|| Error::MissingCapability("loss is not smooth".into()))?,
            ),
            Algorithm::Alg1Nesterov => (l, choose_beta_nesterov(l, diameter, cell.m_available, cell.n, problem.dim(), &budget)?),
            Algorithm::Alg5Conv => {
                let s = choose_s_conv(diameter, cell.m_available, cell.n, problem.dim(), &budget)?;
                let sm = ConvSmoother::new(problem.loss.clone(), s)?;
                (sm.lipschitz(), sm.smoothness())
            }
            _ => (l, 0.0),
        };
        let inputs = ScheduleInputs {
            batch_policy: config.batch_policy,
            ..ScheduleInputs::for_problem(&problem, lip, beta, cell.m_available, budget)
        };
        let mut schedule = match cell.algorithm {
            Algorithm::Alg4Subgrad => build_schedule_subgrad(&inputs)?,
            _ => build_schedule_smooth(&inputs)?,
        };
        if let Some(r) = &config.rounds_override {
            schedule = schedule.with_rounds(r)?;
        }
        out.push((cell, schedule));
    }
    Ok(out)
}

/// Reads rows written by [`run_experiment`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = [
        "algorithm",
        "epsilon",
        "delta",
        "N",
        "M",
        "n",
        "d",
        "seed",
        "multiplier",
        "final_excess_risk",
        "test_error",
        "train_loss",
        "comm_rounds",
        "grad_calls",
        "scheduled_rounds",
        "theory_risk_ref",
        "theory_comm_lb",
    ];
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema(format!(
            "{}: expected columns `{}`, got `{}`",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Schema(format!("{}: {e}", path.display()))))
        .collect()
}

/// Median and sample standard deviation.
pub fn median_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
    let std = if k > 1 {
        let mean = v.iter().sum::<f64>() / k as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((median, std))
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two
/// distinct positive points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Marker written in place of an empty series.
pub const NO_DATA: &str = "# no data";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub epsilon: f64,
    pub count: usize,
    pub median: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeRow {
    pub algorithm: String,
    /// `n` or `eps_n`.
    pub against: &'static str,
    pub series: String,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub slopes: Vec<SlopeRow>,
}

fn eps_key(e: f64) -> String {
    if e.is_infinite() {
        "inf".into()
    } else {
        format!("{e}")
    }
}

type SeriesKey = (String, usize, usize, u64);

/// Per-(algorithm, ε) statistics and log-log slopes of the per-seed median
/// metric against `n` and against `εn`.
pub fn summarize(rows: &[ResultRow]) -> Report {
    let mut by_alg_eps: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    // (alg, N, M, eps) -> n -> values
    let mut by_series: BTreeMap<SeriesKey, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let key = (r.algorithm.clone(), r.epsilon.to_bits());
        let entry = by_alg_eps.entry(key).or_default();
        if let Some(m) = r.metric() {
            entry.push(m);
            by_series
                .entry((r.algorithm.clone(), r.n_silos, r.m_available, r.epsilon.to_bits()))
                .or_default()
                .entry(r.n)
                .or_default()
                .push(m);
        }
    }
    let mut summary: Vec<SummaryRow> = by_alg_eps
        .into_iter()
        .map(|((alg, eb), vals)| {
            let stats = median_std(&vals);
            SummaryRow {
                algorithm: alg,
                epsilon: f64::from_bits(eb),
                count: vals.len(),
                median: stats.map(|s| s.0),
                std: stats.map(|s| s.1),
            }
        })
        .collect();
    summary.sort_by(|a, b| a.algorithm.cmp(&b.algorithm).then(a.epsilon.total_cmp(&b.epsilon)));

    let mut slopes = Vec::new();
    let mut eps_n: BTreeMap<(String, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for ((alg, big_n, m, eb), by_n) in &by_series {
        let eps = f64::from_bits(*eb);
        let pts: Vec<(f64, f64)> = by_n
            .iter()
            .filter_map(|(n, v)| median_std(v).map(|(med, _)| (*n as f64, med)))
            .collect();
        slopes.push(SlopeRow {
            algorithm: alg.clone(),
            against: "n",
            series: format!("N={big_n},M={m},eps={}", eps_key(eps)),
            slope: loglog_slope(&pts),
        });
        if eps.is_finite() {
            eps_n
                .entry((alg.clone(), *big_n, *m))
                .or_default()
                .extend(pts.iter().map(|(n, y)| (eps * n, *y)));
        }
    }
    for ((alg, big_n, m), pts) in eps_n {
        slopes.push(SlopeRow {
            algorithm: alg,
            against: "eps_n",
            series: format!("N={big_n},M={m}"),
            slope: loglog_slope(&pts),
        });
    }
    Report { summary, slopes }
}

/// Writes `summary.csv`, `slopes.csv` and one `x y yerr` plot-data file per
/// algorithm (metric against ε).
pub fn report(input: &Path, out: &Path) -> Result<Report> {
    let rows = read_results(input)?;
    let rep = summarize(&rows);
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["algorithm", "epsilon", "count", "median", "std"])?;
    for s in &rep.summary {
        w.write_record([
            s.algorithm.clone(),
            eps_key(s.epsilon),
            s.count.to_string(),
            s.median.map(|v| v.to_string()).unwrap_or_default(),
            s.std.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("slopes.csv"))?;
    w.write_record(["algorithm", "against", "series", "slope"])?;
    for s in &rep.slopes {
        w.write_record([
            s.algorithm.clone(),
            s.against.to_string(),
            s.series.clone(),
            s.slope.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut algorithms: Vec<&str> = rep.summary.iter().map(|s| s.algorithm.as_str()).collect();
    algorithms.dedup();
    for alg in algorithms {
        let mut text = format!("# {alg}: metric vs epsilon\n# x y yerr\n");
        let mut any = false;
        for s in rep.summary.iter().filter(|s| s.algorithm == alg) {
            if let (Some(m), Some(sd)) = (s.median, s.std) {
                text.push_str(&format!("{} {m} {sd}\n", eps_key(s.epsilon)));
                any = true;
            }
        }
        if !any {
            text.push_str(NO_DATA);
            text.push('\n');
        }
        fs::write(out.join(format!("plot_{alg}.dat")), text)?;
    }
    if rep.summary.is_empty() {
        fs::write(out.join("plot_empty.dat"), format!("{NO_DATA}\n"))?;
    }
    Ok(rep)
}

/// Parses an ε grid entry from the command line (`inf` allowed).
pub fn parse_epsilon(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0)
            .ok_or_else(|| invalid("epsilon", format!("`{other}` is not a positive number"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_std() {
        let (m, s) = median_std(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(median_std(&[]).is_none());
    }

    #[test]
    fn slope_of_inverse_law() {
        let pts: Vec<(f64, f64)> = [100.0, 200.0, 400.0, 800.0].iter().map(|&x| (x, 3.0 / x)).collect();
        assert!((loglog_slope(&pts).unwrap() + 1.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "problem = \"quadratic\"\nalgorithms = \"alg1_smooth\"\nn_silos = 4\nn = 64\ndim = 3\nepsilons = 1.0\nseeds = 0\nbogus = 1\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn scalar_and_list_forms() {
        let text = "problem = \"quadratic\"\nalgorithms = [\"alg1_smooth\", \"alg4_subgrad\"]\nn_silos = 4\nn = [64, 128]\ndim = 3\nepsilons = [1.0, inf]\nseeds = [0, 1]\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.cells().len(), 2 * 2 * 2 * 2);
        assert_eq!(cfg.delta_for(64), 1.0 / 4096.0);
        assert_eq!(cfg.multipliers, DEFAULT_MULTIPLIERS.to_vec());
    }

    #[test]
    fn empty_grid_rejected() {
        let text = "problem = \"quadratic\"\nalgorithms = []\nn_silos = 4\nn = 64\ndim = 3\nepsilons = 1.0\nseeds = 0\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn epsilon_parsing() {
        assert_eq!(parse_epsilon("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_epsilon("0.5").unwrap(), 0.5);
        assert!(parse_epsilon("-1").is_err());
    }

    #[test]
    fn theory_reference_is_monotone() {
        let b = |e: f64| PrivacyBudget::new(e, 1e-5).unwrap();
        let base = theory_risk_ref(1.0, 1.0, 4, 100, 10, &b(1.0));
        assert!(theory_risk_ref(1.0, 1.0, 4, 400, 10, &b(1.0)) < base);
        assert!(theory_risk_ref(1.0, 1.0, 16, 100, 10, &b(1.0)) < base);
        assert!(theory_risk_ref(1.0, 1.0, 4, 100, 10, &b(2.0)) < base);
    }
}
