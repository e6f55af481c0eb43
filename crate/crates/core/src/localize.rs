//! Localization drivers: a sequence of regularized ERM phases with
//! geometrically growing regularization and shrinking radii, each centered
//! at the previous phase output and run on fresh local samples.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Error, Result};
use crate::fedsim::Federation;
use crate::model::{Domain, ParamVector, PhaseDomain, PrivacyEntry, RunLedger};
use crate::privacy::{calibrate_sigma2, PrivacyBudget};
use crate::problems::{FederatedProblem, LossKind, SampleLoss};
use crate::smoothing::{choose_beta_nesterov, choose_s_conv, ConvSmoother, MoreauOracle, ProxMode};
use crate::solvers::{mb_subgradient_solve, multistage_solve, GradientSource, Phase, Regularizer, SolverConfig, StageParams};

/// Tolerance of the per-phase feasibility assertion.
const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Two-step fixed point between `R_i` and `K_i`.
    #[default]
    FixedPoint,
    /// `K_i = n_i`: every round uses each silo's full phase data.
    FullBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Smooth,
    Subgradient,
}

/// Everything a schedule is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    pub lipschitz: f64,
    /// Diameter of the outer domain.
    pub diameter: f64,
    /// Smoothness of the per-sample loss (smooth schedules only).
    pub beta: f64,
    pub n_silos: usize,
    pub m_available: usize,
    /// Samples per silo.
    pub n: usize,
    pub dim: usize,
    pub budget: PrivacyBudget,
    pub batch_policy: BatchPolicy,
    /// Multiplies the base λ (smooth) or η (subgradient).
    pub multiplier: f64,
}

impl ScheduleInputs {
    /// Inputs for a problem with the given loss constants.
    pub fn for_problem(problem: &FederatedProblem, lipschitz: f64, beta: f64, m_available: usize, budget: PrivacyBudget) -> Self {
        Self {
            lipschitz,
            diameter: problem.domain.diameter(),
            beta,
            n_silos: problem.n_silos(),
            m_available,
            n: problem.n_per_silo(),
            dim: problem.dim(),
            budget,
            batch_policy: BatchPolicy::default(),
            multiplier: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        require_positive("lipschitz", self.lipschitz)?;
        require_positive("diameter", self.diameter)?;
        require_positive("multiplier", self.multiplier)?;
        if !(self.beta >= 0.0) {
            return Err(invalid("beta", "must be >= 0"));
        }
        if self.n < 2 {
            return Err(invalid("n", format!("need at least 2 samples per silo, got {}", self.n)));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be >= 1"));
        }
        if self.m_available == 0 || self.m_available > self.n_silos {
            return Err(invalid("m_available", format!("must lie in [1, {}]", self.n_silos)));
        }
        self.budget.check_hypothesis()
    }
}

/// Parameters of one phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub lambda: f64,
    pub n: usize,
    pub diameter: f64,
    pub rounds: u64,
    pub batch: usize,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub kind: ScheduleKind,
    pub inputs: ScheduleInputs,
    pub tau: usize,
    pub p: f64,
    /// Base λ (smooth) or η (subgradient).
    pub base: f64,
    /// Samples per silo actually used for halving (`2^⌊log₂ n⌋`).
    pub n_used: usize,
    /// Samples per silo left out by the power-of-two truncation.
    pub n_unused: usize,
    pub phases: Vec<PhaseParams>,
}

impl PhaseSchedule {
    pub fn total_rounds(&self) -> u64 {
        self.phases.iter().map(|p| p.rounds).sum()
    }

    /// `Σ_i R_i K_i M`, the gradient count of a run with fixed batches.
    pub fn total_grad_calls(&self) -> u64 {
        self.phases
            .iter()
            .map(|p| p.rounds * p.batch as u64 * self.inputs.m_available as u64)
            .sum()
    }

    /// Replaces `R_i` and recalibrates `σ_i²`.
    pub fn with_rounds(mut self, rounds: &[u64]) -> Result<Self> {
        if rounds.len() != self.phases.len() {
            return Err(Error::ScheduleMismatch(format!(
                "{} round counts for {} phases",
                rounds.len(),
                self.phases.len()
            )));
        }
        for (ph, &r) in self.phases.iter_mut().zip(rounds) {
            if r == 0 {
                return Err(invalid("rounds", "must be >= 1"));
            }
            ph.rounds = r;
            ph.sigma2 = calibrate_sigma2(self.inputs.lipschitz, r, ph.n, &self.inputs.budget)?;
        }
        Ok(self)
    }

    /// Writes `phase,lambda_i,n_i,D_i,R_i,K_i,sigma2_i`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "lambda_i", "n_i", "D_i", "R_i", "K_i", "sigma2_i"])?;
        for (i, p) in self.phases.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                p.lambda.to_string(),
                p.n.to_string(),
                p.diameter.to_string(),
                p.rounds.to_string(),
                p.batch.to_string(),
                p.sigma2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `max(½ log_n M + 1, 3)`.
pub fn phase_exponent(n: usize, m: usize) -> f64 {
    let n = n as f64;
    (0.5 * (m as f64).ln() / n.ln() + 1.0).max(3.0)
}

/// `(τ, n_used)` with `n_used = 2^⌊log₂ n⌋` and `τ` reduced until the last
/// phase keeps at least one sample.
fn halving(n: usize) -> (usize, usize) {
    let mut tau = (usize::BITS - 1 - n.leading_zeros()) as usize;
    let n_used = 1usize << tau;
    while tau > 1 && n_used >> tau == 0 {
        tau -= 1;
    }
    (tau, n_used)
}

/// Base regularization `(L / (D n √M)) max{√n, √(d ln(1/δ))/ε}`.
pub fn smooth_lambda(l: f64, diameter: f64, m: usize, n: usize, d: usize, budget: &PrivacyBudget) -> f64 {
    let (m, n, d) = (m as f64, n as f64, d as f64);
    let private = (d * (1.0 / budget.delta).ln()).sqrt() / budget.epsilon;
    l / (diameter * n * m.sqrt()) * n.sqrt().max(private)
}

/// Base step `(D √M / L) min{1/√n, ε/√(d ln(1/δ))}`.
pub fn subgrad_eta(l: f64, diameter: f64, m: usize, n: usize, d: usize, budget: &PrivacyBudget) -> f64 {
    let (m, n, d) = (m as f64, n as f64, d as f64);
    let private = budget.epsilon / (d * (1.0 / budget.delta).ln()).sqrt();
    diameter * m.sqrt() / l * (1.0 / n.sqrt()).min(private)
}

/// `max(√((β+λ_i)/λ_i) ln(Δ λ_i M ε² n_i² / (L² d)), 1_{M K < N n_i} ε² n_i² / (K d ln(1/δ)))`
/// before rounding.
pub fn smooth_rounds_raw(inputs: &ScheduleInputs, lambda_i: f64, n_i: usize, k: usize) -> f64 {
    let l = inputs.lipschitz;
    let eps = inputs.budget.schedule_epsilon();
    let delta = inputs.budget.delta;
    let (m, n_silos, d) = (inputs.m_available as f64, inputs.n_silos as f64, inputs.dim as f64);
    let (ni, k) = (n_i as f64, k as f64);
    let gap = l * inputs.diameter;
    let accel = ((inputs.beta + lambda_i) / lambda_i).sqrt() * (gap * lambda_i * m * eps * eps * ni * ni / (l * l * d)).ln();
    let sampling = if m * k < n_silos * ni {
        eps * eps * ni * ni / (k * d * (1.0 / delta).ln())
    } else {
        0.0
    };
    accel.max(sampling)
}

/// `min(n_i, max(1, ⌈ε n_i / (4 √(2 R ln(2/δ)))⌉))`.
pub fn fixed_point_batch(n_i: usize, rounds: u64, budget: &PrivacyBudget) -> usize {
    if !budget.is_private() {
        return n_i;
    }
    let k = (budget.epsilon * n_i as f64 / (4.0 * (2.0 * rounds as f64 * (2.0 / budget.delta).ln()).sqrt())).ceil();
    (k.max(1.0) as usize).min(n_i)
}

fn ceil_rounds(raw: f64) -> u64 {
    if raw.is_finite() && raw > 1.0 {
        raw.ceil() as u64
    } else {
        1
    }
}

/// Phase schedule for the accelerated smooth driver.
pub fn build_schedule_smooth(inputs: &ScheduleInputs) -> Result<PhaseSchedule> {
    inputs.validate()?;
    let budget = &inputs.budget;
    let (tau, n_used) = halving(inputs.n);
    let p = phase_exponent(inputs.n, inputs.m_available);
    let base = inputs.multiplier * smooth_lambda(inputs.lipschitz, inputs.diameter, inputs.m_available, inputs.n, inputs.dim, budget);
    let mut phases = Vec::with_capacity(tau);
    for i in 1..=tau {
        let lambda = base * 2f64.powf((i - 1) as f64 * p);
        let n_i = n_used >> i;
        let r0 = ceil_rounds(smooth_rounds_raw(inputs, lambda, n_i, n_i));
        let (rounds, batch) = match inputs.batch_policy {
            BatchPolicy::FullBatch => (r0, n_i),
            BatchPolicy::FixedPoint => {
                let k = fixed_point_batch(n_i, r0, budget);
                let r1 = ceil_rounds(smooth_rounds_raw(inputs, lambda, n_i, k));
                (r0.max(r1), k)
            }
        };
        phases.push(PhaseParams {
            lambda,
            n: n_i,
            diameter: 2.0 * inputs.lipschitz / lambda,
            rounds,
            batch,
            sigma2: calibrate_sigma2(inputs.lipschitz, rounds, n_i, budget)?,
        });
    }
    Ok(PhaseSchedule {
        kind: ScheduleKind::Smooth,
        inputs: *inputs,
        tau,
        p,
        base,
        n_used,
        n_unused: inputs.n - n_used,
        phases,
    })
}

/// `⌈min(M n_i, M ε² n_i² / d)⌉ + 1`.
pub fn subgrad_rounds(m: usize, n_i: usize, d: usize, budget: &PrivacyBudget) -> u64 {
    let (m, ni, d) = (m as f64, n_i as f64, d as f64);
    let eps = budget.epsilon;
    let r = (m * ni).min(m * eps * eps * ni * ni / d);
    r.ceil() as u64 + 1
}

/// Phase schedule for the localized subgradient driver.
pub fn build_schedule_subgrad(inputs: &ScheduleInputs) -> Result<PhaseSchedule> {
    inputs.validate()?;
    let budget = &inputs.budget;
    let (tau, n_used) = halving(inputs.n);
    let p = phase_exponent(inputs.n, inputs.m_available);
    let base = inputs.multiplier * subgrad_eta(inputs.lipschitz, inputs.diameter, inputs.m_available, inputs.n, inputs.dim, budget);
    let mut phases = Vec::with_capacity(tau);
    for i in 1..=tau {
        let eta_i = base / 2f64.powf(i as f64 * p);
        let n_i = n_used >> i;
        let lambda = 1.0 / (eta_i * n_i as f64);
        let rounds = subgrad_rounds(inputs.m_available, n_i, inputs.dim, budget);
        let batch = match inputs.batch_policy {
            BatchPolicy::FullBatch => n_i,
            BatchPolicy::FixedPoint => fixed_point_batch(n_i, rounds, budget),
        };
        phases.push(PhaseParams {
            lambda,
            n: n_i,
            diameter: 2.0 * inputs.lipschitz / lambda,
            rounds,
            batch,
            sigma2: calibrate_sigma2(inputs.lipschitz, rounds, n_i, budget)?,
        });
    }
    Ok(PhaseSchedule {
        kind: ScheduleKind::Subgradient,
        inputs: *inputs,
        tau,
        p,
        base,
        n_used,
        n_unused: inputs.n - n_used,
        phases,
    })
}

/// Phase solver used by [`run_localized`].
#[derive(Clone, Debug)]
pub enum SolverKind {
    AcsaMultistage,
    Subgradient,
    AcsaConv(ConvSmoother),
}

#[derive(Clone, Debug)]
pub struct LocalizedOutcome {
    pub w: ParamVector,
    /// `w_0, w_1, …, w_τ`.
    pub centers: Vec<ParamVector>,
    /// Phases where the multi-stage plan could not fit a full stage.
    pub truncated_phases: Vec<usize>,
}

/// Runs the phases of `schedule` on `problem` with per-sample loss `loss`.
pub fn run_localized(
    problem: &FederatedProblem,
    loss: &dyn SampleLoss,
    schedule: &PhaseSchedule,
    solver: &SolverKind,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<LocalizedOutcome> {
    let inputs = &schedule.inputs;
    if problem.n_silos() != inputs.n_silos || problem.n_per_silo() != inputs.n || problem.dim() != inputs.dim {
        return Err(Error::ScheduleMismatch(format!(
            "schedule built for (N={}, n={}, d={}), problem has (N={}, n={}, d={})",
            inputs.n_silos,
            inputs.n,
            inputs.dim,
            problem.n_silos(),
            problem.n_per_silo(),
            problem.dim()
        )));
    }
    if fed.n_silos() != inputs.n_silos || fed.config.m_available != inputs.m_available {
        return Err(Error::ScheduleMismatch("federation size differs from schedule".into()));
    }
    if problem.silos.iter().any(|s| s.samples.len() != inputs.n) {
        return Err(Error::ScheduleMismatch("silos hold unequal sample counts".into()));
    }
    let used: usize = schedule.phases.iter().map(|p| p.n).sum();
    if used > inputs.n {
        return Err(Error::ScheduleMismatch(format!("phases need {used} samples per silo, only {} exist", inputs.n)));
    }
    match (solver, schedule.kind) {
        (SolverKind::Subgradient, ScheduleKind::Subgradient) => {}
        (SolverKind::AcsaMultistage | SolverKind::AcsaConv(_), ScheduleKind::Smooth) => {}
        _ => return Err(Error::ScheduleMismatch("solver kind does not match schedule kind".into())),
    }
    if matches!(solver, SolverKind::AcsaMultistage) && loss.smoothness().is_none() {
        return Err(Error::MissingCapability("accelerated solver needs a smooth loss".into()));
    }

    let outer = &problem.domain;
    let l = inputs.lipschitz;
    let mut center = outer.center.clone();
    let mut centers = vec![center.clone()];
    let mut truncated_phases = Vec::new();
    let mut offset = 0usize;
    for (idx, ph) in schedule.phases.iter().enumerate() {
        let phase_id = idx + 1;
        let inner = Domain::ball(center.clone(), ph.diameter)?;
        let phase = Phase {
            loss,
            data: problem.silos.iter().map(|s| &s.samples[offset..offset + ph.n]).collect(),
            reg: Some(Regularizer {
                lambda: ph.lambda,
                center: center.clone(),
            }),
            domain: PhaseDomain::new(outer.clone(), Some(inner)),
        };
        let config = SolverConfig::new(ph.rounds, ph.batch, ph.lambda, ph.sigma2)?.require_privacy(l, ph.n, &inputs.budget)?;
        let w = match solver {
            SolverKind::Subgradient => mb_subgradient_solve(&phase, &config, center.clone(), fed, ledger, false)?.w,
            SolverKind::AcsaMultistage | SolverKind::AcsaConv(_) => {
                let source = match solver {
                    SolverKind::AcsaConv(sm) => GradientSource::Convolution(sm.clone()),
                    _ => GradientSource::Minibatch,
                };
                let params = StageParams {
                    beta: inputs.beta + ph.lambda,
                    lipschitz: l + ph.lambda * ph.diameter,
                    delta: l * inputs.diameter,
                };
                let out = multistage_solve(&phase, &config, &params, &source, center.clone(), fed, ledger)?;
                if out.stages.truncated {
                    truncated_phases.push(phase_id);
                }
                out.w
            }
        };
        if !phase.domain.contains(&w, FEASIBILITY_TOL) {
            return Err(Error::Contract(format!("phase {phase_id} output left its feasible set")));
        }
        for silo in 0..inputs.n_silos {
            ledger.add_privacy_entry(PrivacyEntry {
                silo_id: silo,
                phase_id,
                epsilon: inputs.budget.epsilon,
                delta: inputs.budget.delta,
                sigma2: ph.sigma2,
                batch_indices: (offset..offset + ph.n).collect(),
            });
        }
        offset += ph.n;
        center = w;
        centers.push(center.clone());
    }
    Ok(LocalizedOutcome {
        w: center,
        centers,
        truncated_phases,
    })
}

/// Localized accelerated driver on a smooth loss.
pub fn run_smooth(
    problem: &FederatedProblem,
    budget: PrivacyBudget,
    options: &DriverOptions,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<(LocalizedOutcome, PhaseSchedule)> {
    let beta = problem
        .loss
        .beta
        .ok_or_else(|| Error::MissingCapability(format!("{:?} loss is not smooth", problem.loss.kind)))?;
    let schedule = options.apply(build_schedule_smooth(&options.inputs(problem, problem.loss.lipschitz, beta, fed, budget))?)?;
    let out = run_localized(problem, &problem.loss, &schedule, &SolverKind::AcsaMultistage, fed, ledger)?;
    Ok((out, schedule))
}

/// Localized subgradient driver.
pub fn run_subgradient(
    problem: &FederatedProblem,
    budget: PrivacyBudget,
    options: &DriverOptions,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<(LocalizedOutcome, PhaseSchedule)> {
    let schedule = options.apply(build_schedule_subgrad(&options.inputs(problem, problem.loss.lipschitz, 0.0, fed, budget))?)?;
    let out = run_localized(problem, &problem.loss, &schedule, &SolverKind::Subgradient, fed, ledger)?;
    Ok((out, schedule))
}

/// Localized accelerated driver on the convolution-smoothed loss with
/// Poisson sampling.
pub fn run_conv_smoothed(
    problem: &FederatedProblem,
    budget: PrivacyBudget,
    options: &DriverOptions,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<(LocalizedOutcome, PhaseSchedule)> {
    let s = choose_s_conv(problem.domain.diameter(), fed.config.m_available, problem.n_per_silo(), problem.dim(), &budget)?;
    let smoother = ConvSmoother::new(problem.loss.clone(), s)?;
    let schedule = options.apply(build_schedule_smooth(&options.inputs(problem, smoother.lipschitz(), smoother.smoothness(), fed, budget))?)?;
    let out = run_localized(problem, &problem.loss, &schedule, &SolverKind::AcsaConv(smoother), fed, ledger)?;
    Ok((out, schedule))
}

/// Wraps each per-sample loss in its Moreau envelope with the smoothness
/// from [`choose_beta_nesterov`] and runs the accelerated driver.
pub fn run_nesterov_smoothed(
    problem: &FederatedProblem,
    budget: PrivacyBudget,
    options: &DriverOptions,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<(LocalizedOutcome, PhaseSchedule)> {
    let l = problem.loss.lipschitz;
    let beta = choose_beta_nesterov(l, problem.domain.diameter(), fed.config.m_available, problem.n_per_silo(), problem.dim(), &budget)?;
    let envelope = MoreauOracle::new(problem.loss.clone(), beta, ProxMode::ClosedForm)?;
    let schedule = options.apply(build_schedule_smooth(&options.inputs(problem, l, beta, fed, budget))?)?;
    let out = run_localized(problem, &envelope, &schedule, &SolverKind::AcsaMultistage, fed, ledger)?;
    Ok((out, schedule))
}

/// Knobs shared by the driver entry points.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverOptions {
    pub batch_policy: BatchPolicy,
    pub multiplier: f64,
    /// Replaces the formula `R_i` when set.
    pub rounds_override: Option<Vec<u64>>,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            batch_policy: BatchPolicy::default(),
            multiplier: 1.0,
            rounds_override: None,
        }
    }
}

impl DriverOptions {
    fn inputs(&self, problem: &FederatedProblem, l: f64, beta: f64, fed: &Federation, budget: PrivacyBudget) -> ScheduleInputs {
        ScheduleInputs {
            batch_policy: self.batch_policy,
            multiplier: self.multiplier,
            ..ScheduleInputs::for_problem(problem, l, beta, fed.config.m_available, budget)
        }
    }

    fn apply(&self, schedule: PhaseSchedule) -> Result<PhaseSchedule> {
        match &self.rounds_override {
            Some(r) => schedule.with_rounds(r),
            None => Ok(schedule),
        }
    }
}

/// `min{ζ/√(βα), D√β/√α}` with `α = (LD/√N)(1/√n + √(d ln(1/δ))/(εn))`.
#[allow(clippy::too_many_arguments)]
pub fn reference_comm_lower_bound(
    l: f64,
    diameter: f64,
    beta: f64,
    n_silos: usize,
    n: usize,
    d: usize,
    budget: &PrivacyBudget,
    zeta: f64,
) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    let alpha = l * diameter / (n_silos as f64).sqrt() * (1.0 / nf.sqrt() + (df * (1.0 / budget.delta).ln()).sqrt() / (budget.epsilon * nf));
    (zeta / (beta * alpha).sqrt()).min(diameter * beta.sqrt() / alpha.sqrt())
}

/// Whether a loss kind can drive the accelerated solver directly.
pub fn supports_acsa(kind: LossKind) -> bool {
    kind.is_smooth()
}
