//! Round-based private ERM solvers run inside one localization phase:
//! accelerated noisy minibatch SGD (with its multi-stage strongly convex
//! wrapper), the noisy minibatch subgradient method, and the accelerated
//! method driven by convolution-smoothed Poisson estimates.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Error, Result};
use crate::fedsim::{draw_with_replacement, Federation, LocalMessage};
use crate::model::{axpy, norm, ParamVector, PhaseDomain, RunLedger};
use crate::privacy::{calibrate_sigma2, PrivacyBudget};
use crate::problems::{Sample, SampleLoss};
use crate::smoothing::{conv_smooth_grad_estimate, ConvSmoother};

/// `(λ/2)|w - center|²` added to the phase objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub lambda: f64,
    pub center: ParamVector,
}

/// One phase's regularized ERM problem as seen by a solver.
pub struct Phase<'a> {
    pub loss: &'a dyn SampleLoss,
    /// Phase samples, indexed by silo id.
    pub data: Vec<&'a [Sample]>,
    pub reg: Option<Regularizer>,
    pub domain: PhaseDomain,
}

impl Phase<'_> {
    pub fn dim(&self) -> usize {
        self.loss.dim()
    }

    /// `(1/N) Σ_i (1/n_i) Σ_j f(w, x_ij) + (λ/2)|w - center|²`.
    pub fn objective(&self, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for silo in &self.data {
            let mut s = 0.0;
            for x in silo.iter() {
                s += self.loss.value(w, x)?;
            }
            total += s / silo.len() as f64;
        }
        total /= self.data.len() as f64;
        if let Some(r) = &self.reg {
            let d = r.center.dist(w);
            total += 0.5 * r.lambda * d * d;
        }
        Ok(total)
    }

    fn add_reg_grad(&self, w: &[f64], out: &mut [f64]) {
        if let Some(r) = &self.reg {
            for ((o, wi), ci) in out.iter_mut().zip(w).zip(r.center.iter()) {
                *o += r.lambda * (wi - ci);
            }
        }
    }

    fn min_silo_len(&self) -> usize {
        self.data.iter().map(|d| d.len()).min().unwrap_or(0)
    }
}

/// Rounds, batch size, strong convexity and noise of one solver call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rounds: u64,
    pub batch: usize,
    pub mu: f64,
    pub sigma2: f64,
}

impl SolverConfig {
    pub fn new(rounds: u64, batch: usize, mu: f64, sigma2: f64) -> Result<Self> {
        if rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if batch == 0 {
            return Err(invalid("batch", "must be >= 1"));
        }
        if !(mu >= 0.0) || !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(invalid("mu", "strong convexity and noise variance must be finite and >= 0"));
        }
        Ok(Self {
            rounds,
            batch,
            mu,
            sigma2,
        })
    }

    /// Refuses configurations whose noise is below the calibrated level
    /// for `(L, rounds, n_phase, budget)`.
    pub fn require_privacy(self, lipschitz: f64, n_phase: usize, budget: &PrivacyBudget) -> Result<Self> {
        let needed = calibrate_sigma2(lipschitz, self.rounds, n_phase, budget)?;
        if self.sigma2 < needed {
            return Err(Error::Contract(format!(
                "noise variance {} is below the calibrated {needed}",
                self.sigma2
            )));
        }
        Ok(self)
    }

    fn check_batch(&self, phase: &Phase<'_>) -> Result<()> {
        let n = phase.min_silo_len();
        if self.batch > n {
            return Err(invalid("batch", format!("K = {} exceeds phase size {n}", self.batch)));
        }
        Ok(())
    }
}

/// How a silo forms its local gradient estimate.
#[derive(Clone, Debug)]
pub enum GradientSource {
    /// `K` samples drawn with replacement.
    Minibatch,
    /// Poisson sampling at rate `K/n` with convolution smoothing.
    Convolution(ConvSmoother),
}

/// One noisy, silo-averaged gradient at `w`; the regularizer gradient is
/// added locally before the noise.
pub fn noisy_gradient(
    phase: &Phase<'_>,
    source: &GradientSource,
    config: &SolverConfig,
    w: &[f64],
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<ParamVector> {
    let d = phase.dim();
    let k = config.batch;
    fed.noisy_round(ledger, d, config.sigma2, |i, rng: &mut ChaCha8Rng| {
        let data = phase.data[i];
        match source {
            GradientSource::Minibatch => {
                let mut v = vec![0.0; d];
                for j in draw_with_replacement(data.len(), k, rng) {
                    phase.loss.add_grad(w, &data[j], 1.0 / k as f64, &mut v)?;
                }
                phase.add_reg_grad(w, &mut v);
                Ok(LocalMessage {
                    vector: v,
                    grad_calls: k as u64,
                })
            }
            GradientSource::Convolution(smoother) => {
                let reg = phase.reg.as_ref().map(|r| (r.lambda, &r.center[..]));
                let (v, calls) = conv_smooth_grad_estimate(smoother, w, data, k, reg, rng)?;
                Ok(LocalMessage {
                    vector: v.into_inner(),
                    grad_calls: calls,
                })
            }
        }
    })
}

/// Iterate pair carried between accelerated rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct AcsaState {
    pub w: ParamVector,
    pub w_ag: ParamVector,
}

impl AcsaState {
    pub fn at(w0: ParamVector) -> Self {
        Self {
            w_ag: w0.clone(),
            w: w0,
        }
    }
}

/// The extrapolated query point
/// `[(1-α)(μ+η) w_ag + α((1-α)μ + η) w] / (η + (1-α²)μ)`.
pub fn acsa_md_point(state: &AcsaState, alpha: f64, eta: f64, mu: f64) -> ParamVector {
    let denom = eta + (1.0 - alpha * alpha) * mu;
    let c_ag = (1.0 - alpha) * (mu + eta) / denom;
    let c_w = alpha * ((1.0 - alpha) * mu + eta) / denom;
    let v: Vec<f64> = state.w_ag.iter().zip(state.w.iter()).map(|(a, w)| c_ag * a + c_w * w).collect();
    ParamVector::from(v)
}

/// Closed-form minimizer of
/// `α[<g, w> + (μ/2)|w_md - w|²] + [(1-α)μ + η]/2 |w_prev - w|²`
/// over the phase domain, followed by the averaging step.
pub fn acsa_update(
    state: &mut AcsaState,
    w_md: &[f64],
    g: &[f64],
    alpha: f64,
    eta: f64,
    mu: f64,
    domain: &PhaseDomain,
) -> Result<()> {
    let a = alpha * mu / 2.0;
    let b = (1.0 - alpha) * mu / 2.0 + eta / 2.0;
    let denom = 2.0 * a + 2.0 * b;
    let unconstrained: Vec<f64> = w_md
        .iter()
        .zip(state.w.iter())
        .zip(g)
        .map(|((md, wp), gi)| (2.0 * a * md + 2.0 * b * wp - alpha * gi) / denom)
        .collect();
    state.w = domain.project(&unconstrained)?;
    if alpha == 1.0 {
        state.w_ag = state.w.clone();
    } else {
        for (ag, w) in state.w_ag.iter_mut().zip(state.w.iter()) {
            *ag = alpha * w + (1.0 - alpha) * *ag;
        }
    }
    Ok(())
}

/// One full accelerated round: query point, one noisy communication, update.
#[allow(clippy::too_many_arguments)]
pub fn acsa_round(
    state: &mut AcsaState,
    alpha: f64,
    eta: f64,
    phase: &Phase<'_>,
    source: &GradientSource,
    config: &SolverConfig,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<()> {
    let w_md = acsa_md_point(state, alpha, eta, config.mu);
    let g = noisy_gradient(phase, source, config, &w_md, fed, ledger)?;
    acsa_update(state, &w_md, &g, alpha, eta, config.mu, &phase.domain)
}

/// Convolution-smoothed accelerated round.
#[allow(clippy::too_many_arguments)]
pub fn acsa_conv_round(
    state: &mut AcsaState,
    alpha: f64,
    eta: f64,
    phase: &Phase<'_>,
    smoother: &ConvSmoother,
    config: &SolverConfig,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<()> {
    acsa_round(state, alpha, eta, phase, &GradientSource::Convolution(smoother.clone()), config, fed, ledger)
}

/// Stage lengths and step parameters of the multi-stage wrapper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub rounds: Vec<u64>,
    pub upsilon: Vec<f64>,
    pub delta: f64,
    pub v2: f64,
    /// Set when the budget could not fit even the first stage.
    pub truncated: bool,
}

impl StageSchedule {
    pub fn stages(&self) -> usize {
        self.rounds.len()
    }
}

/// `⌈max{4√(2β/μ), 128 L² / (3 μ Δ 2^{-(k+1)})}⌉`.
pub fn stage_rounds(k: u32, mu: f64, beta: f64, l: f64, delta: f64) -> u64 {
    let a = 4.0 * (2.0 * beta / mu).sqrt();
    let b = 128.0 * l * l / (3.0 * mu * delta * 2f64.powi(-(k as i32 + 1)));
    a.max(b).ceil() as u64
}

/// `max{2β, [μ V² / (3 Δ 2^{-(k-1)} R (R+1)(R+2))]^{1/2}}`.
pub fn stage_upsilon(k: u32, rounds: u64, mu: f64, beta: f64, delta: f64, v2: f64) -> f64 {
    let r = rounds as f64;
    let inner = mu * v2 / (3.0 * delta * 2f64.powi(-(k as i32 - 1)) * r * (r + 1.0) * (r + 2.0));
    (2.0 * beta).max(inner.sqrt())
}

/// Plans stages `k = 1..U` with `U` maximal such that the stage lengths fit
/// in `budget`. Rounds left over are appended to the last stage so that the
/// whole budget is spent; a budget smaller than the first stage yields one
/// truncated stage.
pub fn plan_stages(budget: u64, mu: f64, beta: f64, l: f64, delta: f64, v2: f64) -> Result<StageSchedule> {
    if budget == 0 {
        return Err(invalid("rounds", "must be >= 1"));
    }
    require_positive("mu", mu)?;
    require_positive("delta", delta)?;
    if !(beta >= 0.0) || !(l >= 0.0) || !(v2 >= 0.0) {
        return Err(invalid("beta", "smoothness, Lipschitz and variance bounds must be >= 0"));
    }
    let mut rounds = Vec::new();
    let mut used = 0u64;
    let mut k = 1u32;
    loop {
        let r_k = stage_rounds(k, mu, beta, l, delta);
        if used.saturating_add(r_k) > budget {
            break;
        }
        rounds.push(r_k);
        used += r_k;
        k += 1;
    }
    let truncated = rounds.is_empty();
    if truncated {
        rounds.push(budget);
    } else if let Some(last) = rounds.last_mut() {
        *last += budget - used;
    }
    let upsilon = rounds
        .iter()
        .enumerate()
        .map(|(i, &r)| stage_upsilon(i as u32 + 1, r, mu, beta, delta, v2))
        .collect();
    Ok(StageSchedule {
        rounds,
        upsilon,
        delta,
        v2,
        truncated,
    })
}

/// `V² = 4L²/(KM) + dσ²/M`.
pub fn variance_bound(l: f64, k: usize, m: usize, d: usize, sigma2: f64) -> f64 {
    4.0 * l * l / (k as f64 * m as f64) + d as f64 * sigma2 / m as f64
}

/// Inputs of the multi-stage wrapper besides the phase and config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParams {
    /// Smoothness of the phase objective.
    pub beta: f64,
    /// Lipschitz bound of the phase objective over the phase domain.
    pub lipschitz: f64,
    /// Initial optimality gap bound.
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct MultistageOutcome {
    pub w: ParamVector,
    pub stages: StageSchedule,
}

/// Multi-stage accelerated noisy minibatch SGD: each stage restarts the
/// accelerated method at the previous stage output with
/// `α_r = 2/(r+1)`, `η_r = 4υ_k/(r(r+1))`.
pub fn multistage_solve(
    phase: &Phase<'_>,
    config: &SolverConfig,
    params: &StageParams,
    source: &GradientSource,
    w0: ParamVector,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<MultistageOutcome> {
    config.check_batch(phase)?;
    require_positive("mu", config.mu)?;
    let v2 = variance_bound(params.lipschitz, config.batch, fed.config.m_available, phase.dim(), config.sigma2);
    let stages = plan_stages(config.rounds, config.mu, params.beta, params.lipschitz, params.delta, v2)?;
    let mut q = w0;
    for (&r_k, &upsilon) in stages.rounds.iter().zip(&stages.upsilon) {
        let mut state = AcsaState::at(q);
        for r in 1..=r_k {
            let rf = r as f64;
            let alpha = 2.0 / (rf + 1.0);
            let eta = 4.0 * upsilon / (rf * (rf + 1.0));
            acsa_round(&mut state, alpha, eta, phase, source, config, fed, ledger)?;
        }
        q = state.w_ag;
    }
    Ok(MultistageOutcome { w: q, stages })
}

#[derive(Clone, Debug)]
pub struct SubgradOutcome {
    pub w: ParamVector,
    /// Largest norm of the aggregated noisy subgradient seen.
    pub max_grad_norm: f64,
    /// Iterates `w_1..w_R` when requested.
    pub trace: Option<Vec<ParamVector>>,
}

/// Projected noisy minibatch subgradient method with
/// `γ_r = 2/(μ(r+1))`, returning `2/(R(R+1)) Σ_r r w_r`.
pub fn mb_subgradient_solve(
    phase: &Phase<'_>,
    config: &SolverConfig,
    w0: ParamVector,
    fed: &mut Federation,
    ledger: &mut RunLedger,
    keep_trace: bool,
) -> Result<SubgradOutcome> {
    config.check_batch(phase)?;
    require_positive("mu", config.mu)?;
    let r_total = config.rounds as f64;
    let mut w = w0;
    let mut avg = vec![0.0; w.dim()];
    let mut max_grad_norm: f64 = 0.0;
    let mut trace = keep_trace.then(Vec::new);
    for r in 1..=config.rounds {
        let rf = r as f64;
        axpy(2.0 * rf / (r_total * (r_total + 1.0)), &w, &mut avg);
        if let Some(t) = trace.as_mut() {
            t.push(w.clone());
        }
        let g = noisy_gradient(phase, &GradientSource::Minibatch, config, &w, fed, ledger)?;
        max_grad_norm = max_grad_norm.max(norm(&g));
        let gamma = 2.0 / (config.mu * (rf + 1.0));
        axpy(-gamma, &g, &mut w);
        w = phase.domain.project(&w)?;
    }
    Ok(SubgradOutcome {
        w: ParamVector::from(avg),
        max_grad_norm,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::FederationConfig;
    use crate::model::Domain;
    use crate::problems::{LossKind, LossOracle};

    fn free_domain(d: usize) -> PhaseDomain {
        PhaseDomain::new(Domain::origin_ball(d, 1e6).unwrap(), None)
    }

    #[test]
    fn acsa_update_example() {
        let mut s = AcsaState {
            w: ParamVector::from(vec![2.0]),
            w_ag: ParamVector::from(vec![0.0]),
        };
        acsa_update(&mut s, &[0.0], &[1.0], 0.5, 1.0, 1.0, &free_domain(1)).unwrap();
        assert!((s.w[0] - 1.25).abs() < 1e-15);
        assert!((s.w_ag[0] - 0.625).abs() < 1e-15);
    }

    #[test]
    fn alpha_one_copies_iterate() {
        let mut s = AcsaState {
            w: ParamVector::from(vec![2.0, 1.0]),
            w_ag: ParamVector::from(vec![-3.0, 0.5]),
        };
        acsa_update(&mut s, &[0.1, 0.2], &[0.3, -0.7], 1.0, 2.0, 0.5, &free_domain(2)).unwrap();
        assert_eq!(s.w, s.w_ag);
    }

    #[test]
    fn stage_rounds_example() {
        assert_eq!(stage_rounds(1, 1.0, 1.0, 1.0, 1.0), 171);
    }

    #[test]
    fn stage_plan_fills_budget() {
        let plan = plan_stages(1000, 1.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        // 171 + 342 fit; 683 more does not.
        assert_eq!(plan.rounds, vec![171, 829]);
        assert!(!plan.truncated);
        let short = plan_stages(50, 1.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(short.rounds, vec![50]);
        assert!(short.truncated);
    }

    #[test]
    fn subgradient_weights_sum_to_one() {
        let r = 3.0f64;
        let w: Vec<f64> = (1..=3).map(|k| 2.0 * k as f64 / (r * (r + 1.0))).collect();
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[2] - 0.5).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_regularizer_pins_subgradient_output() {
        let dom = Domain::origin_ball(1, 5.0).unwrap();
        let loss = LossOracle::for_domain(LossKind::Absolute, &dom, 1.0).unwrap();
        let data: Vec<Sample> = (0..4).map(|i| Sample::new(vec![1.0], i as f64)).collect();
        let w0 = ParamVector::from(vec![0.7]);
        let phase = Phase {
            loss: &loss,
            data: vec![&data[..]],
            reg: Some(Regularizer {
                lambda: 1e8,
                center: w0.clone(),
            }),
            domain: PhaseDomain::new(dom, None),
        };
        let cfg = SolverConfig::new(20, 2, 1e8, 0.0).unwrap();
        let mut fed = Federation::new(FederationConfig::full(1, 0)).unwrap();
        let mut ledger = RunLedger::new();
        let out = mb_subgradient_solve(&phase, &cfg, w0, &mut fed, &mut ledger, false).unwrap();
        assert!((out.w[0] - 0.7).abs() < 1e-6);
        assert_eq!(ledger.comm_rounds(), 20);
        assert_eq!(ledger.grad_calls(), 40);
    }

    #[test]
    fn privacy_requirement_enforced() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let cfg = SolverConfig::new(4, 1, 1.0, 1.0).unwrap();
        assert!(cfg.require_privacy(1.0, 100, &b).is_err());
        let needed = calibrate_sigma2(1.0, 4, 100, &b).unwrap();
        assert!(SolverConfig::new(4, 1, 1.0, needed).unwrap().require_privacy(1.0, 100, &b).is_ok());
    }
}
