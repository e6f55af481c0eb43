//! Round engine: silo availability, per-silo random streams, noisy
//! aggregation, and the one-pass baseline.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{axpy, norm, ParamVector, PrivacyEntry, RunLedger};
use crate::privacy::{add_gaussian_noise, calibrate_sigma2, PrivacyBudget};
use crate::problems::{FederatedProblem, SampleLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_silos: usize,
    /// Silos available in each round.
    pub m_available: usize,
    pub seed_data: u64,
    pub seed_noise: u64,
    pub seed_availability: u64,
}

impl FederationConfig {
    /// Full participation, all streams derived from one seed.
    pub fn full(n_silos: usize, seed: u64) -> Self {
        Self::partial(n_silos, n_silos, seed)
    }

    pub fn partial(n_silos: usize, m_available: usize, seed: u64) -> Self {
        Self {
            n_silos,
            m_available,
            seed_data: seed,
            seed_noise: seed ^ 0x6e6f_6973_6500_0000,
            seed_availability: seed ^ 0x6176_6169_6c00_0000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_silos == 0 {
            return Err(invalid("n_silos", "must be >= 1"));
        }
        if self.m_available == 0 || self.m_available > self.n_silos {
            return Err(invalid(
                "m_available",
                format!("must lie in [1, {}], got {}", self.n_silos, self.m_available),
            ));
        }
        Ok(())
    }
}

/// Uniform `M`-subset of silos for a round, ascending, determined by
/// `(seed_availability, round_id)` alone.
pub fn sample_available(config: &FederationConfig, round_id: u64) -> Vec<usize> {
    if config.m_available >= config.n_silos {
        return (0..config.n_silos).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed_availability);
    rng.set_stream(round_id);
    let mut silos = index::sample(&mut rng, config.n_silos, config.m_available).into_vec();
    silos.sort_unstable();
    silos
}

/// Per-silo data and noise streams plus the round loop. Availability is a
/// pure function of the round counter kept in the ledger.
#[derive(Clone, Debug)]
pub struct Federation {
    pub config: FederationConfig,
    data_rngs: Vec<ChaCha8Rng>,
    noise_rngs: Vec<ChaCha8Rng>,
}

/// What a silo sends back before noise: its local message and how many
/// per-sample gradients it evaluated.
pub struct LocalMessage {
    pub vector: Vec<f64>,
    pub grad_calls: u64,
}

impl Federation {
    pub fn new(config: FederationConfig) -> Result<Self> {
        config.validate()?;
        let stream = |seed: u64, silo: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(silo as u64);
            rng
        };
        Ok(Self {
            config,
            data_rngs: (0..config.n_silos).map(|i| stream(config.seed_data, i)).collect(),
            noise_rngs: (0..config.n_silos).map(|i| stream(config.seed_noise, i)).collect(),
        })
    }

    pub fn n_silos(&self) -> usize {
        self.config.n_silos
    }

    /// One communication round. Each available silo computes `local`
    /// with its data stream, adds `N(0, σ² I)` from its noise stream, and
    /// the server averages over the contacted silos in ascending id order.
    pub fn noisy_round<F>(&mut self, ledger: &mut RunLedger, dim: usize, sigma2: f64, mut local: F) -> Result<ParamVector>
    where
        F: FnMut(usize, &mut ChaCha8Rng) -> Result<LocalMessage>,
    {
        let round = ledger.comm_rounds();
        let silos = sample_available(&self.config, round);
        if silos.is_empty() {
            return Err(Error::EmptyRound { round });
        }
        let mut sum = vec![0.0; dim];
        let mut calls = Vec::with_capacity(silos.len());
        for &i in &silos {
            let mut msg = local(i, &mut self.data_rngs[i])?;
            if msg.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: msg.vector.len(),
                });
            }
            add_gaussian_noise(&mut msg.vector, sigma2, &mut self.noise_rngs[i])?;
            axpy(1.0, &msg.vector, &mut sum);
            calls.push(msg.grad_calls);
        }
        let m = silos.len() as f64;
        sum.iter_mut().for_each(|v| *v /= m);
        let g_norm = ledger.transcript().map(|_| norm(&sum));
        ledger.record_round_detail(&silos, &calls, g_norm);
        Ok(ParamVector::from(sum))
    }
}

/// Settings for the one-pass noisy minibatch SGD baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub rounds: u64,
    pub batch: usize,
    /// Multiplies the default step `D / (G √R)`.
    pub step_multiplier: f64,
}

impl BaselineConfig {
    /// `R = ⌈√n⌉` rounds of `K = ⌊n / R⌋` samples.
    pub fn default_for(n: usize) -> Self {
        let rounds = ((n as f64).sqrt().ceil() as u64).max(1);
        Self {
            rounds,
            batch: (n / rounds as usize).max(1),
            step_multiplier: 1.0,
        }
    }
}

/// Projected noisy minibatch SGD where every local sample is used at most
/// once: a contacted silo consumes its next `K` unused samples. Returns the
/// uniform average of the post-step iterates.
pub fn one_pass_baseline(
    problem: &FederatedProblem,
    budget: &PrivacyBudget,
    config: &BaselineConfig,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<ParamVector> {
    one_pass_baseline_with(problem, &problem.loss, budget, config, fed, ledger)
}

pub fn one_pass_baseline_with(
    problem: &FederatedProblem,
    loss: &dyn SampleLoss,
    budget: &PrivacyBudget,
    config: &BaselineConfig,
    fed: &mut Federation,
    ledger: &mut RunLedger,
) -> Result<ParamVector> {
    budget.validate()?;
    let n = problem.n_per_silo();
    let (r, k) = (config.rounds, config.batch);
    if r == 0 || k == 0 {
        return Err(invalid("rounds", "rounds and batch must be >= 1"));
    }
    if r.saturating_mul(k as u64) > n as u64 {
        return Err(invalid("rounds", format!("R*K = {} exceeds n = {n}", r * k as u64)));
    }
    if fed.n_silos() != problem.n_silos() {
        return Err(Error::ScheduleMismatch(format!(
            "federation has {} silos, problem has {}",
            fed.n_silos(),
            problem.n_silos()
        )));
    }
    let d = problem.dim();
    let l = loss.lipschitz();
    let sigma2 = calibrate_sigma2(l, r, n, budget)?;
    let m = fed.config.m_available as f64;
    let g = (l * l + d as f64 * sigma2 / m).sqrt();
    let step = config.step_multiplier * problem.domain.diameter() / (g * (r as f64).sqrt());

    let mut cursor = vec![0usize; problem.n_silos()];
    let mut w = problem.domain.center.clone();
    let mut avg = vec![0.0; d];
    for _ in 0..r {
        let grad = fed.noisy_round(ledger, d, sigma2, |i, _rng| {
            let start = cursor[i];
            cursor[i] += k;
            let mut v = vec![0.0; d];
            for s in &problem.silos[i].samples[start..start + k] {
                loss.add_grad(&w, s, 1.0 / k as f64, &mut v)?;
            }
            Ok(LocalMessage {
                vector: v,
                grad_calls: k as u64,
            })
        })?;
        axpy(-step, &grad, &mut w);
        problem.domain.project_in_place(&mut w);
        axpy(1.0 / r as f64, &w, &mut avg);
    }
    for (i, &used) in cursor.iter().enumerate() {
        ledger.add_privacy_entry(PrivacyEntry {
            silo_id: i,
            phase_id: 1,
            epsilon: budget.epsilon,
            delta: budget.delta,
            sigma2,
            batch_indices: (0..used).collect(),
        });
    }
    Ok(ParamVector::from(avg))
}

/// Uniform index draws with replacement from `0..n`.
pub(crate) fn draw_with_replacement(n: usize, k: usize, rng: &mut impl Rng) -> impl Iterator<Item = usize> + '_ {
    (0..k).map(move |_| rng.gen_range(0..n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_availability() {
        let c = FederationConfig::full(5, 1);
        for r in 0..10 {
            assert_eq!(sample_available(&c, r), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn availability_is_deterministic_and_sized() {
        let c = FederationConfig::partial(25, 18, 3);
        let a = sample_available(&c, 17);
        assert_eq!(a, sample_available(&c, 17));
        assert_eq!(a.len(), 18);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn availability_ignores_noise_seed() {
        let c = FederationConfig::partial(10, 4, 3);
        let c2 = FederationConfig { seed_noise: 99, ..c };
        for r in 0..50 {
            assert_eq!(sample_available(&c, r), sample_available(&c2, r));
        }
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::partial(3, 4, 0).validate().is_err());
        assert!(FederationConfig::partial(3, 0, 0).validate().is_err());
        assert!(FederationConfig::partial(0, 0, 0).validate().is_err());
    }

    #[test]
    fn noiseless_round_averages_in_order() {
        let mut fed = Federation::new(FederationConfig::full(3, 0)).unwrap();
        let mut ledger = RunLedger::with_transcript();
        let g = fed
            .noisy_round(&mut ledger, 1, 0.0, |i, _| {
                Ok(LocalMessage {
                    vector: vec![i as f64],
                    grad_calls: 2,
                })
            })
            .unwrap();
        assert_eq!(&*g, &[1.0]);
        assert_eq!((ledger.comm_rounds(), ledger.grad_calls()), (1, 6));
        assert_eq!(ledger.transcript().unwrap()[0].silos, vec![0, 1, 2]);
    }
}
