//! Gaussian-mechanism calibration, Poisson subsampling and parallel
//! composition over disjoint phase batches.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Error, Result};
use crate::model::{ParamVector, RunLedger};

/// Per-silo `(ε, δ)` target. `epsilon = ∞` means no privacy (zero noise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = Self { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn non_private(delta: f64) -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta,
        }
    }

    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(invalid("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// `2 ln(2/δ)`, the largest ε the calibration is stated for.
    pub fn epsilon_cap(&self) -> f64 {
        2.0 * (2.0 / self.delta).ln()
    }

    /// Rejects `ε > 2 ln(2/δ)`; the non-private budget passes.
    pub fn check_hypothesis(&self) -> Result<()> {
        self.validate()?;
        let bound = self.epsilon_cap();
        if self.is_private() && self.epsilon > bound {
            return Err(Error::BudgetHypothesis {
                epsilon: self.epsilon,
                bound,
            });
        }
        Ok(())
    }

    /// ε used inside schedule formulas; the non-private budget is mapped to
    /// the largest admissible ε so that every formula stays finite.
    pub fn schedule_epsilon(&self) -> f64 {
        if self.is_private() {
            self.epsilon
        } else {
            self.epsilon_cap()
        }
    }
}

/// Gaussian noise variance for one silo's averaged gradient over a phase
/// of `rounds` rounds on `n_phase` local samples:
/// `256 L² R ln(2.5 R/δ) ln(2/δ) / (n² ε²)`. Zero for the non-private budget.
pub fn calibrate_sigma2(lipschitz: f64, rounds: u64, n_phase: usize, budget: &PrivacyBudget) -> Result<f64> {
    require_positive("lipschitz", lipschitz)?;
    if rounds == 0 {
        return Err(invalid("rounds", "must be >= 1"));
    }
    if n_phase == 0 {
        return Err(invalid("n_phase", "must be >= 1"));
    }
    budget.validate()?;
    if !budget.is_private() {
        return Ok(0.0);
    }
    let r = rounds as f64;
    let n = n_phase as f64;
    let eps = budget.epsilon;
    let delta = budget.delta;
    Ok(256.0 * lipschitz * lipschitz * r * (2.5 * r / delta).ln() * (2.0 / delta).ln() / (n * n * eps * eps))
}

/// Includes each of `0..n_phase` independently with probability `rate`.
pub fn poisson_batch(n_phase: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid("rate", format!("must lie in (0, 1], got {rate}")));
    }
    if rate == 1.0 {
        return Ok((0..n_phase).collect());
    }
    Ok((0..n_phase).filter(|_| rng.gen::<f64>() < rate).collect())
}

/// `N(0, σ² I_d)`; exactly zero when `σ² = 0`, without consuming randomness.
pub fn gaussian_noise(dim: usize, sigma2: f64, rng: &mut impl Rng) -> Result<ParamVector> {
    let mut v = vec![0.0; dim];
    add_gaussian_noise(&mut v, sigma2, rng)?;
    Ok(ParamVector::from(v))
}

pub(crate) fn add_gaussian_noise(out: &mut [f64], sigma2: f64, rng: &mut impl Rng) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(invalid("sigma2", format!("must be finite and >= 0, got {sigma2}")));
    }
    if sigma2 == 0.0 {
        return Ok(());
    }
    let sd = sigma2.sqrt();
    for o in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *o += sd * z;
    }
    Ok(())
}

/// Overall per-silo guarantee under parallel composition: the maximum
/// per-phase `(ε, δ)`, valid only if each silo's phase batches are pairwise
/// disjoint.
pub fn ledger_compose(ledger: &RunLedger) -> Result<PrivacyBudget> {
    if ledger.privacy_entries.is_empty() {
        return Err(Error::Contract("ledger holds no privacy entries".into()));
    }
    let mut owners: BTreeMap<usize, HashMap<usize, usize>> = BTreeMap::new();
    let mut epsilon: f64 = 0.0;
    let mut delta: f64 = 0.0;
    for entry in &ledger.privacy_entries {
        let seen = owners.entry(entry.silo_id).or_default();
        for &index in &entry.batch_indices {
            if let Some(&first) = seen.get(&index) {
                if first != entry.phase_id {
                    return Err(Error::CompositionViolation {
                        silo: entry.silo_id,
                        first,
                        second: entry.phase_id,
                        index,
                    });
                }
            } else {
                seen.insert(index, entry.phase_id);
            }
        }
        epsilon = epsilon.max(entry.epsilon);
        delta = delta.max(entry.delta);
    }
    Ok(PrivacyBudget { epsilon, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PrivacyEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(silo: usize, phase: usize, idx: Vec<usize>) -> PrivacyEntry {
        PrivacyEntry {
            silo_id: silo,
            phase_id: phase,
            epsilon: 1.0,
            delta: 1e-5,
            sigma2: 0.0,
            batch_indices: idx,
        }
    }

    #[test]
    fn sigma2_scalings_are_exact() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let base = calibrate_sigma2(1.0, 4, 100, &b).unwrap();
        assert_eq!(calibrate_sigma2(1.0, 4, 200, &b).unwrap(), base / 4.0);
        let b2 = PrivacyBudget::new(2.0, 1e-5).unwrap();
        assert_eq!(calibrate_sigma2(1.0, 4, 100, &b2).unwrap(), base / 4.0);
    }

    #[test]
    fn sigma2_rejects_nonpositive() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        assert!(calibrate_sigma2(0.0, 4, 100, &b).is_err());
        assert!(calibrate_sigma2(1.0, 0, 100, &b).is_err());
        assert!(calibrate_sigma2(1.0, 4, 0, &b).is_err());
        assert!(PrivacyBudget::new(-1.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
    }

    #[test]
    fn sigma2_is_zero_without_privacy() {
        let b = PrivacyBudget::non_private(1e-5);
        assert_eq!(calibrate_sigma2(3.0, 10, 5, &b).unwrap(), 0.0);
    }

    #[test]
    fn budget_hypothesis() {
        let b = PrivacyBudget::new(30.0, 1e-5).unwrap();
        assert!(matches!(b.check_hypothesis(), Err(Error::BudgetHypothesis { .. })));
        assert!(PrivacyBudget::new(1.0, 1e-5).unwrap().check_hypothesis().is_ok());
        assert!(PrivacyBudget::non_private(1e-5).check_hypothesis().is_ok());
    }

    #[test]
    fn poisson_degenerate_and_invalid_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(poisson_batch(5, 1.0, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(poisson_batch(5, 0.0, &mut rng).is_err());
        assert!(poisson_batch(5, 1.5, &mut rng).is_err());
    }

    #[test]
    fn poisson_bernoulli_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 100_000;
        let mut ones = 0;
        for _ in 0..trials {
            let b = poisson_batch(1, 0.5, &mut rng).unwrap();
            assert!(b.len() <= 1);
            ones += b.len();
        }
        let freq = ones as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / trials as f64).sqrt() * 1.5);
    }

    #[test]
    fn poisson_mean_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (10_000usize, 0.1);
        let mean = (0..100).map(|_| poisson_batch(n, p, &mut rng).unwrap().len() as f64).sum::<f64>() / 100.0;
        assert!((mean - 1000.0).abs() <= 3.0 * (n as f64 * p * (1.0 - p)).sqrt());
    }

    #[test]
    fn noise_zero_variance_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(&*gaussian_noise(3, 0.0, &mut rng).unwrap(), &[0.0; 3]);
        let a = gaussian_noise(4, 2.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gaussian_noise(4, 2.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let x = gaussian_noise(1, 4.0, &mut rng).unwrap()[0];
            s += x;
            s2 += x * x;
        }
        let m = s / draws as f64;
        let var = s2 / draws as f64 - m * m;
        assert!((var - 4.0).abs() < 0.04, "variance {var}");
    }

    #[test]
    fn compose_disjoint_phases() {
        let mut ledger = RunLedger::new();
        ledger.add_privacy_entry(entry(0, 1, vec![0, 1, 2]));
        ledger.add_privacy_entry(entry(0, 2, vec![3, 4]));
        ledger.add_privacy_entry(entry(1, 1, vec![0, 1, 2]));
        let b = ledger_compose(&ledger).unwrap();
        assert_eq!((b.epsilon, b.delta), (1.0, 1e-5));
    }

    #[test]
    fn compose_single_phase_is_identity() {
        let mut ledger = RunLedger::new();
        let mut e = entry(0, 1, vec![0]);
        e.epsilon = 0.7;
        e.delta = 1e-6;
        ledger.add_privacy_entry(e);
        assert_eq!(ledger_compose(&ledger).unwrap(), PrivacyBudget { epsilon: 0.7, delta: 1e-6 });
    }

    #[test]
    fn compose_detects_overlap() {
        let mut ledger = RunLedger::new();
        ledger.add_privacy_entry(entry(3, 1, vec![5, 7]));
        ledger.add_privacy_entry(entry(3, 2, vec![7, 8]));
        assert!(matches!(
            ledger_compose(&ledger),
            Err(Error::CompositionViolation {
                silo: 3,
                first: 1,
                second: 2,
                index: 7
            })
        ));
    }
}
