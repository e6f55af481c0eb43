//! Quick invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fedsim::{sample_available, Federation, FederationConfig};
use crate::localize::{build_schedule_smooth, run_smooth, DriverOptions, ScheduleInputs};
use crate::model::{Domain, ParamVector, RunLedger};
use crate::privacy::{ledger_compose, PrivacyBudget};
use crate::problems::{gen_heterogeneous_quadratic, loss_eval, LossKind, LossOracle, QuadraticSpec, Sample, SampleLoss};
use crate::smoothing::{MoreauOracle, ProxMode};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Runs every check; all use fixed seeds.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("projection", projection),
        check("gradient_finite_difference", gradient_fd),
        check("moreau_sandwich", moreau_sandwich),
        check("schedule_identities", schedule_identities),
        check("localized_run_ledger", localized_run),
        check("availability_independence", availability),
    ]
}

fn projection() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dom = Domain::ball(ParamVector::from(vec![0.5, -0.5, 0.0]), 1.5)?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (random_vec(&mut rng, 3, 5.0), random_vec(&mut rng, 3, 5.0));
        let (pa, pb) = (dom.project(&a)?, dom.project(&b)?);
        let twice = dom.project(&pa)?;
        worst = worst.max(twice.dist(&pa));
        // nonexpansive
        worst = worst.max(pa.dist(&pb) - ParamVector::from(a).dist(&b));
        if !dom.contains(&pa, 1e-12) {
            return Ok((false, "projection left the ball".into()));
        }
    }
    Ok((worst <= 1e-12, format!("max violation {worst:.3e}")))
}

fn gradient_fd() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dom = Domain::origin_ball(4, 2.0)?;
    let mut worst = 0.0f64;
    for kind in [LossKind::Quadratic, LossKind::Logistic] {
        let oracle = LossOracle::for_domain(kind, &dom, 1.0)?;
        for _ in 0..200 {
            let w = random_vec(&mut rng, 4, 1.0);
            let s = Sample::new(random_vec(&mut rng, 4, 0.5), if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            let (_, g) = loss_eval(&oracle, &w, &s)?;
            for j in 0..4 {
                let h = 1e-6;
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[j] += h;
                wm[j] -= h;
                let fd = (oracle.value(&wp, &s)? - oracle.value(&wm, &s)?) / (2.0 * h);
                worst = worst.max((fd - g[j]).abs());
            }
        }
    }
    Ok((worst < 1e-6, format!("max |fd - grad| {worst:.3e}")))
}

fn moreau_sandwich() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dom = Domain::origin_ball(3, 2.0)?;
    let mut worst = 0.0f64;
    for kind in [LossKind::Absolute, LossKind::Hinge] {
        let base = LossOracle::for_domain(kind, &dom, 1.0)?;
        let l = base.lipschitz;
        for &beta in &[0.5, 2.0, 10.0] {
            let env = MoreauOracle::new(base.clone(), beta, ProxMode::ClosedForm)?;
            for _ in 0..200 {
                let w = random_vec(&mut rng, 3, 1.5);
                let mut x = random_vec(&mut rng, 3, 1.0);
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx > 1.0 {
                    x.iter_mut().for_each(|v| *v /= nx);
                }
                let s = Sample::new(x, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                let f = base.value(&w, &s)?;
                let fb = env.value(&w, &s)?;
                worst = worst.max(fb - f).max(f - fb - l * l / (2.0 * beta));
            }
        }
    }
    Ok((worst <= 1e-9, format!("max sandwich violation {worst:.3e}")))
}

fn schedule_identities() -> Result<(bool, String)> {
    let inputs = ScheduleInputs {
        lipschitz: 2.0,
        diameter: 3.0,
        beta: 1.0,
        n_silos: 8,
        m_available: 8,
        n: 1000,
        dim: 10,
        budget: PrivacyBudget::new(1.0, 1e-6)?,
        batch_policy: Default::default(),
        multiplier: 1.0,
    };
    let s = build_schedule_smooth(&inputs)?;
    let ratio_ok = s.phases.windows(2).all(|w| w[1].lambda / w[0].lambda == 2f64.powf(s.p));
    let halving_ok = s.phases.iter().enumerate().all(|(i, p)| p.n == s.n_used >> (i + 1));
    let radius_ok = s.phases.iter().all(|p| (p.diameter * p.lambda - 4.0).abs() < 1e-12);
    let total_ok = s.phases.iter().map(|p| p.n).sum::<usize>() <= inputs.n;
    Ok((
        ratio_ok && halving_ok && radius_ok && total_ok,
        format!("tau={} p={} ratio={ratio_ok} halving={halving_ok} radius={radius_ok} total={total_ok}", s.tau, s.p),
    ))
}

fn localized_run() -> Result<(bool, String)> {
    let problem = gen_heterogeneous_quadratic(&QuadraticSpec::new(4, 64, 3, 1.0, 7))?;
    let budget = PrivacyBudget::new(2.0, 1.0 / 4096.0)?;
    let go = || -> Result<(ParamVector, RunLedger, u64, u64)> {
        let mut fed = Federation::new(FederationConfig::full(4, 11))?;
        let mut ledger = RunLedger::new();
        let (out, schedule) = run_smooth(&problem, budget, &DriverOptions::default(), &mut fed, &mut ledger)?;
        Ok((out.w, ledger, schedule.total_rounds(), schedule.total_grad_calls()))
    };
    let (w, ledger, rounds, calls) = go()?;
    let (w2, _, _, _) = go()?;
    let composed = ledger_compose(&ledger)?;
    let counters = ledger.comm_rounds() == rounds && ledger.grad_calls() == calls;
    let privacy = composed == budget;
    let reproducible = w.iter().zip(w2.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        counters && privacy && reproducible,
        format!("rounds={} counters={counters} privacy={privacy} reproducible={reproducible}", ledger.comm_rounds()),
    ))
}

fn availability() -> Result<(bool, String)> {
    let a = FederationConfig::partial(25, 18, 5);
    let b = FederationConfig { seed_noise: 12345, ..a };
    let same = (0..500).all(|r| sample_available(&a, r) == sample_available(&b, r));
    Ok((same, format!("identical over 500 rounds: {same}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
