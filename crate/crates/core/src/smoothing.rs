//! Moreau-envelope and randomized convolution smoothing of non-smooth
//! per-sample losses, with the parameter choosers that go with them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Error, Result};
use crate::model::{axpy, dot, norm, ParamVector};
use crate::privacy::PrivacyBudget;
use crate::problems::{LossKind, LossOracle, Sample, SampleLoss};

pub const PROX_TOL: f64 = 1e-9;
pub const PROX_MAX_ITERS: usize = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxMode {
    /// Soft-threshold style formulas (quadratic, absolute, hinge).
    ClosedForm,
    /// Numerical solve of the strongly convex prox objective.
    InnerSolve { tol: f64 },
}

/// `f_β(w) = min_v f(v) + (β/2)|w - v|²` applied per sample. The prox is
/// taken over all of `R^d`, so the envelope keeps the base Lipschitz
/// constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoreauOracle {
    pub base: LossOracle,
    pub beta: f64,
    pub prox_mode: ProxMode,
}

impl MoreauOracle {
    pub fn new(base: LossOracle, beta: f64, prox_mode: ProxMode) -> Result<Self> {
        require_positive("beta", beta)?;
        if let ProxMode::InnerSolve { tol } = prox_mode {
            require_positive("tol", tol)?;
        }
        if prox_mode == ProxMode::ClosedForm && base.kind == LossKind::Logistic {
            return Err(Error::MissingCapability("logistic loss has no closed-form prox; use inner_solve".into()));
        }
        Ok(Self { base, beta, prox_mode })
    }

    /// `argmin_v f(v, x) + (β/2)|v - w|²`.
    pub fn prox(&self, w: &[f64], sample: &Sample) -> Result<ParamVector> {
        self.base.value(w, sample)?;
        match self.prox_mode {
            ProxMode::ClosedForm => Ok(self.prox_closed(w, sample)),
            ProxMode::InnerSolve { tol } => self.prox_inner(w, sample, tol),
        }
    }

    fn prox_closed(&self, w: &[f64], s: &Sample) -> ParamVector {
        let b = self.beta;
        let a = &s.features;
        let q = dot(a, a);
        let mut v = w.to_vec();
        match self.base.kind {
            LossKind::Quadratic => {
                for (vi, xi) in v.iter_mut().zip(a) {
                    *vi = (b * *vi + xi) / (b + 1.0);
                }
            }
            LossKind::Absolute => {
                if q > 0.0 {
                    let r = dot(a, w) - s.label;
                    let theta = if r > q / b {
                        1.0 / b
                    } else if r < -q / b {
                        -1.0 / b
                    } else {
                        r / q
                    };
                    axpy(-theta, a, &mut v);
                }
            }
            LossKind::Hinge => {
                if q > 0.0 {
                    let m = 1.0 - s.label * dot(a, w);
                    let theta = if m <= 0.0 {
                        0.0
                    } else if m >= q / b {
                        1.0 / b
                    } else {
                        m / q
                    };
                    axpy(theta * s.label, a, &mut v);
                }
            }
            LossKind::Logistic => unreachable!("rejected at construction"),
        }
        ParamVector::from(v)
    }

    fn prox_inner(&self, w: &[f64], s: &Sample, tol: f64) -> Result<ParamVector> {
        let b = self.beta;
        if self.base.kind == LossKind::Quadratic {
            // Gradient descent with step 1/(1 + β) on the prox objective.
            let mut v = w.to_vec();
            let mut g = vec![0.0; v.len()];
            for _ in 0..PROX_MAX_ITERS {
                g.iter_mut().zip(&v).zip(w).for_each(|((gi, vi), wi)| *gi = b * (vi - wi));
                self.base.add_grad(&v, s, 1.0, &mut g)?;
                if norm(&g) <= tol {
                    return Ok(ParamVector::from(v));
                }
                axpy(-1.0 / (1.0 + b), &g, &mut v);
            }
            return Err(Error::ProxStalled {
                iterations: PROX_MAX_ITERS,
                residual: norm(&g),
            });
        }
        // Linear-model losses: the prox moves along the feature vector by
        // at most 1/β, so bisect the monotone directional subgradient.
        let a = &s.features;
        let q = dot(a, a);
        if q == 0.0 {
            return Ok(ParamVector::from_slice(w));
        }
        let mut point = vec![0.0; w.len()];
        let mut g = vec![0.0; w.len()];
        let mut slope = |theta: f64| -> Result<f64> {
            point.iter_mut().zip(w).zip(a).for_each(|((p, wi), ai)| *p = wi + theta * ai);
            g.iter_mut().for_each(|x| *x = 0.0);
            self.base.add_grad(&point, s, 1.0, &mut g)?;
            Ok(dot(&g, a) + b * theta * q)
        };
        let (mut lo, mut hi) = (-2.0 / b, 2.0 / b);
        let mut iterations = 0;
        while hi - lo > tol / q.sqrt() {
            if iterations == PROX_MAX_ITERS {
                return Err(Error::ProxStalled {
                    iterations,
                    residual: (hi - lo) * q.sqrt(),
                });
            }
            let mid = 0.5 * (lo + hi);
            let d = slope(mid)?;
            if d > 0.0 {
                hi = mid;
            } else if d < 0.0 {
                lo = mid;
            } else {
                lo = mid;
                hi = mid;
            }
            iterations += 1;
        }
        let theta = 0.5 * (lo + hi);
        let mut v = w.to_vec();
        axpy(theta, a, &mut v);
        Ok(ParamVector::from(v))
    }

    /// Envelope value `f(p) + (β/2)|w - p|²` and gradient `β(w - p)` with
    /// `p` the prox point.
    pub fn value_grad(&self, w: &[f64], sample: &Sample) -> Result<(f64, ParamVector)> {
        let p = self.prox(w, sample)?;
        let d2: f64 = w.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = self.base.value(&p, sample)? + 0.5 * self.beta * d2;
        let grad: Vec<f64> = w.iter().zip(p.iter()).map(|(a, b)| self.beta * (a - b)).collect();
        Ok((value, ParamVector::from(grad)))
    }
}

/// Free-function form of [`MoreauOracle::prox`].
pub fn prox(oracle: &MoreauOracle, w: &[f64], sample: &Sample) -> Result<ParamVector> {
    oracle.prox(w, sample)
}

/// Free-function form of [`MoreauOracle::value_grad`].
pub fn moreau_value_grad(oracle: &MoreauOracle, w: &[f64], sample: &Sample) -> Result<(f64, ParamVector)> {
    oracle.value_grad(w, sample)
}

impl SampleLoss for MoreauOracle {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn lipschitz(&self) -> f64 {
        self.base.lipschitz
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.beta)
    }

    fn value(&self, w: &[f64], sample: &Sample) -> Result<f64> {
        Ok(self.value_grad(w, sample)?.0)
    }

    fn add_grad(&self, w: &[f64], sample: &Sample, scale: f64, out: &mut [f64]) -> Result<()> {
        let p = self.prox(w, sample)?;
        for ((o, wi), pi) in out.iter_mut().zip(w).zip(p.iter()) {
            *o += scale * self.beta * (wi - pi);
        }
        Ok(())
    }
}

/// `f̃_s(w) = E_v f(w + v)` with `v` uniform on the radius-`s` ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvSmoother {
    pub base: LossOracle,
    pub s: f64,
}

impl ConvSmoother {
    pub fn new(base: LossOracle, s: f64) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(invalid("s", format!("must be finite and >= 0, got {s}")));
        }
        Ok(Self { base, s })
    }

    /// Lipschitz bound over the domain enlarged by `s`: only the quadratic
    /// loss depends on where `w` sits.
    pub fn lipschitz(&self) -> f64 {
        match self.base.kind {
            LossKind::Quadratic => self.base.lipschitz + self.s,
            _ => self.base.lipschitz,
        }
    }

    /// `L √d / s`, infinite at `s = 0`.
    pub fn smoothness(&self) -> f64 {
        self.lipschitz() * (self.base.dim as f64).sqrt() / self.s
    }
}

/// Uniform draw from the radius-`s` ball in `R^d`: a normalized Gaussian
/// direction scaled by `s · U^{1/d}`.
pub fn sample_uniform_ball(dim: usize, s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let r = norm(&v);
    let u: f64 = rng.gen();
    let scale = if r > 0.0 { s * u.powf(1.0 / dim as f64) / r } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Poisson-sampled estimate of `∇[F̃_s + (λ/2)|· - center|²]` at `w`
/// before privacy noise: `(1/K) Σ_j Z_j ∇f(w + v_j, x_j) + λ(w - center)`
/// with `Z_j ~ Bernoulli(K/n)`. Also returns the realized number of
/// gradient evaluations.
pub fn conv_smooth_grad_estimate(
    smoother: &ConvSmoother,
    w: &[f64],
    data: &[Sample],
    k: usize,
    reg: Option<(f64, &[f64])>,
    rng: &mut impl Rng,
) -> Result<(ParamVector, u64)> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(invalid("K", format!("must lie in [1, {n}], got {k}")));
    }
    let d = smoother.base.dim;
    if w.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w.len() });
    }
    let rate = k as f64 / n as f64;
    let mut g = vec![0.0; d];
    let mut point = vec![0.0; d];
    let mut calls = 0u64;
    for x in data {
        if rate < 1.0 && rng.gen::<f64>() >= rate {
            continue;
        }
        let v = if smoother.s > 0.0 {
            sample_uniform_ball(d, smoother.s, rng)
        } else {
            vec![0.0; d]
        };
        point.iter_mut().zip(w).zip(&v).for_each(|((p, wi), vi)| *p = wi + vi);
        smoother.base.add_grad(&point, x, 1.0 / k as f64, &mut g)?;
        calls += 1;
    }
    if let Some((lambda, center)) = reg {
        for ((gi, wi), ci) in g.iter_mut().zip(w).zip(center) {
            *gi += lambda * (wi - ci);
        }
    }
    Ok((ParamVector::from(g), calls))
}

/// Envelope smoothness `(L √M / D) min{√n, εn / √(d ln(1/δ))}`.
pub fn choose_beta_nesterov(l: f64, diameter: f64, m: usize, n: usize, d: usize, budget: &PrivacyBudget) -> Result<f64> {
    require_positive("lipschitz", l)?;
    require_positive("diameter", diameter)?;
    budget.validate()?;
    let (m, n, d) = (m as f64, n as f64, d as f64);
    let private = budget.epsilon * n / (d * (1.0 / budget.delta).ln()).sqrt();
    Ok(l * m.sqrt() / diameter * n.sqrt().min(private))
}

/// Convolution radius `(D / √M)(1/√n + √(d ln(1/δ)) / (εn))`.
pub fn choose_s_conv(diameter: f64, m: usize, n: usize, d: usize, budget: &PrivacyBudget) -> Result<f64> {
    require_positive("diameter", diameter)?;
    budget.validate()?;
    let (m, n, d) = (m as f64, n as f64, d as f64);
    let private = (d * (1.0 / budget.delta).ln()).sqrt() / (budget.epsilon * n);
    Ok(diameter / m.sqrt() * (1.0 / n.sqrt() + private))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abs_oracle(beta: f64, mode: ProxMode) -> MoreauOracle {
        let base = LossOracle::for_domain(LossKind::Absolute, &Domain::origin_ball(1, 1.0).unwrap(), 1.0).unwrap();
        MoreauOracle::new(base, beta, mode).unwrap()
    }

    #[test]
    fn absolute_prox_soft_threshold() {
        let o = abs_oracle(2.0, ProxMode::ClosedForm);
        let s = Sample::new(vec![1.0], 0.0);
        assert_eq!(&*o.prox(&[0.25], &s).unwrap(), &[0.0]);
        assert_eq!(&*o.prox(&[2.0], &s).unwrap(), &[1.5]);
        let (v, g) = o.value_grad(&[0.25], &s).unwrap();
        assert!((v - 0.0625).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!(v <= 0.25 && 0.25 <= v + 1.0 / 4.0);
    }

    #[test]
    fn quadratic_prox() {
        let base = LossOracle::for_domain(LossKind::Quadratic, &Domain::origin_ball(2, 1.0).unwrap(), 1.0).unwrap();
        let s = Sample::point(vec![0.4, -0.2]);
        let w = [1.0, 0.5];
        let beta = 3.0;
        let closed = MoreauOracle::new(base.clone(), beta, ProxMode::ClosedForm).unwrap().prox(&w, &s).unwrap();
        for i in 0..2 {
            assert!((closed[i] - (beta * w[i] + s.features[i]) / (beta + 1.0)).abs() < 1e-15);
        }
        let inner = MoreauOracle::new(base, beta, ProxMode::InnerSolve { tol: 1e-12 }).unwrap().prox(&w, &s).unwrap();
        assert!(closed.dist(&inner) < 1e-10);
    }

    #[test]
    fn logistic_requires_inner_solve() {
        let base = LossOracle::for_domain(LossKind::Logistic, &Domain::origin_ball(2, 1.0).unwrap(), 1.0).unwrap();
        assert!(matches!(
            MoreauOracle::new(base.clone(), 1.0, ProxMode::ClosedForm),
            Err(Error::MissingCapability(_))
        ));
        let o = MoreauOracle::new(base, 2.0, ProxMode::InnerSolve { tol: 1e-12 }).unwrap();
        let s = Sample::new(vec![0.6, 0.3], 1.0);
        let w = [0.1, -0.2];
        let p = o.prox(&w, &s).unwrap();
        // Stationarity: ∇f(p) + β(p - w) = 0.
        let mut g: Vec<f64> = p.iter().zip(&w).map(|(pi, wi)| 2.0 * (pi - wi)).collect();
        o.base.add_grad(&p, &s, 1.0, &mut g).unwrap();
        assert!(norm(&g) < 1e-10);
    }

    #[test]
    fn hinge_inner_matches_closed() {
        let base = LossOracle::for_domain(LossKind::Hinge, &Domain::origin_ball(3, 2.0).unwrap(), 1.0).unwrap();
        let closed = MoreauOracle::new(base.clone(), 1.7, ProxMode::ClosedForm).unwrap();
        let inner = MoreauOracle::new(base, 1.7, ProxMode::InnerSolve { tol: PROX_TOL }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = sample_uniform_ball(3, 1.0, &mut rng);
            let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let s = Sample::new(a, y);
            let p1 = closed.prox(&w, &s).unwrap();
            let p2 = inner.prox(&w, &s).unwrap();
            assert!(p1.dist(&p2) < 1e-7);
        }
    }

    #[test]
    fn ball_sampler_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [1, 2, 7] {
            for _ in 0..1000 {
                assert!(norm(&sample_uniform_ball(d, 0.3, &mut rng)) <= 0.3);
            }
        }
    }

    #[test]
    fn chooser_examples() {
        let b = PrivacyBudget::new(1.0, 1e-4).unwrap();
        let beta = choose_beta_nesterov(1.0, 1.0, 4, 100, 50, &b).unwrap();
        let expected = 2.0 * 100.0 / (50.0 * 1e4f64.ln()).sqrt();
        assert!((beta - expected).abs() < 1e-12);
        assert!((beta - 9.32).abs() < 0.01);
        assert_eq!(choose_beta_nesterov(3.0, 1.0, 4, 100, 50, &b).unwrap(), 3.0 * beta);

        let s = choose_s_conv(1.0, 4, 100, 50, &b).unwrap();
        assert!((s - 0.1573).abs() < 1e-4);
        assert!((50f64.sqrt() / s - 44.95).abs() < 0.01);
        assert!((choose_s_conv(1.0, 16, 100, 50, &b).unwrap() - s / 2.0).abs() < 1e-15);
    }

    #[test]
    fn conv_estimator_rejects_large_batch() {
        let base = LossOracle::for_domain(LossKind::Absolute, &Domain::origin_ball(1, 1.0).unwrap(), 1.0).unwrap();
        let sm = ConvSmoother::new(base, 0.5).unwrap();
        let data = vec![Sample::new(vec![1.0], 0.0); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(conv_smooth_grad_estimate(&sm, &[0.0], &data, 4, None, &mut rng).is_err());
        assert!(conv_smooth_grad_estimate(&sm, &[0.0], &data, 0, None, &mut rng).is_err());
    }

    #[test]
    fn conv_estimator_degenerate_radius_is_minibatch_mean() {
        let base = LossOracle::for_domain(LossKind::Quadratic, &Domain::origin_ball(2, 1.0).unwrap(), 1.0).unwrap();
        let sm = ConvSmoother::new(base, 0.0).unwrap();
        let data: Vec<Sample> = (0..4).map(|i| Sample::point(vec![i as f64 * 0.1, 0.2])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, calls) = conv_smooth_grad_estimate(&sm, &[0.5, 0.5], &data, 4, Some((0.0, &[0.0, 0.0])), &mut rng).unwrap();
        assert_eq!(calls, 4);
        assert!((g[0] - (0.5 - 0.15)).abs() < 1e-15);
        assert!((g[1] - 0.3).abs() < 1e-15);
    }
}
