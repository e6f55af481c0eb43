//! Exact one-dimensional regularized ERM and the replace-one stability
//! check for strongly convex objectives.

use crate::error::{invalid, Error, Result};
use crate::problems::{Sample, SampleLoss};

/// Minimizer over ℝ of `(1/m) Σ_j f(w, x_j) + (λ/2)(w − c)²` for a
/// one-dimensional Lipschitz loss.
///
/// Bisection on the sign of a subgradient: strong convexity makes the sign
/// exact away from the minimizer, so this converges to full precision even
/// at kinks.
pub fn regularized_erm_1d(loss: &dyn SampleLoss, samples: &[Sample], lambda: f64, center: f64) -> Result<f64> {
    if loss.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: loss.dim(),
        });
    }
    if samples.is_empty() {
        return Err(invalid("samples", "need at least one sample"));
    }
    if !(lambda > 0.0) {
        return Err(invalid("lambda", "must be > 0"));
    }
    let l = loss.lipschitz();
    let slope = |w: f64| -> Result<f64> {
        let mut g = [0.0];
        let scale = 1.0 / samples.len() as f64;
        for s in samples {
            loss.add_grad(&[w], s, scale, &mut g)?;
        }
        Ok(g[0] + lambda * (w - center))
    };
    // |λ(ŵ − c)| ≤ L at the minimizer.
    let (mut lo, mut hi) = (center - l / lambda - 1.0, center + l / lambda + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Uniform argument stability bound `4L / (λ m)`.
pub fn stability_bound(lipschitz: f64, lambda: f64, m: usize) -> f64 {
    4.0 * lipschitz / (lambda * m as f64)
}

/// Largest `|ŵ^(i) − ŵ|` over every position `i` and every candidate
/// replacement sample.
pub fn max_replacement_shift(loss: &dyn SampleLoss, samples: &[Sample], candidates: &[Sample], lambda: f64) -> Result<f64> {
    let base = regularized_erm_1d(loss, samples, lambda, 0.0)?;
    let mut worst = 0.0f64;
    let mut swapped = samples.to_vec();
    for i in 0..samples.len() {
        for z in candidates {
            swapped[i] = z.clone();
            let w = regularized_erm_1d(loss, &swapped, lambda, 0.0)?;
            worst = worst.max((w - base).abs());
        }
        swapped[i] = samples[i].clone();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;
    use crate::problems::{LossKind, LossOracle};

    fn oracle(kind: LossKind) -> LossOracle {
        LossOracle::for_domain(kind, &Domain::origin_ball(1, 10.0).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn absolute_loss_median() {
        // f(w, (a, r)) = |a w − r| with a = 1 and tiny λ: the minimizer is
        // near the sample median.
        let s: Vec<Sample> = [0.1, 0.5, 0.9].iter().map(|&r| Sample::new(vec![1.0], r)).collect();
        let w = regularized_erm_1d(&oracle(LossKind::Absolute), &s, 1e-6, 0.0).unwrap();
        assert!((w - 0.5).abs() < 1e-9, "{w}");
    }

    #[test]
    fn strong_regularization_pins_center() {
        let s = vec![Sample::new(vec![1.0], 0.9)];
        let w = regularized_erm_1d(&oracle(LossKind::Absolute), &s, 100.0, 0.3).unwrap();
        // Subgradient of the loss is −1 on w < 0.9: w = c + 1/λ.
        assert!((w - 0.31).abs() < 1e-12);
    }

    #[test]
    fn replacement_shift_within_bound() {
        let s: Vec<Sample> = [0.2, -0.4, 0.7, 0.1].iter().map(|&r| Sample::new(vec![1.0], r)).collect();
        let cand: Vec<Sample> = [-1.0, 0.0, 1.0].iter().map(|&r| Sample::new(vec![1.0], r)).collect();
        let loss = oracle(LossKind::Absolute);
        let shift = max_replacement_shift(&loss, &s, &cand, 0.5).unwrap();
        assert!(shift <= stability_bound(loss.lipschitz, 0.5, s.len()));
    }
}
