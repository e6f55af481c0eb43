//! Shared numeric types: model points, the Euclidean-ball feasible set with
//! its projections, and the run ledger every algorithm writes into.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for intersection projections.
pub const INTERSECTION_TOL: f64 = 1e-10;
/// Iteration cap for the alternating-projection intersection solve.
pub const INTERSECTION_MAX_ITERS: usize = 10_000;

/// A point in model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Builds a vector, rejecting non-finite coordinates.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(bad) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::Contract(format!("non-finite coordinate {bad}")));
        }
        Ok(Self(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self(coords.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dist(&self, other: &[f64]) -> f64 {
        dist(&self.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `out += scale * x`
pub(crate) fn axpy(scale: f64, x: &[f64], out: &mut [f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += scale * xi;
    }
}

/// Closed Euclidean ball `{w : |w - center| <= radius}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub center: ParamVector,
    pub radius: f64,
}

impl Domain {
    pub fn ball(center: ParamVector, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Contract(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        if !center.is_finite() {
            return Err(Error::Contract("ball center must be finite".into()));
        }
        Ok(Self { center, radius })
    }

    /// Ball of the given radius around the origin.
    pub fn origin_ball(dim: usize, radius: f64) -> Result<Self> {
        Self::ball(ParamVector::zeros(dim), radius)
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        dist(w, &self.center) <= self.radius + tol
    }

    /// Largest norm of any point in the ball.
    pub fn max_norm(&self) -> f64 {
        self.center.norm() + self.radius
    }

    /// Euclidean projection onto the ball.
    pub fn project(&self, z: &[f64]) -> Result<ParamVector> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let mut out = z.to_vec();
        self.project_in_place(&mut out);
        Ok(ParamVector(out))
    }

    pub(crate) fn project_in_place(&self, z: &mut [f64]) {
        let r = dist(z, &self.center);
        if r <= self.radius {
            return;
        }
        let scale = self.radius / r;
        for (zi, ci) in z.iter_mut().zip(self.center.iter()) {
            *zi = ci + scale * (*zi - ci);
        }
    }
}

/// Exact projection onto `outer ∩ inner`.
///
/// If projecting onto one ball lands in the other, that is the answer.
/// Otherwise both constraints are active and the projection is the nearest
/// point of the sphere where the two boundary spheres meet. `tol` is the
/// feasibility slack accepted for the single-ball shortcuts.
pub fn project_intersection(outer: &Domain, inner: &Domain, z: &[f64], tol: f64) -> Result<ParamVector> {
    let d = outer.dim();
    if inner.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: inner.dim(),
        });
    }
    if z.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: z.len() });
    }
    let gap = outer.center.dist(&inner.center);
    if gap > outer.radius + inner.radius {
        return Err(Error::InfeasibleDomain(format!(
            "balls are {gap} apart with radii {} and {}",
            outer.radius, inner.radius
        )));
    }
    let via_inner = inner.project(z)?;
    if outer.contains(&via_inner, tol) {
        return Ok(via_inner);
    }
    let via_outer = outer.project(z)?;
    if inner.contains(&via_outer, tol) {
        return Ok(via_outer);
    }
    // Neither ball contains the other here, so gap > 0.
    let (c1, r1, r2) = (&outer.center, outer.radius, inner.radius);
    let u: Vec<f64> = inner.center.iter().zip(c1.iter()).map(|(b, a)| (b - a) / gap).collect();
    let t = (gap * gap + r1 * r1 - r2 * r2) / (2.0 * gap);
    let rho = (r1 * r1 - t * t).max(0.0).sqrt();
    let h: Vec<f64> = c1.iter().zip(&u).map(|(c, ui)| c + t * ui).collect();
    let along: f64 = z.iter().zip(&h).zip(&u).map(|((zi, hi), ui)| (zi - hi) * ui).sum();
    let mut v: Vec<f64> = z.iter().zip(&h).zip(&u).map(|((zi, hi), ui)| zi - hi - along * ui).collect();
    let mut vn = norm(&v);
    if vn == 0.0 {
        // z sits on the axis: every point of the circle is equally close.
        let k = (0..d).min_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap_or(0);
        v = u.iter().map(|ui| -u[k] * ui).collect();
        v[k] += 1.0;
        vn = norm(&v);
    }
    Ok(ParamVector(h.iter().zip(&v).map(|(hi, vi)| hi + rho * vi / vn).collect()))
}

/// Projection onto `outer ∩ inner` by Dykstra's alternating projections.
/// Kept as an independent route for cross-checking [`project_intersection`].
///
/// Stops once successive iterates move less than `tol`; fails with a
/// diagnostic after [`INTERSECTION_MAX_ITERS`] sweeps.
pub fn dykstra_intersection(outer: &Domain, inner: &Domain, z: &[f64], tol: f64) -> Result<ParamVector> {
    let d = outer.dim();
    if inner.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: inner.dim(),
        });
    }
    if z.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: z.len() });
    }
    let gap = outer.center.dist(&inner.center);
    if gap > outer.radius + inner.radius {
        return Err(Error::InfeasibleDomain(format!(
            "balls are {gap} apart with radii {} and {}",
            outer.radius, inner.radius
        )));
    }
    if outer.contains(z, 0.0) && inner.contains(z, 0.0) {
        return Ok(ParamVector(z.to_vec()));
    }
    // A single projection that lands in the other ball is already the answer.
    let via_inner = inner.project(z)?;
    if outer.contains(&via_inner, 0.0) {
        return Ok(via_inner);
    }
    let via_outer = outer.project(z)?;
    if inner.contains(&via_outer, 0.0) {
        return Ok(via_outer);
    }

    let mut x = z.to_vec();
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut last_move = f64::INFINITY;
    for _ in 0..INTERSECTION_MAX_ITERS {
        for k in 0..d {
            y[k] = x[k] + p[k];
        }
        outer.project_in_place(&mut y);
        for k in 0..d {
            p[k] = x[k] + p[k] - y[k];
            next[k] = y[k] + q[k];
        }
        inner.project_in_place(&mut next);
        for k in 0..d {
            q[k] = y[k] + q[k] - next[k];
        }
        last_move = dist(&next, &x);
        std::mem::swap(&mut x, &mut next);
        if last_move < tol && dist(&x, &y) < tol {
            return Ok(ParamVector(x));
        }
    }
    Err(Error::ProjectionStalled {
        iterations: INTERSECTION_MAX_ITERS,
        last_move,
    })
}

/// The feasible set of one solver call: the outer ball, optionally
/// intersected with a localization ball.
#[derive(Clone, Debug)]
pub struct PhaseDomain {
    pub outer: Domain,
    pub inner: Option<Domain>,
}

impl PhaseDomain {
    pub fn new(outer: Domain, inner: Option<Domain>) -> Self {
        Self { outer, inner }
    }

    pub fn project(&self, z: &[f64]) -> Result<ParamVector> {
        match &self.inner {
            None => self.outer.project(z),
            Some(inner) => project_intersection(&self.outer, inner, z, INTERSECTION_TOL),
        }
    }

    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        self.outer.contains(w, tol) && self.inner.as_ref().is_none_or(|b| b.contains(w, tol))
    }
}

/// One privacy-accounting entry: a silo's participation in one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEntry {
    pub silo_id: usize,
    pub phase_id: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub sigma2: f64,
    /// Local sample indices the phase may touch.
    pub batch_indices: Vec<usize>,
}

/// A single communication round, as kept in the optional transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub silos: Vec<usize>,
    pub grad_calls: u64,
    pub grad_norm: Option<f64>,
}

/// Communication and gradient counters plus the privacy ledger of a run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunLedger {
    comm_rounds: u64,
    grad_calls: u64,
    pub privacy_entries: Vec<PrivacyEntry>,
    transcript: Option<Vec<RoundRecord>>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that also keeps a per-round transcript.
    pub fn with_transcript() -> Self {
        Self {
            transcript: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn comm_rounds(&self) -> u64 {
        self.comm_rounds
    }

    pub fn grad_calls(&self) -> u64 {
        self.grad_calls
    }

    pub fn transcript(&self) -> Option<&[RoundRecord]> {
        self.transcript.as_deref()
    }

    /// Counts one communication round in which every contacted silo
    /// evaluated `per_silo_grad_evals` per-sample gradients.
    pub fn record_round(&mut self, silos_contacted: u64, per_silo_grad_evals: u64) {
        self.comm_rounds += 1;
        self.grad_calls += silos_contacted * per_silo_grad_evals;
    }

    /// Counts one round with per-silo realized gradient counts and, when a
    /// transcript is kept, appends it.
    pub fn record_round_detail(&mut self, silos: &[usize], grad_calls: &[u64], grad_norm: Option<f64>) {
        let total: u64 = grad_calls.iter().sum();
        let round = self.comm_rounds;
        self.comm_rounds += 1;
        self.grad_calls += total;
        if let Some(t) = self.transcript.as_mut() {
            t.push(RoundRecord {
                round,
                silos: silos.to_vec(),
                grad_calls: total,
                grad_norm,
            });
        }
    }

    pub fn add_privacy_entry(&mut self, entry: PrivacyEntry) {
        self.privacy_entries.push(entry);
    }

    /// Writes the transcript as CSV (`round,silos,grad_calls,grad_norm`).
    pub fn write_transcript_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "silos", "grad_calls", "grad_norm"])?;
        for r in self.transcript.iter().flatten() {
            let silos = r.silos.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
            let norm = r.grad_norm.map(|g| g.to_string()).unwrap_or_default();
            w.write_record([r.round.to_string(), silos, r.grad_calls.to_string(), norm])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the privacy entries as CSV (`silo_id,phase,epsilon,delta,sigma2`).
    pub fn write_privacy_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["silo_id", "phase", "epsilon", "delta", "sigma2"])?;
        for e in &self.privacy_entries {
            w.write_record([
                e.silo_id.to_string(),
                e.phase_id.to_string(),
                e.epsilon.to_string(),
                e.delta.to_string(),
                e.sigma2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(c: &[f64], r: f64) -> Domain {
        Domain::ball(ParamVector::from_slice(c), r).unwrap()
    }

    #[test]
    fn projection_examples() {
        let unit = ball(&[0.0, 0.0], 1.0);
        let p = unit.project(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(&*unit.project(&[0.2, 0.1]).unwrap(), &[0.2, 0.1]);
        let shifted = ball(&[1.0, 0.0], 2.0);
        assert_eq!(&*shifted.project(&[5.0, 0.0]).unwrap(), &[3.0, 0.0]);
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let unit = ball(&[0.0, 0.0], 1.0);
        assert!(matches!(
            unit.project(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn intersection_inner_binds() {
        let p = project_intersection(&ball(&[0.0, 0.0], 10.0), &ball(&[0.0, 0.0], 1.0), &[5.0, 0.0], 1e-10).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn intersection_feasible_point_fixed() {
        let p = project_intersection(&ball(&[0.0, 0.0], 1.0), &ball(&[0.5, 0.0], 1.0), &[0.1, 0.0], 1e-10).unwrap();
        assert_eq!(&*p, &[0.1, 0.0]);
    }

    #[test]
    fn intersection_empty_is_infeasible() {
        let err = project_intersection(&ball(&[0.0, 0.0], 1.0), &ball(&[3.0, 0.0], 1.0), &[0.0, 0.0], 1e-10);
        assert!(matches!(err, Err(Error::InfeasibleDomain(_))));
    }

    #[test]
    fn intersection_lens_matches_dykstra() {
        let outer = ball(&[0.0, 0.0, 0.0], 1.0);
        let inner = ball(&[1.2, 0.3, 0.0], 1.0);
        for z in [[0.0, 2.0, 0.0], [0.5, -1.5, 1.0], [3.0, 3.0, -3.0], [0.6, 0.15, 5.0]] {
            let exact = project_intersection(&outer, &inner, &z, 1e-12).unwrap();
            let dyk = dykstra_intersection(&outer, &inner, &z, 1e-12).unwrap();
            assert!(exact.dist(&dyk) < 1e-8, "{z:?}: {exact:?} vs {dyk:?}");
            assert!(outer.contains(&exact, 1e-12) && inner.contains(&exact, 1e-12));
        }
    }

    #[test]
    fn intersection_on_axis() {
        let outer = ball(&[0.0, 0.0], 1.0);
        let inner = ball(&[1.5, 0.0], 1.0);
        let p = project_intersection(&outer, &inner, &[5.0, 0.0], 1e-12).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = project_intersection(&outer, &inner, &[-5.0, 0.0], 1e-12).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn ledger_counts() {
        let mut l = RunLedger::new();
        l.record_round(4, 8);
        assert_eq!((l.comm_rounds(), l.grad_calls()), (1, 32));

        let mut l = RunLedger::new();
        for _ in 0..257 {
            l.record_round(4, 1);
        }
        assert_eq!((l.comm_rounds(), l.grad_calls()), (257, 1028));

        let mut l = RunLedger::new();
        l.record_round(4, 25);
        for _ in 0..4 {
            l.record_round(0, 0);
        }
        assert_eq!((l.comm_rounds(), l.grad_calls()), (5, 100));
        l.record_round(0, 0);
        assert_eq!((l.comm_rounds(), l.grad_calls()), (6, 100));
    }

    #[test]
    fn transcript_is_opt_in() {
        let mut plain = RunLedger::new();
        plain.record_round_detail(&[0, 2], &[3, 3], Some(1.0));
        assert!(plain.transcript().is_none());

        let mut traced = RunLedger::with_transcript();
        traced.record_round_detail(&[0, 2], &[3, 4], None);
        let t = traced.transcript().unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].grad_calls, 7);
        assert_eq!(traced.grad_calls(), 7);
    }
}
