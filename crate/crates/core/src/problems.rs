//! Per-sample convex losses and synthetic heterogeneous federated problems.
//!
//! Every problem carries the Lipschitz bound of its loss over the declared
//! domain and data radius. The bound is computed analytically, never
//! estimated, because noise calibration consumes it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{axpy, dist, dot, norm, Domain, ParamVector};

/// One data record: a feature vector and a label. Quadratic losses read
/// only the features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }

    pub fn point(features: Vec<f64>) -> Self {
        Self { features, label: 0.0 }
    }

    fn is_finite(&self) -> bool {
        self.label.is_finite() && self.features.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½|w - x|²`
    Quadratic,
    /// `ln(1 + exp(-y <w, a>))`, labels in {-1, +1}
    Logistic,
    /// `max(0, 1 - y <w, a>)`, labels in {-1, +1}
    Hinge,
    /// `|<w, a> - y|`
    Absolute,
}

impl LossKind {
    pub fn is_smooth(self) -> bool {
        matches!(self, LossKind::Quadratic | LossKind::Logistic)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(LossKind::Quadratic),
            "logistic" => Ok(LossKind::Logistic),
            "hinge" => Ok(LossKind::Hinge),
            "absolute" => Ok(LossKind::Absolute),
            other => Err(invalid("loss", format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Anything the solvers can query per sample: a value and a
/// (sub)gradient, plus the constants the schedules need.
pub trait SampleLoss: Sync {
    fn dim(&self) -> usize;
    fn lipschitz(&self) -> f64;
    fn smoothness(&self) -> Option<f64>;
    fn value(&self, w: &[f64], sample: &Sample) -> Result<f64>;
    /// `out += scale * g` where `g` is the gradient, or the fixed
    /// subgradient selection at kinks.
    fn add_grad(&self, w: &[f64], sample: &Sample, scale: f64, out: &mut [f64]) -> Result<()>;
}

/// A convex per-sample loss with its declared constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOracle {
    pub kind: LossKind,
    /// Upper bound on the (sub)gradient norm over the domain and data range.
    pub lipschitz: f64,
    /// Gradient Lipschitz constant for smooth kinds.
    pub beta: Option<f64>,
    pub dim: usize,
}

impl LossOracle {
    /// Derives `L` (and `β` for smooth kinds) from the domain and a bound on
    /// the sample feature norm.
    pub fn for_domain(kind: LossKind, domain: &Domain, data_radius: f64) -> Result<Self> {
        if !(data_radius >= 0.0) || !data_radius.is_finite() {
            return Err(invalid("data_radius", format!("must be finite and >= 0, got {data_radius}")));
        }
        let (lipschitz, beta) = match kind {
            LossKind::Quadratic => (domain.max_norm() + data_radius, Some(1.0)),
            LossKind::Logistic => (data_radius, Some(data_radius * data_radius / 4.0)),
            LossKind::Hinge | LossKind::Absolute => (data_radius, None),
        };
        if lipschitz <= 0.0 {
            return Err(invalid("lipschitz", "derived Lipschitz constant is zero; enlarge the data or domain radius"));
        }
        Ok(Self {
            kind,
            lipschitz,
            beta,
            dim: domain.dim(),
        })
    }

    /// Subgradient selection at `w`, written as `out += scale * g`.
    fn grad_into(&self, w: &[f64], s: &Sample, scale: f64, out: &mut [f64]) {
        match self.kind {
            LossKind::Quadratic => {
                for ((o, wi), xi) in out.iter_mut().zip(w).zip(&s.features) {
                    *o += scale * (wi - xi);
                }
            }
            LossKind::Logistic => {
                let margin = s.label * dot(w, &s.features);
                let coeff = -s.label * sigmoid(-margin);
                axpy(scale * coeff, &s.features, out);
            }
            LossKind::Hinge => {
                let slack = 1.0 - s.label * dot(w, &s.features);
                if slack > 0.0 {
                    axpy(-scale * s.label, &s.features, out);
                }
            }
            LossKind::Absolute => {
                let r = dot(w, &s.features) - s.label;
                if r != 0.0 {
                    axpy(scale * r.signum(), &s.features, out);
                }
            }
        }
    }

    fn value_unchecked(&self, w: &[f64], s: &Sample) -> f64 {
        match self.kind {
            LossKind::Quadratic => {
                let d = dist(w, &s.features);
                0.5 * d * d
            }
            LossKind::Logistic => softplus(-s.label * dot(w, &s.features)),
            LossKind::Hinge => (1.0 - s.label * dot(w, &s.features)).max(0.0),
            LossKind::Absolute => (dot(w, &s.features) - s.label).abs(),
        }
    }

    fn check(&self, w: &[f64], s: &Sample) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: w.len(),
            });
        }
        if s.features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: s.features.len(),
            });
        }
        if !w.iter().all(|v| v.is_finite()) || !s.is_finite() {
            return Err(Error::Contract("non-finite loss input".into()));
        }
        Ok(())
    }
}

impl SampleLoss for LossOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn smoothness(&self) -> Option<f64> {
        self.beta
    }

    fn value(&self, w: &[f64], sample: &Sample) -> Result<f64> {
        self.check(w, sample)?;
        Ok(self.value_unchecked(w, sample))
    }

    fn add_grad(&self, w: &[f64], sample: &Sample, scale: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(w.len(), self.dim);
        self.grad_into(w, sample, scale, out);
        Ok(())
    }
}

/// Value and (sub)gradient of one sample's loss.
pub fn loss_eval(loss: &LossOracle, w: &[f64], sample: &Sample) -> Result<(f64, ParamVector)> {
    loss.check(w, sample)?;
    let mut g = vec![0.0; loss.dim];
    loss.grad_into(w, sample, 1.0, &mut g);
    Ok((loss.value_unchecked(w, sample), ParamVector::from(g)))
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiloDataset {
    pub silo_id: usize,
    pub samples: Vec<Sample>,
    pub distribution_tag: String,
}

/// Closed-form population optimum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimum {
    pub w_star: ParamVector,
    pub f_star: f64,
}

/// What is known about the data-generating distributions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Population {
    /// Silo `i` draws `x = c_i + noise` with `E x = c_i` and
    /// `E|x - c_i|² = second_moments[i]`.
    Quadratic {
        centers: Vec<ParamVector>,
        second_moments: Vec<f64>,
    },
    /// Two labelled Gaussian clusters per silo.
    LabelClusters(LabelClusters),
    /// Only the finite sample is known (CSV ingestion).
    Empirical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelClusters {
    /// Class prototypes; class `k` carries label `+1` when `k` is odd.
    pub prototypes: Vec<ParamVector>,
    /// (odd class, even class) held by each silo.
    pub silo_classes: Vec<(usize, usize)>,
    pub noise: f64,
    pub radius: f64,
}

impl LabelClusters {
    fn draw(&self, silo: usize, rng: &mut impl Rng) -> Sample {
        let (odd, even) = self.silo_classes[silo];
        let (class, label) = if rng.gen_bool(0.5) { (odd, 1.0) } else { (even, -1.0) };
        let mut a: Vec<f64> = self.prototypes[class]
            .iter()
            .map(|p| p + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = norm(&a);
        if r > self.radius {
            let s = self.radius / r;
            a.iter_mut().for_each(|v| *v *= s);
        }
        Sample::new(a, label)
    }
}

/// `N` silo datasets with a shared loss and feasible set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederatedProblem {
    pub silos: Vec<SiloDataset>,
    pub loss: LossOracle,
    pub domain: Domain,
    pub optimum: Option<Optimum>,
    pub heterogeneity_zeta: Option<f64>,
    pub population: Population,
    /// Held-out samples for test error, when the task has labels.
    pub test_set: Vec<Sample>,
    /// Bound on every sample's feature norm.
    pub data_radius: f64,
}

impl FederatedProblem {
    pub fn n_silos(&self) -> usize {
        self.silos.len()
    }

    /// Samples per silo.
    pub fn n_per_silo(&self) -> usize {
        self.silos.first().map_or(0, |s| s.samples.len())
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Mean loss over every training sample of every silo.
    pub fn empirical_risk(&self, w: &[f64]) -> Result<f64> {
        self.empirical_risk_with(&self.loss, w)
    }

    pub fn empirical_risk_with(&self, loss: &dyn SampleLoss, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for silo in &self.silos {
            for s in &silo.samples {
                total += loss.value(w, s)?;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("problem has no samples".into()));
        }
        Ok(total / count as f64)
    }

    /// Fraction of held-out samples misclassified by `sign(<w, a>)`;
    /// a zero margin counts as an error.
    pub fn test_error(&self, w: &[f64]) -> Option<f64> {
        if self.test_set.is_empty() {
            return None;
        }
        let wrong = self
            .test_set
            .iter()
            .filter(|s| s.label * dot(w, &s.features) <= 0.0)
            .count();
        Some(wrong as f64 / self.test_set.len() as f64)
    }

    /// Excess population risk, when the optimum is known analytically.
    pub fn excess_risk(&self, w: &[f64]) -> Option<f64> {
        let opt = self.optimum.as_ref()?;
        match &self.population {
            Population::Quadratic { .. } => population_risk(self, w, None).ok().map(|r| r.value - opt.f_star),
            _ => None,
        }
    }

    /// Reassigns the pooled samples round-robin after a seeded shuffle, so
    /// every silo sees the same mixture. Pooled data are unchanged.
    pub fn repartition_iid(&self, seed: u64) -> FederatedProblem {
        let n_silos = self.n_silos();
        let n = self.n_per_silo();
        let mut pooled: Vec<Sample> = self.silos.iter().flat_map(|s| s.samples.iter().cloned()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..pooled.len()).rev() {
            let j = rng.gen_range(0..=i);
            pooled.swap(i, j);
        }
        let mut silos: Vec<SiloDataset> = (0..n_silos)
            .map(|i| SiloDataset {
                silo_id: i,
                samples: Vec::with_capacity(n),
                distribution_tag: "pooled-mixture".into(),
            })
            .collect();
        for (k, s) in pooled.into_iter().enumerate() {
            silos[k % n_silos].samples.push(s);
        }
        let population = match &self.population {
            Population::Quadratic { centers, second_moments } => {
                // Each silo now samples the mixture of the original silo laws.
                let d = self.dim();
                let mut mean = vec![0.0; d];
                for c in centers {
                    axpy(1.0 / centers.len() as f64, c, &mut mean);
                }
                let spread: f64 = centers.iter().map(|c| c.dist(&mean).powi(2)).sum::<f64>() / centers.len() as f64;
                let v = second_moments.iter().sum::<f64>() / second_moments.len() as f64 + spread;
                Population::Quadratic {
                    centers: vec![ParamVector::from(mean); n_silos],
                    second_moments: vec![v; n_silos],
                }
            }
            other => other.clone(),
        };
        let zeta = match &population {
            Population::Quadratic { .. } => Some(0.0),
            _ => None,
        };
        FederatedProblem {
            silos,
            population,
            heterogeneity_zeta: zeta,
            ..self.clone()
        }
    }
}

/// A population risk value; `std_error` is zero for exact evaluations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte-Carlo settings for non-analytic risks.
#[derive(Clone, Copy, Debug)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
}

/// `F(w) = (1/N) Σ_i F_i(w)`, exact for quadratic problems and Monte-Carlo
/// otherwise.
pub fn population_risk(problem: &FederatedProblem, w: &[f64], mc: Option<McSpec>) -> Result<RiskEstimate> {
    if w.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: w.len(),
        });
    }
    match &problem.population {
        Population::Quadratic { centers, second_moments } => {
            let total: f64 = centers
                .iter()
                .zip(second_moments)
                .map(|(c, v)| 0.5 * (c.dist(w).powi(2) + v))
                .sum();
            Ok(RiskEstimate {
                value: total / centers.len() as f64,
                std_error: 0.0,
            })
        }
        Population::LabelClusters(clusters) => {
            let mc = mc.ok_or_else(|| invalid("mc_samples", "required for non-analytic populations"))?;
            if mc.samples == 0 {
                return Err(invalid("mc_samples", "must be >= 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            let n_silos = clusters.silo_classes.len();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for k in 0..mc.samples {
                let s = clusters.draw(k % n_silos, &mut rng);
                let v = problem.loss.value(w, &s)?;
                sum += v;
                sum_sq += v * v;
            }
            let m = mc.samples as f64;
            let mean = sum / m;
            let var = if mc.samples > 1 {
                ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(RiskEstimate {
                value: mean,
                std_error: (var / m).sqrt(),
            })
        }
        Population::Empirical => Err(invalid("population", "no population model; use empirical_risk or test_error")),
    }
}

/// Settings for the heterogeneous quadratic generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n_silos: usize,
    pub n_per_silo: usize,
    pub dim: usize,
    /// Silo centers sit at distance `centers_spread / 2` from a shared
    /// offset point, in random directions.
    pub centers_spread: f64,
    /// Norm of the shared offset point (random direction).
    pub offset: f64,
    /// Per-coordinate standard deviation of samples around their center.
    pub sigma_x: f64,
    /// Samples are rejected unless within this radius of their center.
    pub truncation_radius: f64,
    pub domain_radius: f64,
    pub seed: u64,
}

impl QuadraticSpec {
    pub fn new(n_silos: usize, n_per_silo: usize, dim: usize, centers_spread: f64, seed: u64) -> Self {
        let sigma_x = 0.5 / (dim as f64).sqrt();
        Self {
            n_silos,
            n_per_silo,
            dim,
            centers_spread,
            offset: 0.0,
            sigma_x,
            truncation_radius: sigma_x * ((dim as f64).sqrt() + 4.0),
            domain_radius: 1.0 + centers_spread / 2.0,
            seed,
        }
    }
}

/// Samples silo centers for a spec: a shared offset plus independent
/// uniform directions scaled to `centers_spread / 2`.
fn random_centers(spec: &QuadraticSpec, rng: &mut ChaCha8Rng) -> Vec<ParamVector> {
    let mut direction = |length: f64| -> Vec<f64> {
        let mut u: Vec<f64> = (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = norm(&u);
        let scale = if r > 0.0 { length / r } else { 0.0 };
        u.iter_mut().for_each(|v| *v *= scale);
        u
    };
    let shift = direction(spec.offset);
    (0..spec.n_silos)
        .map(|_| {
            let mut c = direction(spec.centers_spread / 2.0);
            axpy(1.0, &shift, &mut c);
            ParamVector::from(c)
        })
        .collect()
}

/// Heterogeneous quadratic problem `f(w, x) = ½|w - x|²` with random silo
/// centers.
pub fn gen_heterogeneous_quadratic(spec: &QuadraticSpec) -> Result<FederatedProblem> {
    if spec.n_silos == 0 || spec.n_per_silo == 0 || spec.dim == 0 {
        return Err(invalid("spec", "silo count, samples per silo and dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = random_centers(spec, &mut rng);
    gen_quadratic_with_centers(spec, centers, &mut rng)
}

/// Quadratic problem with explicitly placed silo centers.
pub fn gen_quadratic_with_centers(
    spec: &QuadraticSpec,
    centers: Vec<ParamVector>,
    rng: &mut ChaCha8Rng,
) -> Result<FederatedProblem> {
    if centers.is_empty() || centers.iter().any(|c| c.dim() != spec.dim) {
        return Err(invalid("centers", "need one center of the spec dimension per silo"));
    }
    if !(spec.sigma_x >= 0.0) || !(spec.truncation_radius >= 0.0) {
        return Err(invalid("sigma_x", "noise scale and truncation radius must be >= 0"));
    }
    let d = spec.dim;
    let domain = Domain::origin_ball(d, spec.domain_radius)?;
    let second_moment = truncated_second_moment(d, spec.sigma_x, spec.truncation_radius);

    let mut silos = Vec::with_capacity(centers.len());
    let mut data_radius: f64 = 0.0;
    for (i, c) in centers.iter().enumerate() {
        let mut samples = Vec::with_capacity(spec.n_per_silo);
        for _ in 0..spec.n_per_silo {
            let x = draw_truncated(c, spec.sigma_x, spec.truncation_radius, rng);
            data_radius = data_radius.max(norm(&x));
            samples.push(Sample::point(x));
        }
        silos.push(SiloDataset {
            silo_id: i,
            samples,
            distribution_tag: format!("gauss-center-{i}"),
        });
    }
    // Declared radius bounds the law, not just the realized draws.
    let law_radius = centers.iter().map(|c| c.norm()).fold(0.0, f64::max) + spec.truncation_radius.min(if spec.sigma_x > 0.0 { f64::INFINITY } else { 0.0 });
    let data_radius = law_radius.max(data_radius);
    let loss = LossOracle::for_domain(LossKind::Quadratic, &domain, data_radius)?;

    let n_c = centers.len() as f64;
    let mut mean = vec![0.0; d];
    for c in &centers {
        axpy(1.0 / n_c, c, &mut mean);
    }
    let w_star = domain.project(&mean)?;
    let second_moments = vec![second_moment; centers.len()];
    let population = Population::Quadratic {
        centers: centers.clone(),
        second_moments,
    };
    let zeta2 = centers.iter().map(|c| c.dist(&w_star).powi(2)).sum::<f64>() / n_c;

    let mut problem = FederatedProblem {
        silos,
        loss,
        domain,
        optimum: None,
        heterogeneity_zeta: Some(zeta2.sqrt()),
        population,
        test_set: Vec::new(),
        data_radius,
    };
    let f_star = population_risk(&problem, &w_star, None)?.value;
    problem.optimum = Some(Optimum { w_star, f_star });
    Ok(problem)
}

/// `E|z|²` for `z ~ N(0, σ² I_d)` conditioned on `|z| <= ρ`.
pub fn truncated_second_moment(d: usize, sigma: f64, rho: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    if rho.is_infinite() {
        return sigma * sigma * d as f64;
    }
    let t = (rho / sigma).powi(2);
    let num = statrs::function::gamma::gamma_lr(d as f64 / 2.0 + 1.0, t / 2.0);
    let den = statrs::function::gamma::gamma_lr(d as f64 / 2.0, t / 2.0);
    sigma * sigma * d as f64 * num / den
}

fn draw_truncated(center: &[f64], sigma: f64, rho: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return center.to_vec();
    }
    loop {
        let z: Vec<f64> = center.iter().map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        if norm(&z) <= rho {
            return center.iter().zip(&z).map(|(c, e)| c + e).collect();
        }
    }
}

/// Settings for the two-class-per-silo labelled generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeteroLabelSpec {
    pub n_silos: usize,
    pub n_per_silo: usize,
    pub dim: usize,
    /// Held-out samples per silo.
    pub test_per_silo: usize,
    /// Prototype offset along the shared label direction.
    pub separation: f64,
    /// Scale of class-specific prototype offsets.
    pub class_spread: f64,
    /// Per-coordinate noise around a prototype.
    pub noise: f64,
    /// Feature vectors are clipped to this norm.
    pub radius: f64,
    pub domain_radius: f64,
    pub seed: u64,
}

impl HeteroLabelSpec {
    pub fn new(n_silos: usize, n_per_silo: usize, dim: usize, seed: u64) -> Self {
        Self {
            n_silos,
            n_per_silo,
            dim,
            test_per_silo: n_per_silo.div_ceil(4),
            separation: 0.25,
            class_spread: 0.5,
            noise: 0.6 / (dim as f64).sqrt(),
            radius: 1.0,
            domain_radius: 5.0,
            seed,
        }
    }
}

/// Binary classification where silo `i` holds one odd and one even class,
/// mirroring a digit-parity task split across silos.
pub fn gen_binary_heterolabel(spec: &HeteroLabelSpec) -> Result<FederatedProblem> {
    if spec.n_silos == 0 || spec.n_per_silo == 0 || spec.dim == 0 {
        return Err(invalid("spec", "silo count, samples per silo and dimension must be >= 1"));
    }
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut direction: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let r = norm(&direction);
    direction.iter_mut().for_each(|v| *v /= r);

    let prototypes: Vec<ParamVector> = (0..10)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let offset: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let on = norm(&offset);
            let p: Vec<f64> = direction
                .iter()
                .zip(&offset)
                .map(|(u, o)| sign * spec.separation * u + spec.class_spread * o / on)
                .collect();
            ParamVector::from(p)
        })
        .collect();
    let silo_classes: Vec<(usize, usize)> = (0..spec.n_silos)
        .map(|i| {
            let pair = i % 25;
            (2 * (pair / 5) + 1, 2 * (pair % 5))
        })
        .collect();
    let clusters = LabelClusters {
        prototypes,
        silo_classes,
        noise: spec.noise,
        radius: spec.radius,
    };

    let silos: Vec<SiloDataset> = (0..spec.n_silos)
        .map(|i| {
            let (odd, even) = clusters.silo_classes[i];
            SiloDataset {
                silo_id: i,
                samples: (0..spec.n_per_silo).map(|_| clusters.draw(i, &mut rng)).collect(),
                distribution_tag: format!("classes-{odd}-{even}"),
            }
        })
        .collect();
    let mut test_set = Vec::with_capacity(spec.n_silos * spec.test_per_silo);
    for i in 0..spec.n_silos {
        for _ in 0..spec.test_per_silo {
            test_set.push(clusters.draw(i, &mut rng));
        }
    }
    let domain = Domain::origin_ball(d, spec.domain_radius)?;
    let loss = LossOracle::for_domain(LossKind::Logistic, &domain, spec.radius)?;
    Ok(FederatedProblem {
        silos,
        loss,
        domain,
        optimum: None,
        heterogeneity_zeta: None,
        population: Population::LabelClusters(clusters),
        test_set,
        data_radius: spec.radius,
    })
}

/// Reads `silo_id,label,f_0,…,f_{d-1}` rows (header required). Silos are
/// renumbered in ascending id order and truncated to the smallest silo's
/// sample count; the second value returned is the number of dropped rows.
pub fn read_silo_csv(path: &Path) -> Result<(BTreeMap<i64, Vec<Sample>>, usize)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "silo_id" || &headers[1] != "label" {
        return Err(Error::Schema(format!(
            "{}: expected header `silo_id,label,f_0,...`, got `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    for (k, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f_{k}") {
            return Err(Error::Schema(format!("{}: feature column {k} is named `{h}`", path.display())));
        }
    }
    let d = headers.len() - 2;
    let mut by_silo: BTreeMap<i64, Vec<Sample>> = BTreeMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Schema(format!("{}: row {} column {k} is not a finite number", path.display(), row + 2)))
        };
        if rec.len() != d + 2 {
            return Err(Error::Schema(format!("{}: row {} has {} fields, expected {}", path.display(), row + 2, rec.len(), d + 2)));
        }
        let silo = rec[0]
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::Schema(format!("{}: row {} silo_id is not an integer", path.display(), row + 2)))?;
        let label = parse(1)?;
        let features = (0..d).map(|k| parse(k + 2)).collect::<Result<Vec<_>>>()?;
        by_silo.entry(silo).or_default().push(Sample::new(features, label));
    }
    Ok((by_silo, d))
}

/// Builds a problem from preprocessed CSV data (e.g. PCA-reduced images).
pub fn load_csv_problem(
    train: &Path,
    test: Option<&Path>,
    kind: LossKind,
    domain_radius: f64,
) -> Result<FederatedProblem> {
    let (by_silo, d) = read_silo_csv(train)?;
    if by_silo.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", train.display())));
    }
    let n = by_silo.values().map(Vec::len).min().unwrap_or(0);
    let silos: Vec<SiloDataset> = by_silo
        .into_iter()
        .enumerate()
        .map(|(i, (id, mut samples))| {
            samples.truncate(n);
            SiloDataset {
                silo_id: i,
                samples,
                distribution_tag: format!("csv-silo-{id}"),
            }
        })
        .collect();
    let mut test_set = Vec::new();
    if let Some(path) = test {
        let (test_by_silo, test_d) = read_silo_csv(path)?;
        if test_d != d {
            return Err(Error::Schema(format!("test file has {test_d} features, training file has {d}")));
        }
        test_set = test_by_silo.into_values().flatten().collect();
    }
    let data_radius = silos
        .iter()
        .flat_map(|s| s.samples.iter())
        .chain(test_set.iter())
        .map(|s| norm(&s.features))
        .fold(0.0, f64::max);
    let domain = Domain::origin_ball(d, domain_radius)?;
    let loss = LossOracle::for_domain(kind, &domain, data_radius)?;
    Ok(FederatedProblem {
        silos,
        loss,
        domain,
        optimum: None,
        heterogeneity_zeta: None,
        population: Population::Empirical,
        test_set,
        data_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(kind: LossKind, d: usize) -> LossOracle {
        LossOracle::for_domain(kind, &Domain::origin_ball(d, 2.0).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn quadratic_at_origin() {
        let (v, g) = loss_eval(&oracle(LossKind::Quadratic, 2), &[0.0, 0.0], &Sample::point(vec![1.0, 0.0])).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(&*g, &[-1.0, 0.0]);
    }

    #[test]
    fn absolute_kink_returns_zero() {
        let (v, g) = loss_eval(&oracle(LossKind::Absolute, 1), &[0.3], &Sample::new(vec![1.0], 0.3)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(&*g, &[0.0]);
    }

    #[test]
    fn hinge_kink_returns_zero() {
        let (v, g) = loss_eval(&oracle(LossKind::Hinge, 1), &[1.0], &Sample::new(vec![1.0], 1.0)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(&*g, &[0.0]);
    }

    #[test]
    fn logistic_at_origin() {
        let a = vec![0.3, -0.4];
        for y in [1.0, -1.0] {
            let (v, g) = loss_eval(&oracle(LossKind::Logistic, 2), &[0.0, 0.0], &Sample::new(a.clone(), y)).unwrap();
            assert!((v - 2f64.ln()).abs() < 1e-15);
            assert!((g[0] + y * a[0] / 2.0).abs() < 1e-15);
            assert!((g[1] + y * a[1] / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let o = oracle(LossKind::Quadratic, 1);
        assert!(matches!(loss_eval(&o, &[f64::NAN], &Sample::point(vec![0.0])), Err(Error::Contract(_))));
        assert!(matches!(loss_eval(&o, &[0.0], &Sample::point(vec![f64::INFINITY])), Err(Error::Contract(_))));
    }

    #[test]
    fn symmetric_two_silo_quadratic() {
        let mut spec = QuadraticSpec::new(2, 8, 2, 2.0, 0);
        spec.sigma_x = 0.0;
        spec.truncation_radius = 0.0;
        spec.domain_radius = 10.0;
        let centers = vec![ParamVector::from(vec![1.0, 0.0]), ParamVector::from(vec![-1.0, 0.0])];
        let p = gen_quadratic_with_centers(&spec, centers, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let opt = p.optimum.as_ref().unwrap();
        assert_eq!(&*opt.w_star, &[0.0, 0.0]);
        assert_eq!(p.heterogeneity_zeta, Some(1.0));
        let f0 = population_risk(&p, &[0.0, 0.0], None).unwrap();
        assert_eq!(f0.value, 0.5);
        assert_eq!(f0.std_error, 0.0);
        assert_eq!(population_risk(&p, &opt.w_star, None).unwrap().value, opt.f_star);
    }

    #[test]
    fn zero_spread_is_homogeneous() {
        let p = gen_heterogeneous_quadratic(&QuadraticSpec::new(5, 10, 3, 0.0, 3)).unwrap();
        assert_eq!(p.heterogeneity_zeta, Some(0.0));
    }

    #[test]
    fn truncated_moment_limits() {
        assert_eq!(truncated_second_moment(4, 0.0, 1.0), 0.0);
        assert_eq!(truncated_second_moment(4, 2.0, f64::INFINITY), 16.0);
        let wide = truncated_second_moment(4, 1.0, 100.0);
        assert!((wide - 4.0).abs() < 1e-12);
        // d = 1: E[z² | |z| <= 1] = 1 - 2φ(1)/(2Φ(1) - 1)
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = statrs::function::erf::erf(1.0 / 2f64.sqrt());
        let expected = 1.0 - 2.0 * phi1 / mass;
        let got = truncated_second_moment(1, 1.0, 1.0);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn heterolabel_is_deterministic() {
        let spec = HeteroLabelSpec::new(3, 20, 5, 11);
        let a = gen_binary_heterolabel(&spec).unwrap();
        let b = gen_binary_heterolabel(&spec).unwrap();
        for (x, y) in a.silos.iter().zip(&b.silos) {
            assert_eq!(x.samples, y.samples);
        }
        assert_eq!(a.test_set, b.test_set);
    }

    #[test]
    fn single_silo_heterolabel() {
        let p = gen_binary_heterolabel(&HeteroLabelSpec::new(1, 30, 4, 1)).unwrap();
        assert_eq!(p.n_silos(), 1);
        assert!(p.silos[0].samples.iter().all(|s| s.label == 1.0 || s.label == -1.0));
    }

    #[test]
    fn mc_risk_requires_samples() {
        let p = gen_binary_heterolabel(&HeteroLabelSpec::new(2, 10, 3, 1)).unwrap();
        assert!(population_risk(&p, &[0.0; 3], None).is_err());
    }
}
