//! Kernel mean embeddings on a finite expansion set.
//!
//! Candidate distributions are weight vectors `eta` over expansion points
//! `r_1..r_T`; the first `T0` points carry the empirical distribution. The
//! squared MMD between `eta` and the empirical distribution is
//!
//! ```text
//! eta' G eta - (2/T0) eta' M 1 + s_bar,   G = L L'
//! ```
//!
//! with `G` the Gram matrix, `M` its first `T0` columns and `s_bar` the mean
//! of the sample block. Only the Gaussian RBF kernel is provided.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scenarios::ScenarioMatrix;

pub const DEFAULT_JITTER_START: f64 = 1e-10;
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    GaussianRbf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::median()
    }
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            family: KernelFamily::GaussianRbf,
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn median() -> Self {
        Self {
            family: KernelFamily::GaussianRbf,
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }

    /// Replaces a median-heuristic bandwidth by its value on `points`.
    pub fn resolve(&self, points: &[Vec<f64>]) -> Result<Self> {
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
            Bandwidth::Fixed(s) => {
                return Err(Error::InvalidSpec(format!("bandwidth {s} must be positive")))
            }
            Bandwidth::MedianHeuristic => median_heuristic(points)?,
        };
        Ok(Self::gaussian(sigma))
    }

    fn sigma(&self) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(Error::InvalidSpec(format!(
                "bandwidth {s} must be positive"
            ))),
            Bandwidth::MedianHeuristic => Err(Error::InvalidSpec(
                "median-heuristic bandwidth has not been resolved".into(),
            )),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Gaussian RBF `exp(-|x - y|^2 / (2 sigma^2))`.
pub fn kernel_eval(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let sigma = spec.sigma()?;
    Ok(match spec.family {
        KernelFamily::GaussianRbf => (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp(),
    })
}

/// Median of the nonzero pairwise Euclidean distances.
pub fn median_heuristic(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::DegeneratePoints);
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (a, x) in points.iter().enumerate() {
        for y in &points[a + 1..] {
            if x.len() != y.len() {
                return Err(Error::DimMismatch {
                    expected: x.len(),
                    got: y.len(),
                });
            }
            let d = sq_dist(x, y).sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegeneratePoints);
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    Ok(if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    })
}

/// How the support points beyond the empirical sample are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupportPolicy {
    /// Trailing in-sample scenarios act as support points.
    Trailing,
    /// Gaussian perturbations of randomly drawn sample points.
    Perturbed { scale: f64, seed: u64 },
}

/// Expansion points; the first `sample_count` are the empirical sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSet {
    points: Vec<Vec<f64>>,
    sample_count: usize,
}

impl ExpansionSet {
    pub fn new(points: Vec<Vec<f64>>, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidSpec("sample count must be at least 1".into()));
        }
        if points.len() < sample_count {
            return Err(Error::InsufficientData {
                needed: sample_count,
                got: points.len(),
            });
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        Ok(Self {
            points,
            sample_count,
        })
    }

    /// All scenarios of `scen` in chronological order; the first
    /// `sample_count` form the sample.
    pub fn from_scenarios(scen: &ScenarioMatrix, sample_count: usize) -> Result<Self> {
        let points = (0..scen.periods()).map(|j| scen.scenario(j)).collect();
        Self::new(points, sample_count)
    }

    /// First `sample_count` scenarios as sample, remaining slots filled with
    /// perturbed resamples of the sample.
    pub fn perturbed(
        scen: &ScenarioMatrix,
        sample_count: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let total = scen.periods();
        if total < sample_count || sample_count == 0 {
            return Err(Error::InsufficientData {
                needed: sample_count.max(1),
                got: total,
            });
        }
        let noise = Normal::new(0.0, scale.max(0.0))
            .map_err(|e| Error::InvalidSpec(format!("perturbation scale: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points: Vec<Vec<f64>> = (0..sample_count).map(|j| scen.scenario(j)).collect();
        for _ in sample_count..total {
            let base = rng.gen_range(0..sample_count);
            let p = points[base]
                .iter()
                .map(|x| x + noise.sample(&mut rng))
                .collect();
            points.push(p);
        }
        Self::new(points, sample_count)
    }

    pub fn build(
        scen: &ScenarioMatrix,
        sample_count: usize,
        policy: SupportPolicy,
    ) -> Result<Self> {
        match policy {
            SupportPolicy::Trailing => Self::from_scenarios(scen, sample_count),
            SupportPolicy::Perturbed { scale, seed } => {
                Self::perturbed(scen, sample_count, scale, seed)
            }
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Uniform weights on the sample, zero on the support points.
    pub fn empirical_weights(&self) -> Vec<f64> {
        let w = 1.0 / self.sample_count as f64;
        (0..self.len())
            .map(|j| if j < self.sample_count { w } else { 0.0 })
            .collect()
    }
}

/// Factorized Gram data for the MMD constraint.
///
/// `gram` already contains `jitter_used * I`; `cross` (`M`) and `s_bar` are
/// read off the same matrix so that `mmd_sq` of the empirical weights is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactors {
    lower: DMatrix<f64>,
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    s_bar: f64,
    jitter_used: f64,
    sample_count: usize,
    kernel: KernelSpec,
}

impl GramFactors {
    /// Lower-triangular `L` with `L L' = G`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `M`, the `T x T0` cross-kernel block.
    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    pub fn s_bar(&self) -> f64 {
        self.s_bar
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn size(&self) -> usize {
        self.gram.nrows()
    }

    /// Resolved kernel used to build the Gram matrix.
    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    /// `(1/T0) M 1`, the mean embedding of the sample evaluated at every
    /// expansion point.
    pub fn sample_mean_row(&self) -> Vec<f64> {
        let t0 = self.sample_count as f64;
        self.cross
            .row_iter()
            .map(|row| row.iter().sum::<f64>() / t0)
            .collect()
    }

    /// Max-abs error of `L L'` against the Gram matrix without jitter.
    pub fn reconstruction_error(&self) -> f64 {
        let rebuilt = &self.lower * self.lower.transpose();
        let mut raw = self.gram.clone();
        for k in 0..raw.nrows() {
            raw[(k, k)] -= self.jitter_used;
        }
        (rebuilt - raw).amax()
    }

    /// `eta' G eta` evaluated directly on the Gram matrix.
    pub fn quadratic_form(&self, eta: &[f64]) -> f64 {
        let v = DVector::from_column_slice(eta);
        (v.transpose() * &self.gram * &v)[(0, 0)]
    }
}

/// Gram matrix of `exp` with a Cholesky factor, escalating diagonal jitter by
/// 10x from `jitter_start` up to `1e-6` until the factorization succeeds.
pub fn build_gram_factors(
    exp: &ExpansionSet,
    spec: &KernelSpec,
    jitter_start: f64,
) -> Result<GramFactors> {
    let kernel = spec.resolve(exp.points())?;
    let t = exp.len();
    let t0 = exp.sample_count();
    let mut base = DMatrix::zeros(t, t);
    for a in 0..t {
        base[(a, a)] = 1.0;
        for b in 0..a {
            let k = kernel_eval(&exp.points()[a], &exp.points()[b], &kernel)?;
            base[(a, b)] = k;
            base[(b, a)] = k;
        }
    }

    let mut jitter = jitter_start.max(0.0);
    loop {
        let mut gram = base.clone();
        for k in 0..t {
            gram[(k, k)] += jitter;
        }
        if let Some(chol) = gram.clone().cholesky() {
            let lower = chol.l();
            let cross = gram.columns(0, t0).into_owned();
            let s_bar = gram.view((0, 0), (t0, t0)).sum() / (t0 * t0) as f64;
            return Ok(GramFactors {
                lower,
                gram,
                cross,
                s_bar,
                jitter_used: jitter,
                sample_count: t0,
                kernel,
            });
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::NotFactorizable { jitter: MAX_JITTER });
        }
    }
}

fn check_weights(eta: &[f64], t: usize) -> Result<()> {
    if eta.len() != t {
        return Err(Error::DimMismatch {
            expected: t,
            got: eta.len(),
        });
    }
    if let Some(x) = eta.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("weight {x}")));
    }
    let total: f64 = eta.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
    }
    Ok(())
}

/// Empirical squared MMD between `eta` and the sample distribution, using the
/// Cholesky factor: `|L' eta|^2 - (2/T0) eta' M 1 + s_bar`, clipped at zero.
pub fn mmd_sq(eta: &[f64], factors: &GramFactors) -> Result<f64> {
    check_weights(eta, factors.size())?;
    let v = DVector::from_column_slice(eta);
    let quad = (factors.lower.transpose() * v).norm_squared();
    let cross: f64 = factors
        .sample_mean_row()
        .iter()
        .zip(eta)
        .map(|(q, e)| q * e)
        .sum();
    Ok((quad - 2.0 * cross + factors.s_bar).max(0.0))
}

/// Bootstrap estimate of the MMD radius: the `quantile` of MMD between
/// resampled empirical distributions and the sample.
pub fn bootstrap_radius(
    factors: &GramFactors,
    resamples: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if resamples == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidSpec(
            "bootstrap needs resamples > 0 and quantile in [0, 1]".into(),
        ));
    }
    let t = factors.size();
    let t0 = factors.sample_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radii = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut eta = vec![0.0; t];
        for _ in 0..t0 {
            eta[rng.gen_range(0..t0)] += 1.0 / t0 as f64;
        }
        // renormalize away the rounding drift of repeated 1/T0 additions
        let s: f64 = eta.iter().sum();
        eta.iter_mut().for_each(|e| *e /= s);
        radii.push(mmd_sq(&eta, factors)?.sqrt());
    }
    radii.sort_by(f64::total_cmp);
    let idx = ((quantile * (resamples - 1) as f64).round() as usize).min(resamples - 1);
    Ok(radii[idx])
}
