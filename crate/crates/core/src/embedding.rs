//! Target distributions seen through the kernel.
//!
//! The mean embedding `μ_p` is never materialized. Algorithms only need its
//! inner products with features, `z(x) = E_{x'~p} k(x, x')`, and its squared
//! norm `c = E_{x,y~p} k(x, y)`, which is also the discrepancy of the empty
//! sample set.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, Point};

const PROB_TOL: f64 = 1e-12;

/// Sampling oracle for a distribution over points.
pub trait Sampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Point;
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidTarget("no probability mass".into()));
    }
    if probs.iter().any(|q| !q.is_finite() || *q < 0.0) {
        return Err(Error::InvalidTarget("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidTarget(format!("probabilities sum to {total}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    cov_factor: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Finite mixture of full-covariance Gaussians.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    dim: usize,
    picker: WeightedIndex<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidTarget("component arrays differ in length".into()));
        }
        check_probabilities(&weights)?;
        if weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidTarget("mixture weights must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::EmptyPoint);
        }
        let mut components = Vec::with_capacity(weights.len());
        for ((weight, mean), cov) in weights.iter().zip(means).zip(covs) {
            if mean.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: mean.len() });
            }
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: cov.nrows() });
            }
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-12 * scale {
                return Err(Error::NonSpdCovariance);
            }
            let cov_factor = cov.clone().cholesky().ok_or(Error::NonSpdCovariance)?.unpack();
            components.push(GaussianComponent {
                weight: *weight,
                mean: DVector::from_vec(mean),
                cov,
                cov_factor,
            });
        }
        let picker = WeightedIndex::new(&weights).map_err(|e| Error::InvalidTarget(e.to_string()))?;
        Ok(Self { components, dim, picker })
    }

    /// Mixture with axis-aligned covariances given by their diagonals.
    pub fn diagonal(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let covs = variances
            .into_iter()
            .map(|v| DMatrix::from_diagonal(&DVector::from_vec(v)))
            .collect();
        Self::new(weights, means, covs)
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// `|I + A/σ²|^{-1/2} exp(-½ δᵀ(A + σ²I)^{-1} δ)`: the convolution of an
    /// RBF bump with a Gaussian of covariance `A`, evaluated at offset `δ`.
    fn smoothed_bump(cov: &DMatrix<f64>, delta: &DVector<f64>, bandwidth: f64) -> Result<f64> {
        let d = delta.len();
        let s2 = bandwidth * bandwidth;
        let shifted = cov + DMatrix::identity(d, d) * s2;
        let chol = shifted.cholesky().ok_or(Error::NonSpdCovariance)?;
        let l = chol.l_dirty();
        let log_det: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let log_norm = -0.5 * (log_det - d as f64 * s2.ln());
        let solved = chol.l_dirty().solve_lower_triangular(delta).ok_or(Error::NonSpdCovariance)?;
        Ok((log_norm - 0.5 * solved.norm_squared()).exp())
    }

    fn mean_embed(&self, bandwidth: f64, x: &Point) -> Result<f64> {
        let x = DVector::from_column_slice(x.coords());
        self.components.iter().try_fold(0.0, |acc, c| {
            Ok(acc + c.weight * Self::smoothed_bump(&c.cov, &(&x - &c.mean), bandwidth)?)
        })
    }

    fn self_energy(&self, bandwidth: f64) -> Result<f64> {
        let mut total = 0.0;
        for a in &self.components {
            for b in &self.components {
                let cov = &a.cov + &b.cov;
                let delta = &a.mean - &b.mean;
                total += a.weight * b.weight * Self::smoothed_bump(&cov, &delta, bandwidth)?;
            }
        }
        Ok(total)
    }
}

impl Sampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let c = &self.components[self.picker.sample(rng)];
        let noise = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        let x = &c.mean + &c.cov_factor * noise;
        Point::new(x.as_slice().to_vec()).expect("finite Gaussian draw")
    }
}

/// Probability vector over explicit support points.
#[derive(Clone, Debug)]
pub struct EmpiricalDiscrete {
    support: Vec<Point>,
    probs: Vec<f64>,
    picker: WeightedIndex<f64>,
}

impl EmpiricalDiscrete {
    pub fn new(support: Vec<Point>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::InvalidTarget("support and probabilities differ in length".into()));
        }
        check_probabilities(&probs)?;
        let dim = support[0].dim();
        if let Some(p) = support.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
        }
        let picker = WeightedIndex::new(&probs).map_err(|e| Error::InvalidTarget(e.to_string()))?;
        Ok(Self { support, probs, picker })
    }

    pub fn uniform(support: Vec<Point>) -> Result<Self> {
        let n = support.len();
        if n == 0 {
            return Err(Error::InvalidTarget("no probability mass".into()));
        }
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// `λ·self + (1-λ)·other` as one discrete distribution.
    pub fn mix(&self, other: &EmpiricalDiscrete, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidTarget(format!("mixing weight {lambda} outside [0, 1]")));
        }
        let support = self.support.iter().chain(&other.support).cloned().collect();
        let probs = self
            .probs
            .iter()
            .map(|q| lambda * q)
            .chain(other.probs.iter().map(|q| (1.0 - lambda) * q))
            .collect();
        Self::new(support, probs)
    }

    fn mean_embed(&self, kernel: &Kernel, x: &Point) -> Result<f64> {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(_, q)| **q > 0.0)
            .try_fold(0.0, |acc, (y, q)| Ok(acc + q * kernel.eval(x, y)?))
    }

    fn self_energy(&self, kernel: &Kernel) -> Result<f64> {
        let live: Vec<(&Point, f64)> = self
            .support
            .iter()
            .zip(self.probs.iter().copied())
            .filter(|(_, q)| *q > 0.0)
            .collect();
        let mut total = 0.0;
        for (i, (a, qa)) in live.iter().enumerate() {
            total += qa * qa * kernel.eval(a, a)?;
            for (b, qb) in &live[..i] {
                total += 2.0 * qa * qb * kernel.eval(a, b)?;
            }
        }
        Ok(total)
    }
}

impl Sampler for EmpiricalDiscrete {
    fn dim(&self) -> usize {
        self.support[0].dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        self.support[self.picker.sample(rng)].clone()
    }
}

/// Target known only through a sampler. Both functionals are estimated from
/// a fixed seeded draw so repeated queries are consistent.
#[derive(Clone)]
pub struct MonteCarloTarget {
    sampler: Arc<dyn Sampler>,
    seed: u64,
    samples: Vec<Point>,
    paired: Vec<Point>,
}

impl MonteCarloTarget {
    pub fn new(sampler: Arc<dyn Sampler>, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::NoSamples);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n_samples).map(|_| sampler.sample(&mut rng)).collect();
        let paired = (0..n_samples).map(|_| sampler.sample(&mut rng)).collect();
        Ok(Self { sampler, seed, samples, paired })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl fmt::Debug for MonteCarloTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonteCarloTarget")
            .field("seed", &self.seed)
            .field("samples", &self.samples.len())
            .finish()
    }
}

/// The target distribution `p`.
#[derive(Clone, Debug)]
pub enum TargetEmbedding {
    GaussianMixture(GaussianMixture),
    EmpiricalDiscrete(EmpiricalDiscrete),
    MonteCarlo(MonteCarloTarget),
}

impl TargetEmbedding {
    pub fn dim(&self) -> usize {
        self.sampler().dim()
    }

    pub fn sampler(&self) -> &dyn Sampler {
        match self {
            TargetEmbedding::GaussianMixture(m) => m,
            TargetEmbedding::EmpiricalDiscrete(e) => e,
            TargetEmbedding::MonteCarlo(mc) => mc.sampler.as_ref(),
        }
    }

    fn check_dim(&self, x: &Point) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.dim() });
        }
        Ok(())
    }

    /// `z(x) = E_{x'~p} k(x, x')`.
    pub fn mean_embed(&self, kernel: &Kernel, x: &Point) -> Result<f64> {
        self.check_dim(x)?;
        match self {
            TargetEmbedding::GaussianMixture(m) => match kernel {
                Kernel::Rbf { bandwidth } => m.mean_embed(*bandwidth, x),
                _ => Err(Error::UnsupportedCombination),
            },
            TargetEmbedding::EmpiricalDiscrete(e) => e.mean_embed(kernel, x),
            TargetEmbedding::MonteCarlo(mc) => {
                let total = mc.samples.iter().try_fold(0.0, |acc, y| Ok::<_, Error>(acc + kernel.eval(x, y)?))?;
                Ok(total / mc.samples.len() as f64)
            }
        }
    }

    /// `c = E_{x,y~p} k(x, y) = ‖μ_p‖²`.
    pub fn self_energy(&self, kernel: &Kernel) -> Result<f64> {
        match self {
            TargetEmbedding::GaussianMixture(m) => match kernel {
                Kernel::Rbf { bandwidth } => m.self_energy(*bandwidth),
                _ => Err(Error::UnsupportedCombination),
            },
            TargetEmbedding::EmpiricalDiscrete(e) => e.self_energy(kernel),
            TargetEmbedding::MonteCarlo(mc) => {
                let total = mc
                    .samples
                    .iter()
                    .zip(&mc.paired)
                    .try_fold(0.0, |acc, (a, b)| Ok::<_, Error>(acc + kernel.eval(a, b)?))?;
                Ok(total / mc.samples.len() as f64)
            }
        }
    }
}

/// Seeded sample mean and standard error of `k(x, X')` with `X' ~ sampler`.
/// A single sample reports an infinite standard error.
pub fn mc_oracle_mean_embed(
    sampler: &dyn Sampler,
    kernel: &Kernel,
    x: &Point,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_stats(n_samples, || kernel.eval(x, &sampler.sample(&mut rng)))
}

/// Seeded estimate of `E k(X, Y)` with `X, Y` independent draws.
pub fn mc_oracle_self_energy(sampler: &dyn Sampler, kernel: &Kernel, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_stats(n_samples, || {
        let a = sampler.sample(&mut rng);
        let b = sampler.sample(&mut rng);
        kernel.eval(&a, &b)
    })
}

fn sample_stats(n: usize, mut draw: impl FnMut() -> Result<f64>) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::NoSamples);
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let v = draw()?;
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    if n == 1 {
        return Ok((mean, f64::INFINITY));
    }
    let var = m2 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}
