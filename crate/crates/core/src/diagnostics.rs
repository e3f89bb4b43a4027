//! Empirical checks of the convergence theory: log-linear rate fits,
//! exhaustive best-subset search, Gram-spectrum surrogates for the
//! restricted convexity/smoothness constants, residual orthogonality and
//! realizable fixtures.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmpiricalDiscrete, TargetEmbedding};
use crate::error::{Error, Result};
use crate::kernel::{CandidatePool, FeatureMap, Kernel, Point};
use crate::select::{Greedy, Method, RunTrace};
use crate::state::QuadratureState;

/// Values of `g` at or below this are treated as numerically zero in fits.
pub const G_FLOOR: f64 = 1e-13;

/// Largest number of subsets [`brute_force_best_subset`] will evaluate.
pub const SUBSET_BUDGET: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Least-squares fit of `ln g_i` against `i` over the trace, `g_0` included.
pub fn fit_rate(trace: &RunTrace) -> Result<RateFit> {
    fit_rate_values(&trace.g_values())
}

/// Same fit on a bare sequence `g_0, g_1, ...`. Points at or below
/// [`G_FLOOR`] are dropped.
pub fn fit_rate_values(g: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> =
        g.iter().enumerate().filter(|(_, v)| **v > G_FLOOR).map(|(i, v)| (i as f64, v.ln())).collect();
    let n = pts.len();
    if n < 3 {
        return Err(Error::InsufficientPoints(n));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(RateFit { slope, intercept, r_squared, n_points: n })
}

/// Per-iteration geometric mean of several traces, truncated where the
/// first of them reaches [`G_FLOOR`] or ends.
pub fn geometric_mean_trace(traces: &[Vec<f64>]) -> Vec<f64> {
    let len = traces.iter().map(|t| t.iter().take_while(|g| **g > G_FLOOR).count()).min().unwrap_or(0);
    (0..len)
        .map(|i| (traces.iter().map(|t| t[i].ln()).sum::<f64>() / traces.len() as f64).exp())
        .collect()
}

/// [`fit_rate_values`] on the geometric-mean trace of an ensemble.
pub fn fit_rate_ensemble(traces: &[Vec<f64>]) -> Result<RateFit> {
    fit_rate_values(&geometric_mean_trace(traces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSubset {
    pub ids: Vec<usize>,
    pub g: f64,
    pub subsets_examined: u64,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// `g` with optimal weights on `ids` in order, stopping at the first atom
/// that is dependent on the ones before it.
fn prefix_g(
    pool: &CandidatePool,
    z: &[f64],
    target: &TargetEmbedding,
    kernel: &Kernel,
    c: f64,
    ids: &[usize],
) -> Result<f64> {
    let mut state = QuadratureState::with_self_energy(target, kernel, c);
    for &id in ids {
        match state.add_atom_with_embedding(pool.point(id).clone(), id, z[id]) {
            Ok(()) => {}
            Err(Error::NearDependentAtom { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(state.g())
}

/// Minimum of `g` with optimal weights over every subset of at most `r`
/// pool points. Ties go to the smaller subset, then lexicographically.
pub fn brute_force_best_subset(
    pool: &CandidatePool,
    target: &TargetEmbedding,
    kernel: &Kernel,
    r: usize,
) -> Result<OracleSubset> {
    let n = pool.len();
    let r = r.min(n);
    let total: u128 = (0..=r).map(|j| binomial(n, j)).sum();
    if total > SUBSET_BUDGET {
        return Err(Error::CombinatorialBudgetExceeded(total));
    }
    let c = target.self_energy(kernel)?;
    let z = pool.points().par_iter().map(|x| target.mean_embed(kernel, x)).collect::<Result<Vec<_>>>()?;

    let mut best = OracleSubset { ids: Vec::new(), g: c, subsets_examined: 1 };
    for size in 1..=r {
        let winner = (0..n)
            .combinations(size)
            .par_bridge()
            .map(|ids| prefix_g(pool, &z, target, kernel, c, &ids).map(|g| (g, ids)))
            .try_reduce_with(|a, b| Ok(if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }))
            .transpose()?;
        best.subsets_examined += binomial(n, size) as u64;
        if let Some((g, ids)) = winner {
            if g < best.g {
                best.g = g;
                best.ids = ids;
            }
        }
    }
    Ok(best)
}

/// Extreme eigenvalues `(λ_min, λ_max)` of the Gram matrix of `points`;
/// `(1, 1)` for an empty set.
pub fn gram_spectrum(kernel: &Kernel, points: &[&Point]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Ok((1.0, 1.0));
    }
    let rows = kernel.gram_matrix(points)?;
    let n = rows.len();
    let eig = DMatrix::from_fn(n, n, |i, j| rows[i][j]).symmetric_eigenvalues();
    Ok((eig.min(), eig.max()))
}

/// Surrogate `(m̂, M̂)` for the restricted strong convexity and smoothness
/// constants: the extreme eigenvalues of the selected atoms' Gram matrix.
pub fn estimate_rsc_rss(state: &QuadratureState<'_>) -> Result<(f64, f64)> {
    let points: Vec<&Point> = state.atoms().iter().map(|a| &a.point).collect();
    gram_spectrum(state.kernel(), &points)
}

/// `max_j |z_j - (Kw)_j|`, with `K` rebuilt from the kernel. Zero when the
/// state is empty.
pub fn orthogonality_residual(state: &QuadratureState<'_>) -> Result<f64> {
    let gram = state.gram()?;
    let w = state.weights();
    Ok(gram
        .iter()
        .zip(state.z_values())
        .map(|(row, z)| (z - row.iter().zip(w).map(|(k, w)| k * w).sum::<f64>()).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeCheck {
    pub method: Method,
    pub k: usize,
    pub m_hat: f64,
    pub big_m_hat: f64,
    /// Extreme Gram eigenvalues over the selected atoms plus the oracle set.
    pub m_hat_with_oracle: f64,
    pub big_m_hat_with_oracle: f64,
    pub g_final: f64,
    pub bound: f64,
    pub holds: bool,
    /// Set when the iteration count hit the pool size.
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub r: usize,
    pub epsilon: f64,
    pub self_energy: f64,
    pub oracle: OracleSubset,
    pub checks: Vec<GuaranteeCheck>,
    pub note: String,
}

impl GuaranteeReport {
    pub fn holds(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Runs WKH and SBQ for `k = ceil(r M̂/m̂ ln(1/ε))` steps and compares the
/// result with `(1-ε) g(T_r) + ε c`, where `T_r` is the exhaustive optimum.
///
/// `M̂/m̂` is measured on the atoms the run itself selects, so `k` is found
/// by iterating: start from ratio 1, rerun with the updated `k` until it
/// stops growing or reaches the pool size.
pub fn check_approx_guarantee(
    pool: &CandidatePool,
    target: &TargetEmbedding,
    kernel: &Kernel,
    r: usize,
    epsilon: f64,
) -> Result<GuaranteeReport> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let oracle = brute_force_best_subset(pool, target, kernel, r)?;
    let c = target.self_energy(kernel)?;
    let bound = (1.0 - epsilon) * oracle.g + epsilon * c;
    let log_term = (1.0 / epsilon).ln();
    let steps = |ratio: f64| ((r as f64 * ratio * log_term).ceil() as usize).min(pool.len());

    let mut checks = Vec::new();
    for method in [Method::Wkh, Method::Sbq] {
        let mut k = steps(1.0);
        let (state, m_hat, big_m_hat) = loop {
            let state = if k == 0 {
                QuadratureState::with_self_energy(target, kernel, c)
            } else {
                let run = Greedy::new(method, k).run_subset(pool, &pool.ids().collect::<Vec<_>>(), target, kernel, c)?;
                run.solution.as_weighted().expect("optimal-weight method").clone()
            };
            let (m, big_m) = estimate_rsc_rss(&state)?;
            let next = steps(big_m / m);
            if next <= k {
                break (state, m, big_m);
            }
            k = next;
        };
        let mut union: Vec<&Point> = state.atoms().iter().map(|a| &a.point).collect();
        union.extend(oracle.ids.iter().filter(|id| !state.contains(**id)).map(|&id| pool.point(id)));
        let (m_u, big_m_u) = gram_spectrum(kernel, &union)?;
        let g_final = state.g();
        checks.push(GuaranteeCheck {
            method,
            k,
            m_hat,
            big_m_hat,
            m_hat_with_oracle: m_u,
            big_m_hat_with_oracle: big_m_u,
            g_final,
            bound,
            holds: g_final <= bound + 1e-8,
            capped: k == pool.len(),
        });
    }
    Ok(GuaranteeReport {
        r,
        epsilon,
        self_energy: c,
        oracle,
        checks,
        note: "m_hat and M_hat are the extreme Gram eigenvalues of the selected atoms; \
               the *_with_oracle pair adds the exhaustive optimum"
            .into(),
    })
}

/// A pool, target and kernel where the target embedding is reproduced
/// exactly by `expected_r` atoms and by no fewer.
#[derive(Clone, Debug)]
pub struct RealizabilityFixture {
    pub name: &'static str,
    pub pool: CandidatePool,
    pub target: TargetEmbedding,
    pub kernel: Kernel,
    pub expected_r: usize,
}

/// Two fixtures built on the cosine kernel of the affine lift `(1, x)`:
///
/// * `convex-grid`: 201-point grid on `[-1, 1]`, target weights proportional
///   to a `N(0, 0.1²)` density. The atom at 0 alone reproduces the target.
/// * `two-clusters`: two mirrored clusters around `(±2, 0)` with uniform
///   target weights. The target direction points at the empty origin, so
///   every single atom misses it while any mirrored pair hits it.
pub fn realizability_fixtures() -> Vec<RealizabilityFixture> {
    let kernel = Kernel::NormalizedFeature(FeatureMap::AffineLift);

    let grid: Vec<Point> = (0..=200).map(|i| Point::new(vec![(i as f64 - 100.0) / 100.0]).expect("finite")).collect();
    let density: Vec<f64> = grid.iter().map(|p| (-p.coords()[0].powi(2) / (2.0 * 0.01)).exp()).collect();
    let total: f64 = density.iter().sum();
    let probs: Vec<f64> = density.iter().map(|d| d / total).collect();
    let convex = RealizabilityFixture {
        name: "convex-grid",
        pool: CandidatePool::new(grid.clone()).expect("valid grid"),
        target: TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::new(grid, probs).expect("valid weights")),
        kernel: kernel.clone(),
        expected_r: 1,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let half: Vec<[f64; 2]> =
        (0..15).map(|_| [2.0 + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect();
    let points: Vec<Point> = half
        .iter()
        .map(|c| vec![c[0], c[1]])
        .chain(half.iter().map(|c| vec![-c[0], -c[1]]))
        .map(|c| Point::new(c).expect("finite"))
        .collect();
    let clusters = RealizabilityFixture {
        name: "two-clusters",
        pool: CandidatePool::new(points.clone()).expect("valid pool"),
        target: TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(points).expect("valid support")),
        kernel,
        expected_r: 2,
    };
    vec![convex, clusters]
}
