//! Atom selection rules and the greedy driver.
//!
//! * WKH picks the candidate most correlated with the current residual,
//!   `argmax z(x) - k_xᵀw`, then re-optimizes all weights.
//! * SBQ picks the candidate with the largest exact decrease of the
//!   posterior variance, `argmax (z(x) - k_xᵀw)² / (1 - k_xᵀK⁻¹k_x)`.
//! * KH keeps uniform weights `1/n`.
//! * MC draws candidates uniformly without replacement; it still gets optimal
//!   weights so it isolates the effect of the selection rule.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::TargetEmbedding;
use crate::error::{Error, Result};
use crate::kernel::{CandidatePool, Kernel, Point};
use crate::state::{QuadratureState, DEPENDENCE_TOL};

/// Runs stop once `g` falls to this level.
pub const G_STOP: f64 = 1e-14;
const STANDARDIZED_TOL: f64 = 1e-10;
/// Candidate scans switch to rayon above this many kernel evaluations.
const PARALLEL_WORK: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Wkh,
    Sbq,
    KhUniform,
    McRandom,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wkh => "wkh",
            Method::Sbq => "sbq",
            Method::KhUniform => "kh",
            Method::McRandom => "mc",
        }
    }

    pub fn uses_optimal_weights(self) -> bool {
        !matches!(self, Method::KhUniform)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wkh" => Ok(Method::Wkh),
            "sbq" => Ok(Method::Sbq),
            "kh" | "kh_uniform" | "herding" => Ok(Method::KhUniform),
            "mc" | "mc_random" | "random" => Ok(Method::McRandom),
            other => Err(Error::UnsupportedMethod(other.to_string())),
        }
    }
}

/// How equal scores are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    LowestId,
    Random(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Realized,
    AllDependent,
    PoolExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub chosen_id: usize,
    pub g: f64,
    pub delta_g: f64,
    /// Winning selection score (residual correlation for WKH/KH, variance
    /// reduction for SBQ, NaN for MC).
    pub score: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub method: Method,
    pub initial_g: f64,
    pub records: Vec<TraceRecord>,
    pub stop_reason: StopReason,
}

impl RunTrace {
    pub fn final_g(&self) -> f64 {
        self.records.last().map_or(self.initial_g, |r| r.g)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `g(S_0), g(S_1), ...` including the empty set.
    pub fn g_values(&self) -> Vec<f64> {
        std::iter::once(self.initial_g).chain(self.records.iter().map(|r| r.g)).collect()
    }

    /// `g` after `i` iterations; truncated runs hold their last value.
    pub fn g_at(&self, i: usize) -> f64 {
        if i == 0 {
            self.initial_g
        } else {
            self.records.get(i - 1).map_or(self.final_g(), |r| r.g)
        }
    }

    pub fn chosen_ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.chosen_id).collect()
    }
}

/// Uniform-weight herding sample, possibly with repeated atoms.
#[derive(Clone, Debug)]
pub struct UniformAccumulator<'a> {
    kernel: &'a Kernel,
    target: &'a TargetEmbedding,
    atoms: Vec<(usize, Point)>,
    sum_z: f64,
    /// `Σ_{i,j} k(x_i, x_j)` over all ordered pairs.
    sum_k: f64,
    c: f64,
}

impl<'a> UniformAccumulator<'a> {
    pub fn new(target: &'a TargetEmbedding, kernel: &'a Kernel) -> Result<Self> {
        let c = target.self_energy(kernel)?;
        Ok(Self::with_self_energy(target, kernel, c))
    }

    pub fn with_self_energy(target: &'a TargetEmbedding, kernel: &'a Kernel, c: f64) -> Self {
        Self { kernel, target, atoms: Vec::new(), sum_z: 0.0, sum_k: 0.0, c }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[(usize, Point)] {
        &self.atoms
    }

    pub fn ids(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.0).collect()
    }

    /// `c - 2·mean(z_i) + mean_{i,j} k(x_i, x_j)`.
    pub fn g(&self) -> f64 {
        if self.atoms.is_empty() {
            return self.c;
        }
        let n = self.atoms.len() as f64;
        self.c - 2.0 * self.sum_z / n + self.sum_k / (n * n)
    }

    /// `Σ_i k(x, x_i)` over the current atoms.
    pub fn kernel_sum(&self, x: &Point) -> Result<f64> {
        self.atoms.iter().try_fold(0.0, |acc, (_, a)| Ok(acc + self.kernel.eval(x, a)?))
    }

    /// Herding score `z(x) - Σ_i k(x, x_i) / (n + 1)`.
    pub fn score(&self, x: &Point) -> Result<f64> {
        let z = self.target.mean_embed(self.kernel, x)?;
        Ok(z - self.kernel_sum(x)? / (self.atoms.len() + 1) as f64)
    }

    pub fn push(&mut self, x: Point, id: usize) -> Result<()> {
        let z = self.target.mean_embed(self.kernel, &x)?;
        let cross = self.kernel_sum(&x)?;
        let diag = self.kernel.eval(&x, &x)?;
        self.push_known(x, id, z, cross, diag);
        Ok(())
    }

    fn push_known(&mut self, x: Point, id: usize, z: f64, cross: f64, diag: f64) {
        self.sum_z += z;
        self.sum_k += 2.0 * cross + diag;
        self.atoms.push((id, x));
    }
}

/// Best `(score, id)` under "higher score wins, then lower id". NaN loses.
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    let sa = if a.0.is_nan() { f64::NEG_INFINITY } else { a.0 };
    let sb = if b.0.is_nan() { f64::NEG_INFINITY } else { b.0 };
    if sa > sb || (sa == sb && a.1 < b.1) {
        a
    } else {
        b
    }
}

/// Picks among scored candidates according to `tie`. `salt` varies the
/// random tie-break between iterations.
fn pick(scored: &[(f64, usize)], tie: TieBreak, salt: u64) -> Option<(f64, usize)> {
    let best = scored.iter().copied().reduce(better)?;
    match tie {
        TieBreak::LowestId => Some(best),
        TieBreak::Random(seed) => {
            let mut tied: Vec<(f64, usize)> = scored.iter().copied().filter(|s| s.0 == best.0).collect();
            if tied.len() == 1 {
                return Some(best);
            }
            tied.sort_by_key(|s| s.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            tied.choose(&mut rng).copied()
        }
    }
}

fn candidates<'p>(pool: &'p CandidatePool, excluded: &[usize]) -> Vec<(usize, &'p Point)> {
    let excluded: HashSet<usize> = excluded.iter().copied().collect();
    pool.ids().filter(|id| !excluded.contains(id)).map(|id| (id, pool.point(id))).collect()
}

fn scan(
    state: &QuadratureState<'_>,
    pool: &CandidatePool,
    excluded: &[usize],
    score: impl Fn(&crate::state::Projection) -> f64 + Sync,
) -> Result<usize> {
    let cands = candidates(pool, excluded);
    if cands.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scored: Vec<(f64, usize)> = cands
        .iter()
        .map(|(id, x)| Ok((state.project(x)?, *id)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(proj, _)| !proj.is_dependent())
        .map(|(proj, id)| (score(&proj), id))
        .collect();
    pick(&scored, TieBreak::LowestId, 0).map(|s| s.1).ok_or(Error::AllDependent)
}

/// WKH rule: the non-excluded, independent candidate maximizing
/// `z(x) - k_xᵀw`, ties to the lowest id.
pub fn wkh_select(state: &QuadratureState<'_>, pool: &CandidatePool, excluded: &[usize]) -> Result<usize> {
    scan(state, pool, excluded, |p| p.correlation)
}

/// SBQ rule: the candidate with the largest exact decrease of `g`, which is
/// the minimizer of the posterior variance after adding it.
pub fn sbq_select(state: &QuadratureState<'_>, pool: &CandidatePool, excluded: &[usize]) -> Result<usize> {
    scan(state, pool, excluded, |p| p.variance_reduction())
}

/// Uniform-weight herding step over the non-excluded candidates.
pub fn kh_uniform_step(acc: &UniformAccumulator<'_>, pool: &CandidatePool, excluded: &[usize]) -> Result<usize> {
    let cands = candidates(pool, excluded);
    if cands.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scored = cands
        .iter()
        .map(|(id, x)| Ok((acc.score(x)?, *id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(&scored, TieBreak::LowestId, 0).expect("non-empty").1)
}

/// Result of a greedy run: the weighted rule (or uniform sample) and its
/// trace.
#[derive(Clone, Debug)]
pub enum Solution<'a> {
    Weighted(QuadratureState<'a>),
    Uniform(UniformAccumulator<'a>),
}

impl<'a> Solution<'a> {
    pub fn g(&self) -> f64 {
        match self {
            Solution::Weighted(s) => s.g(),
            Solution::Uniform(u) => u.g(),
        }
    }

    pub fn ids(&self) -> Vec<usize> {
        match self {
            Solution::Weighted(s) => s.ids(),
            Solution::Uniform(u) => u.ids(),
        }
    }

    /// Quadrature weights; `1/n` each for the uniform rule.
    pub fn weights(&self) -> Vec<f64> {
        match self {
            Solution::Weighted(s) => s.weights().to_vec(),
            Solution::Uniform(u) => vec![1.0 / u.len().max(1) as f64; u.len()],
        }
    }

    pub fn as_weighted(&self) -> Option<&QuadratureState<'a>> {
        match self {
            Solution::Weighted(s) => Some(s),
            Solution::Uniform(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GreedyRun<'a> {
    pub solution: Solution<'a>,
    pub trace: RunTrace,
}

impl GreedyRun<'_> {
    /// Maps local ids to pool ids: id `i` becomes `map[i]`.
    pub fn relabel(&mut self, map: &[usize]) {
        match &mut self.solution {
            Solution::Weighted(s) => s.relabel(map),
            Solution::Uniform(u) => u.atoms.iter_mut().for_each(|(id, _)| *id = map[*id]),
        }
        for r in &mut self.trace.records {
            r.chosen_id = map[r.chosen_id];
        }
    }
}

/// Options of the greedy driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Greedy {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub tie_break: TieBreak,
    /// Uniform herding may re-pick atoms.
    pub with_replacement: bool,
    pub g_stop: f64,
    pub require_standardized: bool,
    pub record_timing: bool,
}

impl Greedy {
    pub fn new(method: Method, k: usize) -> Self {
        Self {
            method,
            k,
            seed: 0,
            tie_break: TieBreak::LowestId,
            with_replacement: false,
            g_stop: G_STOP,
            require_standardized: true,
            record_timing: true,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn tie_break(mut self, tie: TieBreak) -> Self {
        self.tie_break = tie;
        self
    }

    pub fn with_replacement(mut self, yes: bool) -> Self {
        self.with_replacement = yes;
        self
    }

    pub fn require_standardized(mut self, yes: bool) -> Self {
        self.require_standardized = yes;
        self
    }

    pub fn record_timing(mut self, yes: bool) -> Self {
        self.record_timing = yes;
        self
    }

    /// Runs over the whole pool.
    pub fn run<'a>(&self, pool: &CandidatePool, target: &'a TargetEmbedding, kernel: &'a Kernel) -> Result<GreedyRun<'a>> {
        let ids: Vec<usize> = pool.ids().collect();
        let c = target.self_energy(kernel)?;
        self.run_subset(pool, &ids, target, kernel, c)
    }

    /// Runs over the pool entries named by `ids` (a shard, or the collated
    /// iterates of several workers). Chosen ids refer to the full pool.
    pub fn run_subset<'a>(
        &self,
        pool: &CandidatePool,
        ids: &[usize],
        target: &'a TargetEmbedding,
        kernel: &'a Kernel,
        self_energy: f64,
    ) -> Result<GreedyRun<'a>> {
        if self.k == 0 {
            return Err(Error::ZeroBudget);
        }
        if ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let ids = &sorted[..];
        if self.require_standardized
            && !ids.iter().all(|&i| {
                let x = pool.point(i);
                matches!(kernel.eval(x, x), Ok(v) if (v - 1.0).abs() <= STANDARDIZED_TOL)
            })
        {
            return Err(Error::NotStandardized);
        }
        match self.method {
            Method::Wkh | Method::Sbq => self.run_optimal(pool, ids, target, kernel, self_energy),
            Method::McRandom => self.run_random(pool, ids, target, kernel, self_energy),
            Method::KhUniform => self.run_uniform(pool, ids, target, kernel, self_energy),
        }
    }

    fn embeddings(pool: &CandidatePool, ids: &[usize], target: &TargetEmbedding, kernel: &Kernel) -> Result<Vec<f64>> {
        if ids.len() > 256 {
            ids.par_iter().map(|&i| target.mean_embed(kernel, pool.point(i))).collect()
        } else {
            ids.iter().map(|&i| target.mean_embed(kernel, pool.point(i))).collect()
        }
    }

    fn elapsed(&self, start: &Instant) -> f64 {
        if self.record_timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    }

    fn run_optimal<'a>(
        &self,
        pool: &CandidatePool,
        ids: &[usize],
        target: &'a TargetEmbedding,
        kernel: &'a Kernel,
        c: f64,
    ) -> Result<GreedyRun<'a>> {
        let start = Instant::now();
        let z = Self::embeddings(pool, ids, target, kernel)?;
        let mut cache = CandidateCache::new(pool, ids, &z, kernel)?;
        let mut state = QuadratureState::with_self_energy(target, kernel, c);
        let mut records = Vec::new();
        let mut stop = StopReason::Budget;
        let mut attempt = 0u64;
        while records.len() < self.k {
            attempt += 1;
            if state.g() <= self.g_stop {
                stop = StopReason::Realized;
                break;
            }
            if cache.live_count() == 0 {
                stop = StopReason::PoolExhausted;
                break;
            }
            let scored = cache.scores(&state, self.method);
            let Some((score, slot)) = pick(&scored, self.tie_break, attempt) else {
                stop = StopReason::AllDependent;
                break;
            };
            let id = cache.ids[slot];
            let g_before = state.g();
            match state.add_atom_with_embedding(pool.point(id).clone(), id, z[slot]) {
                Ok(()) => {}
                // The cached Schur complement disagreed with a fresh one at the
                // tolerance boundary.
                Err(Error::NearDependentAtom { .. }) => {
                    cache.retire(slot);
                    continue;
                }
                Err(e) => return Err(e),
            }
            cache.retire(slot);
            cache.extend(&state, pool)?;
            records.push(TraceRecord {
                iteration: records.len() + 1,
                chosen_id: id,
                g: state.g(),
                delta_g: g_before - state.g(),
                score,
                elapsed_ms: self.elapsed(&start),
            });
        }
        Ok(GreedyRun {
            trace: RunTrace { method: self.method, initial_g: c, records, stop_reason: stop },
            solution: Solution::Weighted(state),
        })
    }

    fn run_random<'a>(
        &self,
        pool: &CandidatePool,
        ids: &[usize],
        target: &'a TargetEmbedding,
        kernel: &'a Kernel,
        c: f64,
    ) -> Result<GreedyRun<'a>> {
        let start = Instant::now();
        let mut order = ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut state = QuadratureState::with_self_energy(target, kernel, c);
        let mut records = Vec::new();
        for id in order {
            if records.len() == self.k {
                break;
            }
            let g_before = state.g();
            match state.add_atom(pool.point(id).clone(), id) {
                Ok(()) => {}
                Err(Error::NearDependentAtom { .. }) => continue,
                Err(e) => return Err(e),
            }
            records.push(TraceRecord {
                iteration: records.len() + 1,
                chosen_id: id,
                g: state.g(),
                delta_g: g_before - state.g(),
                score: f64::NAN,
                elapsed_ms: self.elapsed(&start),
            });
        }
        let stop = if records.len() == self.k { StopReason::Budget } else { StopReason::PoolExhausted };
        Ok(GreedyRun {
            trace: RunTrace { method: self.method, initial_g: c, records, stop_reason: stop },
            solution: Solution::Weighted(state),
        })
    }

    fn run_uniform<'a>(
        &self,
        pool: &CandidatePool,
        ids: &[usize],
        target: &'a TargetEmbedding,
        kernel: &'a Kernel,
        c: f64,
    ) -> Result<GreedyRun<'a>> {
        let start = Instant::now();
        let z = Self::embeddings(pool, ids, target, kernel)?;
        let diag: Vec<f64> = ids
            .iter()
            .map(|&i| kernel.eval(pool.point(i), pool.point(i)))
            .collect::<Result<_>>()?;
        let mut sums = vec![0.0; ids.len()];
        let mut live = vec![true; ids.len()];
        let mut acc = UniformAccumulator::with_self_energy(target, kernel, c);
        let mut records = Vec::new();
        let mut stop = StopReason::Budget;
        for iteration in 1..=self.k {
            let denom = (acc.len() + 1) as f64;
            let scored: Vec<(f64, usize)> = (0..ids.len())
                .filter(|&s| live[s])
                .map(|s| (z[s] - sums[s] / denom, s))
                .collect();
            let Some((score, slot)) = pick(&scored, self.tie_break, iteration as u64) else {
                stop = StopReason::PoolExhausted;
                break;
            };
            let id = ids[slot];
            let chosen = pool.point(id).clone();
            let g_before = acc.g();
            acc.push_known(chosen.clone(), id, z[slot], sums[slot], diag[slot]);
            if !self.with_replacement {
                live[slot] = false;
            }
            let update = |(s, sum): (usize, &mut f64)| -> Result<()> {
                *sum += kernel.eval(pool.point(ids[s]), &chosen)?;
                Ok(())
            };
            if ids.len() > PARALLEL_WORK / 4 {
                sums.par_iter_mut().enumerate().try_for_each(update)?;
            } else {
                sums.iter_mut().enumerate().try_for_each(update)?;
            }
            records.push(TraceRecord {
                iteration,
                chosen_id: id,
                g: acc.g(),
                delta_g: g_before - acc.g(),
                score,
                elapsed_ms: self.elapsed(&start),
            });
        }
        Ok(GreedyRun {
            trace: RunTrace { method: self.method, initial_g: c, records, stop_reason: stop },
            solution: Solution::Uniform(acc),
        })
    }
}

/// Per-candidate projections `v_x = L⁻¹k_x`, extended by one entry per new
/// atom so a scan costs `O(i)` per candidate instead of `O(i²)`.
struct CandidateCache<'k> {
    kernel: &'k Kernel,
    ids: Vec<usize>,
    z: Vec<f64>,
    diag: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
    norm_sq: Vec<f64>,
    live: Vec<bool>,
    atoms: usize,
}

impl<'k> CandidateCache<'k> {
    fn new(pool: &CandidatePool, ids: &[usize], z: &[f64], kernel: &'k Kernel) -> Result<Self> {
        let diag = ids
            .iter()
            .map(|&i| kernel.eval(pool.point(i), pool.point(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernel,
            ids: ids.to_vec(),
            z: z.to_vec(),
            diag,
            coeffs: vec![Vec::new(); ids.len()],
            norm_sq: vec![0.0; ids.len()],
            live: vec![true; ids.len()],
            atoms: 0,
        })
    }

    fn live_count(&self) -> usize {
        self.live.iter().filter(|l| **l).count()
    }

    fn retire(&mut self, slot: usize) {
        self.live[slot] = false;
    }

    fn parallel(&self) -> bool {
        self.ids.len() * (self.atoms + 1) > PARALLEL_WORK
    }

    /// `(score, slot)` for every live, independent candidate.
    fn scores(&self, state: &QuadratureState<'_>, method: Method) -> Vec<(f64, usize)> {
        let alpha = state.alpha();
        let score = |slot: usize| -> Option<(f64, usize)> {
            if !self.live[slot] {
                return None;
            }
            let schur = self.diag[slot] - self.norm_sq[slot];
            if !(schur >= DEPENDENCE_TOL) {
                return None;
            }
            let fitted: f64 = self.coeffs[slot].iter().zip(alpha).map(|(v, a)| v * a).sum();
            let corr = self.z[slot] - fitted;
            let s = match method {
                Method::Sbq => corr * corr / schur,
                _ => corr,
            };
            Some((s, slot))
        };
        // Slots are in ascending id order within a run, so lowest-slot ties
        // are lowest-id ties.
        if self.parallel() {
            (0..self.ids.len()).into_par_iter().filter_map(score).collect()
        } else {
            (0..self.ids.len()).filter_map(score).collect()
        }
    }

    /// Appends the projection coefficient on the newest atom.
    fn extend(&mut self, state: &QuadratureState<'_>, pool: &CandidatePool) -> Result<()> {
        let last = state.len() - 1;
        let row = state.cholesky_row(last);
        let newest = &state.atoms()[last].point;
        let kernel = self.kernel;
        let ids = &self.ids;
        let update = |slot: usize, coeffs: &mut Vec<f64>, norm: &mut f64, live: bool| -> Result<()> {
            if !live {
                return Ok(());
            }
            let k = kernel.eval(pool.point(ids[slot]), newest)?;
            let dot: f64 = row[..last].iter().zip(coeffs.iter()).map(|(l, v)| l * v).sum();
            let v = (k - dot) / row[last];
            coeffs.push(v);
            *norm += v * v;
            Ok(())
        };
        let parallel = self.parallel();
        if parallel {
            self.coeffs
                .par_iter_mut()
                .zip(self.norm_sq.par_iter_mut())
                .zip(self.live.par_iter())
                .enumerate()
                .try_for_each(|(slot, ((c, n), l))| update(slot, c, n, *l))?;
        } else {
            self.coeffs
                .iter_mut()
                .zip(self.norm_sq.iter_mut())
                .zip(self.live.iter())
                .enumerate()
                .try_for_each(|(slot, ((c, n), l))| update(slot, c, n, *l))?;
        }
        self.atoms += 1;
        Ok(())
    }
}

/// Runs `k` greedy iterations of `method` over the whole pool with default
/// options.
pub fn run_greedy<'a>(
    method: Method,
    pool: &CandidatePool,
    target: &'a TargetEmbedding,
    kernel: &'a Kernel,
    k: usize,
    seed: u64,
) -> Result<GreedyRun<'a>> {
    Greedy::new(method, k).seed(seed).run(pool, target, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmpiricalDiscrete, GaussianMixture};
    use crate::kernel::FeatureMap;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn p(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    fn random_pool(rng: &mut ChaCha8Rng, n: usize, d: usize, span: f64) -> CandidatePool {
        CandidatePool::new(
            (0..n)
                .map(|_| p(&(0..d).map(|_| rng.random_range(-span..span)).collect::<Vec<_>>()))
                .collect(),
        )
        .unwrap()
    }

    fn random_discrete(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TargetEmbedding {
        let pts = random_pool(rng, n, d, 2.0).points().to_vec();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::new(pts, raw.iter().map(|r| r / s).collect()).unwrap())
    }

    /// `g` of the atoms `ids` by a dense solve.
    fn dense_g(pool: &CandidatePool, target: &TargetEmbedding, kernel: &Kernel, ids: &[usize]) -> f64 {
        let c = target.self_energy(kernel).unwrap();
        if ids.is_empty() {
            return c;
        }
        let n = ids.len();
        let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(pool.point(ids[i]), pool.point(ids[j])).unwrap());
        let z = DVector::from_fn(n, |i, _| target.mean_embed(kernel, pool.point(ids[i])).unwrap());
        c - z.dot(&k.lu().solve(&z).unwrap())
    }

    /// Residual correlations by dense solve: `z(x) - k_xᵀK⁻¹z`.
    fn dense_correlation(pool: &CandidatePool, target: &TargetEmbedding, kernel: &Kernel, ids: &[usize], x: &Point) -> f64 {
        let n = ids.len();
        let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(pool.point(ids[i]), pool.point(ids[j])).unwrap());
        let z = DVector::from_fn(n, |i, _| target.mean_embed(kernel, pool.point(ids[i])).unwrap());
        let kx = DVector::from_fn(n, |i, _| kernel.eval(x, pool.point(ids[i])).unwrap());
        target.mean_embed(kernel, x).unwrap() - kx.dot(&k.lu().solve(&z).unwrap())
    }

    #[test]
    fn singleton_target_selects_support_point() {
        let pool = CandidatePool::new(vec![p(&[-1.0]), p(&[0.5]), p(&[2.0])]).unwrap();
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![p(&[0.5])]).unwrap());
        let k = Kernel::rbf(1.0).unwrap();
        let s = QuadratureState::new(&target, &k).unwrap();
        assert_eq!(wkh_select(&s, &pool, &[]).unwrap(), 1);
        assert_eq!(sbq_select(&s, &pool, &[]).unwrap(), 1);
        let acc = UniformAccumulator::new(&target, &k).unwrap();
        assert_eq!(kh_uniform_step(&acc, &pool, &[]).unwrap(), 1);
        assert_eq!(wkh_select(&s, &pool, &[0, 1, 2]), Err(Error::EmptyPool));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let k = Kernel::precomputed(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let pool = CandidatePool::new(vec![Point::index(0), Point::index(1), Point::index(2)]).unwrap();
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![Point::index(1), Point::index(2)]).unwrap());
        let s = QuadratureState::new(&target, &k).unwrap();
        assert_eq!(wkh_select(&s, &pool, &[]).unwrap(), 1);
        assert_eq!(sbq_select(&s, &pool, &[]).unwrap(), 1);

        // Random tie-breaking is reproducible and stays within the tied set.
        let picks: Vec<usize> = (0..20)
            .map(|seed| {
                let run = Greedy::new(Method::Wkh, 1).tie_break(TieBreak::Random(seed)).run(&pool, &target, &k).unwrap();
                run.trace.records[0].chosen_id
            })
            .collect();
        assert!(picks.iter().all(|&id| id == 1 || id == 2));
        assert!(picks.contains(&1) && picks.contains(&2));
        let again = Greedy::new(Method::Wkh, 1).tie_break(TieBreak::Random(3)).run(&pool, &target, &k).unwrap();
        assert_eq!(again.trace.records[0].chosen_id, picks[3]);
    }

    #[test]
    fn selections_match_exhaustive_scans() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let pool = random_pool(&mut rng, 8, 2, 2.0);
            let target = random_discrete(&mut rng, 5, 2);
            let k = Kernel::rbf(rng.random_range(0.5..1.5)).unwrap();
            let atoms = [0usize, 3, 6];
            let s = QuadratureState::from_atoms(&target, &k, atoms.iter().map(|&i| (i, pool.point(i).clone()))).unwrap();

            let free: Vec<usize> = pool.ids().filter(|i| !atoms.contains(i)).collect();
            let wkh_oracle = *free
                .iter()
                .max_by(|&&a, &&b| {
                    let (sa, sb) = (
                        dense_correlation(&pool, &target, &k, &atoms, pool.point(a)),
                        dense_correlation(&pool, &target, &k, &atoms, pool.point(b)),
                    );
                    sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(wkh_select(&s, &pool, &atoms).unwrap(), wkh_oracle);

            let sbq_oracle = *free
                .iter()
                .min_by(|&&a, &&b| {
                    let ga = dense_g(&pool, &target, &k, &[0, 3, 6, a]);
                    let gb = dense_g(&pool, &target, &k, &[0, 3, 6, b]);
                    ga.partial_cmp(&gb).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(sbq_select(&s, &pool, &atoms).unwrap(), sbq_oracle);
        }
    }

    #[test]
    fn sbq_starts_at_largest_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = random_pool(&mut rng, 30, 2, 3.0);
        let target = random_discrete(&mut rng, 6, 2);
        let k = Kernel::rbf(0.7).unwrap();
        let s = QuadratureState::new(&target, &k).unwrap();
        let best = pool
            .ids()
            .map(|i| (target.mean_embed(&k, pool.point(i)).unwrap().powi(2), i))
            .reduce(better)
            .unwrap()
            .1;
        assert_eq!(sbq_select(&s, &pool, &[]).unwrap(), best);
        assert_eq!(wkh_select(&s, &pool, &[]).unwrap(), best);
        for i in pool.ids() {
            let z = target.mean_embed(&k, pool.point(i)).unwrap();
            assert!((s.posterior_variance_reduction(pool.point(i)).unwrap() - z * z).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_herding_on_singleton_target() {
        let pool = CandidatePool::new(vec![p(&[0.0]), p(&[1.0]), p(&[3.0])]).unwrap();
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![p(&[1.0])]).unwrap());
        let k = Kernel::rbf(1.0).unwrap();
        let run = Greedy::new(Method::KhUniform, 4).with_replacement(true).run(&pool, &target, &k).unwrap();
        assert_eq!(run.trace.chosen_ids(), vec![1, 1, 1, 1]);
        assert!(run.trace.records.iter().all(|r| r.g.abs() < 1e-15));
    }

    #[test]
    fn uniform_weights_never_beat_optimal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let pool = random_pool(&mut rng, 20, 2, 2.0);
            let target = random_discrete(&mut rng, 7, 2);
            let k = Kernel::rbf(rng.random_range(0.5..1.5)).unwrap();
            let run = Greedy::new(Method::KhUniform, 5).run(&pool, &target, &k).unwrap();
            let mut replay = QuadratureState::new(&target, &k).unwrap();
            let mut acc = UniformAccumulator::new(&target, &k).unwrap();
            for r in &run.trace.records {
                replay.add_atom(pool.point(r.chosen_id).clone(), r.chosen_id).unwrap();
                acc.push(pool.point(r.chosen_id).clone(), r.chosen_id).unwrap();
                assert!(r.g >= replay.g() - 1e-12);
                assert!((r.g - acc.g()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wkh_on_singleton_target_stops_after_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = random_pool(&mut rng, 15, 2, 2.0);
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![pool.point(9).clone()]).unwrap());
        let k = Kernel::rbf(0.8).unwrap();
        for method in [Method::Wkh, Method::Sbq] {
            let run = run_greedy(method, &pool, &target, &k, 5, 0).unwrap();
            assert_eq!(run.trace.chosen_ids(), vec![9]);
            assert_eq!(run.trace.final_g(), 0.0);
            assert_eq!(run.trace.stop_reason, StopReason::Realized);
        }
    }

    #[test]
    fn first_sbq_step_dominates_wkh() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let pool = random_pool(&mut rng, 40, 2, 3.0);
            let target = random_discrete(&mut rng, 8, 2);
            let k = Kernel::rbf(rng.random_range(0.3..2.0)).unwrap();
            let prefix = Greedy::new(Method::McRandom, 3).seed(rng.random()).run(&pool, &target, &k).unwrap();
            let base = prefix.solution.as_weighted().unwrap();
            let mut a = base.clone();
            let mut b = base.clone();
            let excluded = base.ids();
            let i = sbq_select(base, &pool, &excluded).unwrap();
            let j = wkh_select(base, &pool, &excluded).unwrap();
            a.add_atom(pool.point(i).clone(), i).unwrap();
            b.add_atom(pool.point(j).clone(), j).unwrap();
            assert!(a.g() <= b.g() + 1e-10);
        }
    }

    #[test]
    fn finite_dimensional_kernel_is_realized_in_d_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for d in [2usize, 3, 5] {
            let pool = random_pool(&mut rng, 120, d, 1.0);
            let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points().to_vec()).unwrap());
            let k = Kernel::cosine();
            for method in [Method::Wkh, Method::Sbq] {
                let run = run_greedy(method, &pool, &target, &k, d, 0).unwrap();
                assert!(run.trace.final_g() <= 1e-8, "d={d} {method}: {}", run.trace.final_g());
                // Least-squares oracle: project the mean of normalized features
                // onto the chosen atoms.
                let unit = |x: &Point| {
                    let v = DVector::from_column_slice(x.coords());
                    v.normalize()
                };
                let mu = pool.points().iter().map(unit).fold(DVector::zeros(d), |a, b| a + b) / pool.len() as f64;
                let ids = run.solution.ids();
                let basis = DMatrix::from_columns(&ids.iter().map(|&i| unit(pool.point(i))).collect::<Vec<_>>());
                let coef = basis.clone().svd(true, true).solve(&mu, 1e-14).unwrap();
                assert!((&basis * coef - &mu).norm_squared() <= 1e-8);
            }
        }
    }

    #[test]
    fn driver_agrees_with_stateless_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = random_pool(&mut rng, 60, 2, 3.0);
        let mixture = GaussianMixture::diagonal(
            vec![0.4, 0.6],
            vec![vec![-1.0, 0.0], vec![1.0, 1.0]],
            vec![vec![0.3, 0.2], vec![0.2, 0.4]],
        )
        .unwrap();
        let target = TargetEmbedding::GaussianMixture(mixture);
        let k = Kernel::rbf(0.9).unwrap();
        for method in [Method::Wkh, Method::Sbq] {
            let run = run_greedy(method, &pool, &target, &k, 12, 0).unwrap();
            let mut s = QuadratureState::new(&target, &k).unwrap();
            for r in &run.trace.records {
                let expected = match method {
                    Method::Wkh => wkh_select(&s, &pool, &s.ids()).unwrap(),
                    _ => sbq_select(&s, &pool, &s.ids()).unwrap(),
                };
                assert_eq!(r.chosen_id, expected);
                s.add_atom(pool.point(expected).clone(), expected).unwrap();
                assert!((s.g() - r.g).abs() < 1e-12);
            }
            let g = run.trace.g_values();
            assert!(g.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = random_pool(&mut rng, 400, 2, 3.0);
        let target = random_discrete(&mut rng, 30, 2);
        let k = Kernel::rbf(0.5).unwrap();
        for method in [Method::Wkh, Method::Sbq, Method::KhUniform, Method::McRandom] {
            let a = run_greedy(method, &pool, &target, &k, 60, 9).unwrap();
            let b = run_greedy(method, &pool, &target, &k, 60, 9).unwrap();
            assert_eq!(a.trace.chosen_ids(), b.trace.chosen_ids());
            assert_eq!(a.trace.g_values(), b.trace.g_values());
        }
    }

    #[test]
    fn random_selection_is_without_replacement_and_reweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pool = random_pool(&mut rng, 25, 2, 2.0);
        let target = random_discrete(&mut rng, 5, 2);
        let k = Kernel::rbf(0.6).unwrap();
        let run = run_greedy(Method::McRandom, &pool, &target, &k, 10, 77).unwrap();
        let mut ids = run.trace.chosen_ids();
        assert_eq!(ids.len(), 10);
        assert!((run.trace.final_g() - dense_g(&pool, &target, &k, &ids)).abs() < 1e-10);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn rejects_bad_runs() {
        let pool = CandidatePool::new(vec![p(&[0.0, 2.0])]).unwrap();
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![p(&[0.0, 2.0])]).unwrap());
        let k = Kernel::rbf(1.0).unwrap();
        assert_eq!(run_greedy(Method::Wkh, &pool, &target, &k, 0, 0).unwrap_err(), Error::ZeroBudget);
        let raw = Kernel::Linear(FeatureMap::Identity);
        assert_eq!(run_greedy(Method::Wkh, &pool, &target, &raw, 1, 0).unwrap_err(), Error::NotStandardized);
        assert!(Greedy::new(Method::Wkh, 1).require_standardized(false).run(&pool, &target, &raw).is_ok());
        assert_eq!("SBQ".parse::<Method>().unwrap(), Method::Sbq);
        assert!("fw".parse::<Method>().is_err());
    }
}
