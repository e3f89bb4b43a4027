//! Distributed greedy selection.
//!
//! The pool is split uniformly at random across `s` shared-nothing workers.
//! Each worker runs the greedy rule on its shard, an aggregator reruns the
//! same rule over the union of everything the workers selected, and the best
//! of the `s + 1` solutions (smallest `g`) is returned.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::TargetEmbedding;
use crate::error::{Error, Result};
use crate::kernel::{CandidatePool, Kernel, Point};
use crate::select::{Greedy, GreedyRun, Method, RunTrace, Solution, StopReason};
use crate::state::QuadratureState;

/// Assignment of every pool id to one of `s` workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    workers: usize,
    assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Ids held by `worker`, ascending.
    pub fn shard(&self, worker: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, w)| **w == worker)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn shards(&self) -> Vec<Vec<usize>> {
        let mut shards = vec![Vec::new(); self.workers];
        for (id, &w) in self.assignment.iter().enumerate() {
            shards[w].push(id);
        }
        shards
    }
}

/// Assigns each id to a worker uniformly at random. An empty worker takes
/// the highest id of the currently largest shard.
pub fn partition(pool: &CandidatePool, s: usize, seed: u64) -> Result<PartitionPlan> {
    partition_ids(pool.len(), s, seed)
}

pub fn partition_ids(n: usize, s: usize, seed: u64) -> Result<PartitionPlan> {
    if s == 0 || n < s {
        return Err(Error::PoolSmallerThanWorkers { pool: n, workers: s });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..s)).collect();
    loop {
        let mut sizes = vec![0usize; s];
        for &w in &assignment {
            sizes[w] += 1;
        }
        let Some(empty) = sizes.iter().position(|&c| c == 0) else { break };
        let largest = (0..s).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).expect("s >= 1");
        let donor = assignment.iter().rposition(|&w| w == largest).expect("largest shard is non-empty");
        assignment[donor] = empty;
    }
    Ok(PartitionPlan { workers: s, assignment })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTiming {
    pub partition_ms: f64,
    pub workers_ms: f64,
    pub aggregate_ms: f64,
}

#[derive(Clone, Debug)]
pub struct DistributedResult<'a> {
    pub plan: PartitionPlan,
    /// Worker solutions `0..s`, then the aggregator at index `s`.
    pub solutions: Vec<GreedyRun<'a>>,
    /// Sorted union of the worker-selected ids.
    pub collated: Vec<usize>,
    pub winner: usize,
    pub timing: PhaseTiming,
}

impl<'a> DistributedResult<'a> {
    pub fn workers(&self) -> usize {
        self.plan.workers()
    }

    pub fn solution_g(&self) -> Vec<f64> {
        self.solutions.iter().map(|r| r.solution.g()).collect()
    }

    pub fn winner_run(&self) -> &GreedyRun<'a> {
        &self.solutions[self.winner]
    }

    pub fn winner_g(&self) -> f64 {
        self.winner_run().solution.g()
    }

    pub fn winner_ids(&self) -> Vec<usize> {
        self.winner_run().solution.ids()
    }

    pub fn winner_weights(&self) -> Vec<f64> {
        self.winner_run().solution.weights()
    }

    pub fn aggregator(&self) -> &GreedyRun<'a> {
        &self.solutions[self.workers()]
    }

    /// `min_j g_j(S_i)` over the `s + 1` trace prefixes, for `i = 0..=k`.
    pub fn best_prefix_g(&self, k: usize) -> Vec<f64> {
        (0..=k)
            .map(|i| self.solutions.iter().map(|r| r.trace.g_at(i)).fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Options for [`run_distributed_with`].
#[derive(Clone, Debug)]
pub struct Distributed {
    pub greedy: Greedy,
    pub workers: usize,
    /// When set, shards and returned iterates travel through CSV files in
    /// this directory instead of memory.
    pub spill_dir: Option<PathBuf>,
}

impl Distributed {
    pub fn new(method: Method, k: usize, workers: usize) -> Self {
        Self { greedy: Greedy::new(method, k), workers, spill_dir: None }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.greedy = self.greedy.seed(seed);
        self
    }

    pub fn spill_to(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spill_dir = Some(dir.into());
        self
    }
}

fn worker_seed(seed: u64, worker: usize) -> u64 {
    seed ^ (worker as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn empty_run<'a>(method: Method, target: &'a TargetEmbedding, kernel: &'a Kernel, c: f64) -> GreedyRun<'a> {
    GreedyRun {
        solution: Solution::Weighted(QuadratureState::with_self_energy(target, kernel, c)),
        trace: RunTrace { method, initial_g: c, records: Vec::new(), stop_reason: StopReason::PoolExhausted },
    }
}

/// Distributed greedy selection with default options.
pub fn run_distributed<'a>(
    method: Method,
    pool: &CandidatePool,
    target: &'a TargetEmbedding,
    kernel: &'a Kernel,
    k: usize,
    s: usize,
    seed: u64,
) -> Result<DistributedResult<'a>> {
    run_distributed_with(&Distributed::new(method, k, s).seed(seed), pool, target, kernel)
}

pub fn run_distributed_with<'a>(
    opts: &Distributed,
    pool: &CandidatePool,
    target: &'a TargetEmbedding,
    kernel: &'a Kernel,
) -> Result<DistributedResult<'a>> {
    let method = opts.greedy.method;
    if !matches!(method, Method::Wkh | Method::Sbq) {
        return Err(Error::UnsupportedMethod(format!("{method} (distributed runs need WKH or SBQ)")));
    }
    let clock = |t: &Instant| if opts.greedy.record_timing { t.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let c = target.self_energy(kernel)?;

    let t0 = Instant::now();
    let plan = partition(pool, opts.workers, opts.greedy.seed)?;
    let shards = plan.shards();
    if let Some(dir) = &opts.spill_dir {
        fs::create_dir_all(dir)?;
        for (w, shard) in shards.iter().enumerate() {
            write_shard(&dir.join(format!("shard_{w}.csv")), pool, shard)?;
        }
    }
    let partition_ms = clock(&t0);

    let t1 = Instant::now();
    let mut solutions: Vec<GreedyRun<'a>> = shards
        .par_iter()
        .enumerate()
        .map(|(w, shard)| {
            let greedy = opts.greedy.seed(worker_seed(opts.greedy.seed, w));
            let run = match &opts.spill_dir {
                None => greedy.run_subset(pool, shard, target, kernel, c),
                Some(dir) => run_spilled_worker(&greedy, dir, w, target, kernel, c),
            };
            match run {
                Ok(run) => Ok(run),
                Err(Error::AllDependent) => Ok(empty_run(method, target, kernel, c)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let workers_ms = clock(&t1);

    let t2 = Instant::now();
    let mut collated: Vec<usize> = match &opts.spill_dir {
        None => solutions.iter().flat_map(|r| r.solution.ids()).collect(),
        Some(dir) => {
            let mut ids = Vec::new();
            for w in 0..plan.workers() {
                ids.extend(read_iterates(&dir.join(format!("iterates_{w}.csv")))?.into_iter().map(|(id, _)| id));
            }
            ids
        }
    };
    collated.sort_unstable();
    collated.dedup();
    let aggregate = if collated.is_empty() {
        empty_run(method, target, kernel, c)
    } else {
        opts.greedy.run_subset(pool, &collated, target, kernel, c)?
    };
    solutions.push(aggregate);
    let aggregate_ms = clock(&t2);

    let winner = solutions
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, r)| if r.solution.g() < best.1 { (i, r.solution.g()) } else { best })
        .0;
    Ok(DistributedResult {
        plan,
        solutions,
        collated,
        winner,
        timing: PhaseTiming { partition_ms, workers_ms, aggregate_ms },
    })
}

/// Worker that only sees its shard file; writes its iterates back out.
fn run_spilled_worker<'a>(
    greedy: &Greedy,
    dir: &Path,
    worker: usize,
    target: &'a TargetEmbedding,
    kernel: &'a Kernel,
    c: f64,
) -> Result<GreedyRun<'a>> {
    let (ids, points) = read_shard(&dir.join(format!("shard_{worker}.csv")))?;
    let local = CandidatePool::new(points)?;
    let local_ids: Vec<usize> = local.ids().collect();
    let mut run = greedy.run_subset(&local, &local_ids, target, kernel, c)?;
    run.relabel(&ids);
    let rows: Vec<(usize, f64)> = run.solution.ids().into_iter().zip(run.solution.weights()).collect();
    write_iterates(&dir.join(format!("iterates_{worker}.csv")), &rows)?;
    Ok(run)
}

fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut out)?;
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Shard file: header `pool_id,x0,..,x{d-1}`, one row per point.
pub fn write_shard(path: &Path, pool: &CandidatePool, ids: &[usize]) -> Result<()> {
    write_atomically(path, |out| {
        let header: Vec<String> = (0..pool.dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "pool_id,{}", header.join(","))?;
        for &id in ids {
            let coords: Vec<String> = pool.point(id).coords().iter().map(|c| c.to_string()).collect();
            writeln!(out, "{id},{}", coords.join(","))?;
        }
        Ok(())
    })
}

pub fn read_shard(path: &Path) -> Result<(Vec<usize>, Vec<Point>)> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for (n, line) in file.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
        let id = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| parse_err("bad pool id".into()))?;
        let coords = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        points.push(Point::new(coords).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok((ids, points))
}

/// Iterate file: header `pool_id,weight`.
pub fn write_iterates(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    write_atomically(path, |out| {
        writeln!(out, "pool_id,weight")?;
        for (id, w) in rows {
            writeln!(out, "{id},{w}")?;
        }
        Ok(())
    })
}

pub fn read_iterates(path: &Path) -> Result<Vec<(usize, f64)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (n, line) in file.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = || Error::Parse { line: n + 1, msg: format!("expected `pool_id,weight`, got `{line}`") };
        let (id, w) = line.split_once(',').ok_or_else(parse_err)?;
        rows.push((
            id.trim().parse().map_err(|_| parse_err())?,
            w.trim().parse().map_err(|_| parse_err())?,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmpiricalDiscrete;
    use crate::select::run_greedy;

    fn p(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    fn pool(n: usize, seed: u64) -> CandidatePool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CandidatePool::new(
            (0..n)
                .map(|_| p(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_worker_gets_everything() {
        let plan = partition_ids(10, 1, 3).unwrap();
        assert!(plan.assignment().iter().all(|&w| w == 0));
        assert_eq!(plan.shard(0), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_a_deterministic_disjoint_cover() {
        let plan = partition_ids(100, 5, 42).unwrap();
        assert_eq!(plan, partition_ids(100, 5, 42).unwrap());
        let shards = plan.shards();
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| !s.is_empty()));
        let mean = shards.iter().map(Vec::len).sum::<usize>() as f64 / 5.0;
        assert_eq!(mean, 20.0);
    }

    #[test]
    fn partition_fills_empty_workers() {
        for seed in 0..50 {
            let plan = partition_ids(6, 5, seed).unwrap();
            assert!(plan.shards().iter().all(|s| !s.is_empty()));
        }
        assert!(partition_ids(3, 5, 0).is_err());
        assert!(partition_ids(3, 0, 0).is_err());
    }

    #[test]
    fn one_worker_matches_single_machine() {
        let pool = pool(80, 1);
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points()[..20].to_vec()).unwrap());
        let k = Kernel::rbf(0.8).unwrap();
        for method in [Method::Wkh, Method::Sbq] {
            let single = run_greedy(method, &pool, &target, &k, 15, 4).unwrap();
            let dist = run_distributed(method, &pool, &target, &k, 15, 1, 4).unwrap();
            assert_eq!(dist.winner_g(), single.solution.g());
        }
    }

    #[test]
    fn realizable_singleton_target_is_found() {
        let pool = pool(60, 2);
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(vec![pool.point(17).clone()]).unwrap());
        let k = Kernel::rbf(1.0).unwrap();
        for s in [1, 2, 3, 6] {
            let dist = run_distributed(Method::Wkh, &pool, &target, &k, 5, s, 11).unwrap();
            assert_eq!(dist.winner_g(), 0.0);
            assert_eq!(dist.winner_ids(), vec![17]);
        }
    }

    #[test]
    fn winner_is_the_best_solution() {
        let pool = pool(120, 3);
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points()[..40].to_vec()).unwrap());
        let k = Kernel::rbf(0.7).unwrap();
        for seed in 0..5 {
            let dist = run_distributed(Method::Sbq, &pool, &target, &k, 10, 4, seed).unwrap();
            let g = dist.solution_g();
            assert_eq!(g.len(), 5);
            let min = g.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(dist.winner_g(), min);
            assert_eq!(dist.winner, g.iter().position(|&v| v == min).unwrap());
            assert!(dist.collated.windows(2).all(|w| w[0] < w[1]));
            let again = run_distributed(Method::Sbq, &pool, &target, &k, 10, 4, seed).unwrap();
            assert_eq!(again.solution_g(), g);
            assert_eq!(again.winner_ids(), dist.winner_ids());
        }
        assert!(run_distributed(Method::KhUniform, &pool, &target, &k, 5, 2, 0).is_err());
    }

    #[test]
    fn spilled_workers_match_in_memory_workers() {
        let dir = tempfile::tempdir().unwrap();
        let pool = pool(90, 4);
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points()[..30].to_vec()).unwrap());
        let k = Kernel::rbf(0.9).unwrap();
        let mem = run_distributed(Method::Wkh, &pool, &target, &k, 8, 3, 5).unwrap();
        let opts = Distributed::new(Method::Wkh, 8, 3).seed(5).spill_to(dir.path());
        let spilled = run_distributed_with(&opts, &pool, &target, &k).unwrap();
        assert_eq!(mem.solution_g(), spilled.solution_g());
        assert_eq!(mem.winner_ids(), spilled.winner_ids());
        let rows = read_iterates(&dir.path().join("iterates_0.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), mem.solutions[0].solution.ids());
        let (ids, pts) = read_shard(&dir.path().join("shard_1.csv")).unwrap();
        assert_eq!(ids, mem.plan.shard(1));
        assert_eq!(&pts[0], pool.point(ids[0]));
    }
}
