//! Experiment configs and the three commands behind the `herdquad` binary.
//!
//! Config files are flat `key = value` text. `#` starts a comment, blank
//! lines are ignored, keys may appear once, and unknown keys are errors.
//! Lists are comma separated; seeds also accept a half-open range `a..b`.
//!
//! | key | commands | default |
//! |-----|----------|---------|
//! | `experiment` | all | the command being run (must match if given) |
//! | `methods` | mixture, summarize | `mc,kh,wkh,sbq` / `wkh,sbq,mc` |
//! | `k` | mixture (one value), summarize (list) | `50` / `10,25,50` |
//! | `workers` | mixture, summarize | `1`; above 1 adds distributed WKH/SBQ runs |
//! | `seeds` | all | `0` |
//! | `kernel` | mixture | `rbf` (`cosine` also accepted) |
//! | `bandwidth` | mixture | `median` (median pairwise distance of 500 pool points) |
//! | `components`, `dim` | mixture | `20`, `2` |
//! | `mean_low`, `mean_high` | mixture | `-5`, `5` |
//! | `var_low`, `var_high` | mixture | `0.05`, `0.5` |
//! | `pool` | mixture | `2000` |
//! | `dataset` | summarize | `blobs`, or a path to a `.csv` / libsvm file |
//! | `blobs_n`, `blobs_dim`, `blobs_separation`, `data_seed` | summarize | `500`, `100`, `3`, `0` |
//! | `test_fraction`, `validation_fraction` | summarize | `0.2`, `0.1` |
//! | `lambda` | summarize | `1` |
//! | `embedding` | summarize | `normalized` (or `raw`) |
//! | `weighted_retrain` | summarize | `false` |
//! | `fixtures` | diagnose | `all` |
//! | `inject_fault` | diagnose | `false`; corrupts the audited weights |
//! | `spill_dir` | mixture | unset; distributed shards go through CSV files there |
//! | `timing` | all | `false`; when off every `elapsed_ms` is written as 0 |
//! | `out` | all | `out` (env `HERDQUAD_OUT`) |
//! | `threads` | all | rayon default (env `HERDQUAD_THREADS`) |
//!
//! Output files are written to a temporary name and renamed into place.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diagnostics::{self, RateFit};
use crate::distributed::{run_distributed_with, Distributed};
use crate::embedding::{EmpiricalDiscrete, GaussianMixture, Sampler, TargetEmbedding};
use crate::error::{Error, Result};
use crate::fisher::{EmbeddingMode, LabeledDataset, SummarizeOptions, SummaryContext, SummaryReport, TrainOptions};
use crate::kernel::{CandidatePool, Kernel, Point};
use crate::select::{Greedy, Method, RunTrace};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_OUT: &str = "HERDQUAD_OUT";
pub const ENV_THREADS: &str = "HERDQUAD_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Mixture,
    Summarize,
    Diagnose,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Mixture => "mixture",
            Experiment::Summarize => "summarize",
            Experiment::Diagnose => "diagnose",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(Experiment::Mixture),
            "summarize" => Ok(Experiment::Summarize),
            "diagnose" => Ok(Experiment::Diagnose),
            _ => Err(Error::Config(format!("unknown experiment `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: usize,
    pub dim: usize,
    pub mean_range: (f64, f64),
    pub var_range: (f64, f64),
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { components: 20, dim: 2, mean_range: (-5.0, 5.0), var_range: (0.05, 0.5) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs { n: usize, dim: usize, separation: f64, seed: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub k: Vec<usize>,
    pub workers: usize,
    pub seeds: Vec<u64>,
    pub kernel: KernelFamily,
    pub bandwidth: Bandwidth,
    pub mixture: MixtureSpec,
    pub pool: usize,
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub lambda: f64,
    pub embedding: EmbeddingMode,
    pub weighted_retrain: bool,
    pub fixtures: Vec<String>,
    pub inject_fault: bool,
    #[serde(skip)]
    pub spill_dir: Option<PathBuf>,
    pub timing: bool,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

const KEYS: &[&str] = &[
    "experiment",
    "methods",
    "k",
    "workers",
    "seeds",
    "kernel",
    "bandwidth",
    "components",
    "dim",
    "mean_low",
    "mean_high",
    "var_low",
    "var_high",
    "pool",
    "dataset",
    "blobs_n",
    "blobs_dim",
    "blobs_separation",
    "data_seed",
    "test_fraction",
    "validation_fraction",
    "lambda",
    "embedding",
    "weighted_retrain",
    "fixtures",
    "inject_fault",
    "spill_dir",
    "timing",
    "out",
    "threads",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` is empty")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let (methods, k) = match experiment {
            Experiment::Summarize => (vec![Method::Wkh, Method::Sbq, Method::McRandom], vec![10, 25, 50]),
            _ => (vec![Method::McRandom, Method::KhUniform, Method::Wkh, Method::Sbq], vec![50]),
        };
        Self {
            experiment,
            methods,
            k,
            workers: 1,
            seeds: vec![0],
            kernel: KernelFamily::Rbf,
            bandwidth: Bandwidth::Median,
            mixture: MixtureSpec::default(),
            pool: 2000,
            dataset: DatasetSpec::Blobs { n: 500, dim: 100, separation: 3.0, seed: 0 },
            test_fraction: 0.2,
            validation_fraction: 0.1,
            lambda: 1.0,
            embedding: EmbeddingMode::Normalized,
            weighted_retrain: false,
            fixtures: Vec::new(),
            inject_fault: false,
            spill_dir: None,
            timing: false,
            out: PathBuf::from("out"),
            threads: None,
        }
    }

    /// Parses config text on top of the defaults for `experiment`.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, experiment: Experiment) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, experiment)
    }

    /// Sets one key. Used for file entries and command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let data_blobs = |cfg: &mut Self| -> Result<(usize, usize, f64, u64)> {
            match &cfg.dataset {
                DatasetSpec::Blobs { n, dim, separation, seed } => Ok((*n, *dim, *separation, *seed)),
                DatasetSpec::File(_) => Err(Error::Config(format!("`{key}` only applies to `dataset = blobs`"))),
            }
        };
        match key {
            "experiment" => {
                let e: Experiment = value.parse()?;
                if e != self.experiment {
                    return Err(Error::Config(format!("config is for `{e}`, not `{}`", self.experiment)));
                }
            }
            "methods" => self.methods = parse_list(key, value)?,
            "k" => self.k = parse_list(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "seeds" => {
                self.seeds = match value.split_once("..") {
                    Some((a, b)) => (parse_value::<u64>(key, a.trim())?..parse_value::<u64>(key, b.trim())?).collect(),
                    None => parse_list(key, value)?,
                }
            }
            "kernel" => {
                self.kernel = match value {
                    "rbf" => KernelFamily::Rbf,
                    "cosine" => KernelFamily::Cosine,
                    _ => return Err(Error::Config(format!("unknown kernel `{value}`"))),
                }
            }
            "bandwidth" => {
                self.bandwidth =
                    if value == "median" { Bandwidth::Median } else { Bandwidth::Fixed(parse_value(key, value)?) }
            }
            "components" => self.mixture.components = parse_value(key, value)?,
            "dim" => self.mixture.dim = parse_value(key, value)?,
            "mean_low" => self.mixture.mean_range.0 = parse_value(key, value)?,
            "mean_high" => self.mixture.mean_range.1 = parse_value(key, value)?,
            "var_low" => self.mixture.var_range.0 = parse_value(key, value)?,
            "var_high" => self.mixture.var_range.1 = parse_value(key, value)?,
            "pool" => self.pool = parse_value(key, value)?,
            "dataset" => {
                self.dataset = if value == "blobs" {
                    DatasetSpec::Blobs { n: 500, dim: 100, separation: 3.0, seed: 0 }
                } else {
                    DatasetSpec::File(PathBuf::from(value))
                }
            }
            "blobs_n" | "blobs_dim" | "blobs_separation" | "data_seed" => {
                let (mut n, mut dim, mut separation, mut seed) = data_blobs(self)?;
                match key {
                    "blobs_n" => n = parse_value(key, value)?,
                    "blobs_dim" => dim = parse_value(key, value)?,
                    "blobs_separation" => separation = parse_value(key, value)?,
                    _ => seed = parse_value(key, value)?,
                }
                self.dataset = DatasetSpec::Blobs { n, dim, separation, seed };
            }
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "embedding" => {
                self.embedding = match value {
                    "normalized" => EmbeddingMode::Normalized,
                    "raw" => EmbeddingMode::Raw,
                    _ => return Err(Error::Config(format!("unknown embedding `{value}`"))),
                }
            }
            "weighted_retrain" => self.weighted_retrain = parse_bool(key, value)?,
            "fixtures" => {
                self.fixtures = if value == "all" { Vec::new() } else { parse_list(key, value)? };
            }
            "inject_fault" => self.inject_fault = parse_bool(key, value)?,
            "spill_dir" => self.spill_dir = Some(PathBuf::from(value)),
            "timing" => self.timing = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = Some(parse_value(key, value)?),
            _ => {
                debug_assert!(!KEYS.contains(&key));
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k.contains(&0) {
            return bad("`k` must be positive".into());
        }
        if self.experiment == Experiment::Mixture && self.k.len() != 1 {
            return bad("mixture runs take a single `k`".into());
        }
        if self.workers == 0 {
            return bad("`workers` must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("`seeds` is empty".into());
        }
        if self.experiment == Experiment::Summarize && self.methods.contains(&Method::KhUniform) {
            return bad("summarize supports methods wkh, sbq and mc".into());
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("bandwidth {s} must be positive"));
            }
        }
        let MixtureSpec { components, dim, mean_range, var_range } = self.mixture;
        if components == 0 || dim == 0 {
            return bad("`components` and `dim` must be positive".into());
        }
        if mean_range.0.is_nan() || mean_range.0 > mean_range.1 || !(0.0 < var_range.0 && var_range.0 <= var_range.1) {
            return bad("mixture ranges need low <= high and positive variances".into());
        }
        if self.pool < self.workers.max(1) {
            return bad("`pool` must hold at least one point per worker".into());
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return bad("`threads` must be at least 1".into());
            }
        }
        if let Some(name) = self.fixtures.iter().find(|f| !FIXTURES.contains(&f.as_str())) {
            return bad(format!("unknown fixture `{name}`"));
        }
        Ok(())
    }

    /// Output directory and thread count from the environment. These
    /// override the config file; explicit command-line flags are applied
    /// afterwards and win over both.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT) {
            if !dir.is_empty() {
                self.out = PathBuf::from(dir);
            }
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            if !t.is_empty() {
                self.threads = Some(parse_value(ENV_THREADS, &t)?);
            }
        }
        Ok(())
    }
}

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Files written by a command and whether all its checks passed.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub passed: bool,
}

// ---------------------------------------------------------------------------
// mixture

/// Seeded random mixture: weights from a flat Dirichlet, means uniform in
/// the box, axis-aligned variances uniform in the variance range.
pub fn random_mixture(spec: &MixtureSpec, seed: u64) -> Result<GaussianMixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let raw: Vec<f64> = (0..spec.components).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let means: Vec<Vec<f64>> =
        (0..spec.components).map(|_| (0..spec.dim).map(|_| draw(&mut rng, spec.mean_range)).collect()).collect();
    let vars: Vec<Vec<f64>> =
        (0..spec.components).map(|_| (0..spec.dim).map(|_| draw(&mut rng, spec.var_range)).collect()).collect();
    GaussianMixture::diagonal(weights, means, vars)
}

/// Median Euclidean distance between distinct points of a seeded subsample
/// of at most 500 pool points.
pub fn median_bandwidth(pool: &CandidatePool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let ids: Vec<usize> = pool.ids().collect();
    let chosen: Vec<usize> = ids.choose_multiple(&mut rng, 500.min(ids.len())).copied().collect();
    let mut d: Vec<f64> = Vec::new();
    for (a, &i) in chosen.iter().enumerate() {
        for &j in &chosen[a + 1..] {
            let (x, y) = (pool.point(i).coords(), pool.point(j).coords());
            d.push(x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// A seeded mixture target with its pool and kernel.
#[derive(Clone, Debug)]
pub struct MixtureInstance {
    pub mixture: GaussianMixture,
    pub pool: CandidatePool,
    pub target: TargetEmbedding,
    pub kernel: Kernel,
    pub bandwidth: Option<f64>,
}

pub fn mixture_instance(cfg: &ExperimentConfig, seed: u64) -> Result<MixtureInstance> {
    let mixture = random_mixture(&cfg.mixture, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let pool = CandidatePool::new((0..cfg.pool).map(|_| mixture.sample(&mut rng)).collect())?;
    let (kernel, bandwidth) = match cfg.kernel {
        KernelFamily::Rbf => {
            let bw = match cfg.bandwidth {
                Bandwidth::Median => median_bandwidth(&pool, seed),
                Bandwidth::Fixed(s) => s,
            };
            (Kernel::rbf(bw)?, Some(bw))
        }
        KernelFamily::Cosine => (Kernel::cosine(), None),
    };
    let target = match cfg.kernel {
        KernelFamily::Rbf => TargetEmbedding::GaussianMixture(mixture.clone()),
        // No closed form for the cosine kernel; use the pool itself.
        KernelFamily::Cosine => TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points().to_vec())?),
    };
    Ok(MixtureInstance { mixture, pool, target, kernel, bandwidth })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRun {
    pub method: Method,
    pub workers: usize,
    pub seed: u64,
    pub trace: RunTrace,
    /// Index of the winning solution for distributed runs.
    pub winner: Option<usize>,
    pub solution_g: Option<Vec<f64>>,
    pub phase_ms: Option<[f64; 3]>,
}

impl MethodRun {
    pub fn final_g(&self) -> f64 {
        self.trace.final_g()
    }
}

/// Runs every configured method (and distributed variant) on one seed.
pub fn mixture_runs(cfg: &ExperimentConfig, inst: &MixtureInstance, seed: u64) -> Result<Vec<MethodRun>> {
    let k = cfg.k[0];
    let mut runs = Vec::new();
    for &method in &cfg.methods {
        let greedy = Greedy::new(method, k).seed(seed).record_timing(cfg.timing).require_standardized(true);
        let run = greedy.run(&inst.pool, &inst.target, &inst.kernel)?;
        runs.push(MethodRun { method, workers: 1, seed, trace: run.trace, winner: None, solution_g: None, phase_ms: None });
        if cfg.workers > 1 && matches!(method, Method::Wkh | Method::Sbq) {
            let mut opts = Distributed { greedy, workers: cfg.workers, spill_dir: None };
            if let Some(dir) = &cfg.spill_dir {
                opts.spill_dir = Some(dir.join(format!("seed{seed}_{method}_s{}", cfg.workers)));
            }
            let res = run_distributed_with(&opts, &inst.pool, &inst.target, &inst.kernel)?;
            runs.push(MethodRun {
                method,
                workers: cfg.workers,
                seed,
                trace: res.winner_run().trace.clone(),
                winner: Some(res.winner),
                solution_g: Some(res.solution_g()),
                phase_ms: Some([res.timing.partition_ms, res.timing.workers_ms, res.timing.aggregate_ms]),
            });
        }
    }
    Ok(runs)
}

fn trace_rows(run: &MethodRun) -> Vec<Vec<String>> {
    let head = |it: usize, id: String, g: f64, ms: f64| {
        vec![run.method.to_string(), run.workers.to_string(), run.seed.to_string(), it.to_string(), id, g.max(0.0).to_string(), ms.to_string()]
    };
    std::iter::once(head(0, String::new(), run.trace.initial_g, 0.0))
        .chain(run.trace.records.iter().map(|r| head(r.iteration, r.chosen_id.to_string(), r.g, r.elapsed_ms)))
        .collect()
}

pub const TRACE_HEADER: [&str; 7] = ["method", "s", "seed", "iteration", "chosen_id", "g", "elapsed_ms"];

pub fn trace_file_name(method: Method, workers: usize) -> String {
    format!("trace_{method}_s{workers}.csv")
}

pub fn cmd_mixture(cfg: &ExperimentConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out)?;
    let per_seed: Vec<(MixtureInstance, Vec<MethodRun>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let inst = mixture_instance(cfg, seed)?;
            let runs = mixture_runs(cfg, &inst, seed)?;
            Ok((inst, runs))
        })
        .collect::<Result<_>>()?;

    let mut variants: Vec<(Method, usize)> = Vec::new();
    for (_, runs) in &per_seed {
        for r in runs {
            if !variants.contains(&(r.method, r.workers)) {
                variants.push((r.method, r.workers));
            }
        }
    }
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for &(method, workers) in &variants {
        let runs: Vec<&MethodRun> =
            per_seed.iter().flat_map(|(_, r)| r).filter(|r| r.method == method && r.workers == workers).collect();
        let rows: Vec<Vec<String>> = runs.iter().flat_map(|r| trace_rows(r)).collect();
        let path = cfg.out.join(trace_file_name(method, workers));
        write_atomic(&path, &csv_bytes(&TRACE_HEADER, &rows)?)?;
        files.push(path);
        let finals: Vec<f64> = runs.iter().map(|r| r.final_g()).collect();
        let fits: Vec<Option<RateFit>> = runs.iter().map(|r| diagnostics::fit_rate(&r.trace).ok()).collect();
        summaries.push(json!({
            "method": method,
            "s": workers,
            "seeds": runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            "final_g": finals,
            "mean_final_g": finals.iter().sum::<f64>() / finals.len() as f64,
            "rate_fits": fits,
            "winners": runs.iter().map(|r| r.winner).collect::<Vec<_>>(),
            "solution_g": runs.iter().map(|r| r.solution_g.clone()).collect::<Vec<_>>(),
            "phase_ms": runs.iter().map(|r| r.phase_ms).collect::<Vec<_>>(),
        }));
    }
    let instances: Vec<_> = per_seed
        .iter()
        .zip(&cfg.seeds)
        .map(|((inst, _), seed)| {
            let comps = inst.mixture.components();
            json!({
                "seed": seed,
                "bandwidth": inst.bandwidth,
                "weights": comps.iter().map(|c| c.weight()).collect::<Vec<_>>(),
                "means": comps.iter().map(|c| c.mean().to_vec()).collect::<Vec<_>>(),
                "variances": comps.iter().map(|c| c.covariance().diagonal().iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let path = cfg.out.join("mixture_summary.json");
    write_json(
        &path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "experiment": "mixture",
            "config": cfg,
            "instances": instances,
            "methods": summaries,
        }),
    )?;
    files.push(path);
    Ok(Outcome { files, passed: true })
}

/// One row of a trace CSV.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct TraceRow {
    pub method: String,
    pub s: usize,
    pub seed: u64,
    pub iteration: usize,
    pub chosen_id: Option<usize>,
    pub g: f64,
    pub elapsed_ms: f64,
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::Parse { line, msg: e.to_string() }
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// summarize

fn parse_label(token: &str) -> Option<u8> {
    match token.parse::<f64>().ok()? {
        1.0 => Some(1),
        0.0 | -1.0 => Some(0),
        _ => None,
    }
}

/// Sparse `label index:value ...` lines with 1-based indices. Labels
/// `1`/`+1` map to 1, `0`/`-1` to 0.
pub fn load_libsvm(path: &Path) -> Result<LabeledDataset> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label = tokens.next().expect("non-empty line");
        labels.push(parse_label(label).ok_or_else(|| err(format!("bad label `{label}`")))?);
        let mut row = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| err(format!("expected index:value, got `{tok}`")))?;
            let i: usize = i.parse().map_err(|_| err(format!("bad index `{i}`")))?;
            if i == 0 {
                return Err(err("indices start at 1".into()));
            }
            let v: f64 = v.parse().map_err(|_| err(format!("bad value `{v}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{v}`")));
            }
            dim = dim.max(i);
            row.push((i - 1, v));
        }
        rows.push(row);
    }
    let features = rows
        .into_iter()
        .map(|r| {
            let mut dense = vec![0.0; dim];
            for (i, v) in r {
                dense[i] = v;
            }
            dense
        })
        .collect();
    LabeledDataset::new(features, labels)
}

/// Dense CSV with a header row; the last column is the label.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse { line, msg };
        if rec.len() < 2 {
            return Err(err("need at least one feature and a label".into()));
        }
        let label = &rec[rec.len() - 1];
        labels.push(parse_label(label).ok_or_else(|| err(format!("bad label `{label}`")))?);
        let row = rec
            .iter()
            .take(rec.len() - 1)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        features.push(row);
    }
    LabeledDataset::new(features, labels)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    match spec {
        DatasetSpec::Blobs { n, dim, separation, seed } => LabeledDataset::blobs(*n, *dim, *separation, *seed),
        DatasetSpec::File(path) if path.extension().is_some_and(|e| e == "csv") => load_csv(path),
        DatasetSpec::File(path) => load_libsvm(path),
    }
}

pub const SUMMARY_HEADER: [&str; 6] = ["method", "s", "k", "seed", "g_final", "test_nll"];

/// Runs for one seed: every (method, k, variant), plus the random and
/// full-data baselines.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub train_size: usize,
    pub dropped: usize,
    pub full_test_nll: f64,
    pub full_model_converged: bool,
    pub runs: Vec<SummaryReport>,
}

pub fn summarize_seed(cfg: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> Result<SeedSummary> {
    let mut data = data.clone();
    data.assign_random_splits(cfg.test_fraction, cfg.validation_fraction, seed)?;
    let opts = SummarizeOptions {
        lambda: cfg.lambda,
        embedding: cfg.embedding,
        weighted_retrain: cfg.weighted_retrain,
        train: TrainOptions::default(),
    };
    let ctx = SummaryContext::prepare(&data, opts)?;
    let mut runs = Vec::new();
    for &k in &cfg.k {
        if k > ctx.pool.len() {
            return Err(Error::Config(format!("k = {k} exceeds the {} usable training rows", ctx.pool.len())));
        }
        for &method in &cfg.methods {
            runs.push(ctx.run(method, k, 1, seed)?);
            if cfg.workers > 1 && method != Method::McRandom {
                runs.push(ctx.run(method, k, cfg.workers, seed)?);
            }
        }
    }
    Ok(SeedSummary {
        seed,
        train_size: ctx.pool_rows.len(),
        dropped: ctx.dropped,
        full_test_nll: ctx.full_test_nll,
        full_model_converged: ctx.full_model.converged,
        runs,
    })
}

pub fn cmd_summarize(cfg: &ExperimentConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out)?;
    let data = load_dataset(&cfg.dataset)?;
    let seeds: Vec<SeedSummary> =
        cfg.seeds.par_iter().map(|&seed| summarize_seed(cfg, &data, seed)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for s in &seeds {
        for r in &s.runs {
            rows.push(vec![
                r.method.to_string(),
                r.workers.to_string(),
                r.k.to_string(),
                r.seed.to_string(),
                r.g_final.max(0.0).to_string(),
                r.test_nll.to_string(),
            ]);
        }
    }
    for s in &seeds {
        for &k in &cfg.k {
            let base = s.runs.iter().find(|r| r.k == k).expect("one run per k");
            rows.push(vec![
                "random".into(),
                "1".into(),
                k.to_string(),
                s.seed.to_string(),
                base.random_g_final.max(0.0).to_string(),
                base.random_test_nll.to_string(),
            ]);
        }
        rows.push(vec![
            "full".into(),
            "1".into(),
            s.train_size.to_string(),
            s.seed.to_string(),
            String::new(),
            s.full_test_nll.to_string(),
        ]);
    }
    let csv_path = cfg.out.join("summary.csv");
    write_atomic(&csv_path, &csv_bytes(&SUMMARY_HEADER, &rows)?)?;
    let json_path = cfg.out.join("summary_report.json");
    write_json(
        &json_path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "experiment": "summarize",
            "config": cfg,
            "notes": {
                "embedding": "gradient of the log-likelihood at the observed label, bias first; information matrix = identity",
                "normalization": match cfg.embedding { EmbeddingMode::Normalized => "unit length (cosine kernel)", EmbeddingMode::Raw => "none (linear kernel)" },
                "retraining": if cfg.weighted_retrain { "weighted by |w| rescaled to mean 1" } else { "unweighted on the selected rows" },
            },
            "seeds": seeds,
        }),
    )?;
    Ok(Outcome { files: vec![csv_path, json_path], passed: true })
}

// ---------------------------------------------------------------------------
// diagnose

pub const FIXTURES: &[&str] = &["convex-grid", "two-clusters", "rate-cosine", "guarantee-mixture", "orthogonality"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

/// Pool of `n` points uniform in `[-1, 1]^d` with the uniform discrete
/// target over the pool, under the cosine kernel.
pub fn cosine_instance(d: usize, n: usize, seed: u64) -> Result<(CandidatePool, TargetEmbedding, Kernel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = CandidatePool::new(
        (0..n).map(|_| Point::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect::<Result<_>>()?,
    )?;
    let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(pool.points().to_vec())?);
    Ok((pool, target, Kernel::cosine()))
}

/// Small RBF instance: `n` points in `[-2, 2]²` and a random 3-component
/// mixture target.
pub fn small_mixture_instance(n: usize, seed: u64) -> Result<(CandidatePool, TargetEmbedding, Kernel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = CandidatePool::new(
        (0..n)
            .map(|_| Point::new(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]))
            .collect::<Result<_>>()?,
    )?;
    let spec = MixtureSpec { components: 3, dim: 2, mean_range: (-1.5, 1.5), var_range: (0.05, 0.5) };
    let target = TargetEmbedding::GaussianMixture(random_mixture(&spec, seed)?);
    Ok((pool, target, Kernel::rbf(1.0)?))
}

fn check_realizability(name: &str) -> Result<CheckResult> {
    let f = diagnostics::realizability_fixtures().into_iter().find(|f| f.name == name).expect("known fixture");
    let singles = diagnostics::brute_force_best_subset(&f.pool, &f.target, &f.kernel, 1)?;
    let pairs = diagnostics::brute_force_best_subset(&f.pool, &f.target, &f.kernel, 2)?;
    let passed = match f.expected_r {
        1 => singles.g <= 1e-6,
        _ => singles.g > 1e-6 && pairs.g <= 1e-6,
    };
    Ok(CheckResult {
        name: name.into(),
        passed,
        detail: json!({ "expected_r": f.expected_r, "best_single": singles, "best_pair": pairs }),
    })
}

/// Seeded cosine instances in 5 dimensions: geometric-mean traces of WKH and
/// SBQ fit a log-linear decay, and every run reaches `g <= 1e-8` within
/// `d + 1` steps.
pub fn rate_check(seeds: usize) -> Result<CheckResult> {
    let d = 5;
    let mut detail = Vec::new();
    let mut passed = true;
    for method in [Method::Wkh, Method::Sbq] {
        let mut traces = Vec::new();
        for seed in 0..seeds as u64 {
            let (pool, target, kernel) = cosine_instance(d, 200, seed)?;
            let run = crate::select::run_greedy(method, &pool, &target, &kernel, d + 1, seed)?;
            traces.push(run.trace.g_values());
        }
        let fit = diagnostics::fit_rate_ensemble(&traces)?;
        let realized = traces.iter().all(|t| t.iter().take(d + 2).any(|g| *g <= 1e-8));
        let per_instance = traces
            .iter()
            .filter(|t| diagnostics::fit_rate_values(t).is_ok_and(|f| f.slope < -0.1 && f.r_squared >= 0.9))
            .count();
        let ok = fit.slope < -0.1 && fit.r_squared >= 0.9 && realized;
        passed &= ok;
        detail.push(json!({
            "method": method,
            "ensemble_fit": fit,
            "realized_within_d_plus_1": realized,
            "instances_passing_individually": per_instance,
            "instances": seeds,
        }));
    }
    Ok(CheckResult { name: "rate-cosine".into(), passed, detail: json!(detail) })
}

fn check_guarantee() -> Result<CheckResult> {
    let mut passed = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (pool, target, kernel) = small_mixture_instance(10, seed)?;
        for r in [1, 2, 3] {
            for eps in [0.1, 0.3] {
                let report = diagnostics::check_approx_guarantee(&pool, &target, &kernel, r, eps)?;
                let mut ok = report.holds();
                for method in [Method::Wkh, Method::Sbq] {
                    let run = crate::select::run_greedy(method, &pool, &target, &kernel, r, seed)?;
                    ok &= run.solution.g() >= report.oracle.g - 1e-10;
                }
                passed &= ok;
                detail.push(json!({ "seed": seed, "passed": ok, "report": report }));
            }
        }
    }
    Ok(CheckResult { name: "guarantee-mixture".into(), passed, detail: json!(detail) })
}

/// SBQ on a small RBF instance; after each step the weights must satisfy
/// `Kw = z` and the Gram spectrum must straddle 1. With `inject_fault` the
/// weights are perturbed before the audit.
fn check_orthogonality(inject_fault: bool) -> Result<CheckResult> {
    let (pool, target, kernel) = small_mixture_instance(40, 11)?;
    let run = crate::select::run_greedy(Method::Sbq, &pool, &target, &kernel, 15, 0)?;
    let mut state = crate::state::QuadratureState::new(&target, &kernel)?;
    let mut worst: f64 = 0.0;
    let mut spectra_ok = true;
    for id in run.solution.ids() {
        state.add_atom(pool.point(id).clone(), id)?;
        if inject_fault && state.len() == 10 {
            let delta: Vec<f64> = (0..state.len()).map(|i| if i == 0 { 1e-3 } else { 0.0 }).collect();
            state.perturb_weights(&delta)?;
        }
        worst = worst.max(diagnostics::orthogonality_residual(&state)?);
        let (m, big_m) = diagnostics::estimate_rsc_rss(&state)?;
        spectra_ok &= m > 0.0 && m <= 1.0 + 1e-12 && big_m >= 1.0 - 1e-12;
        if inject_fault && state.len() == 10 {
            break;
        }
    }
    Ok(CheckResult {
        name: "orthogonality".into(),
        passed: worst <= 1e-8 && spectra_ok,
        detail: json!({ "max_residual": worst, "spectra_ok": spectra_ok, "fault_injected": inject_fault }),
    })
}

pub fn run_fixture(name: &str, cfg: &ExperimentConfig) -> Result<CheckResult> {
    match name {
        "convex-grid" | "two-clusters" => check_realizability(name),
        "rate-cosine" => rate_check(20),
        "guarantee-mixture" => check_guarantee(),
        "orthogonality" => check_orthogonality(cfg.inject_fault),
        _ => Err(Error::Config(format!("unknown fixture `{name}`"))),
    }
}

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out)?;
    let names: Vec<&str> =
        if cfg.fixtures.is_empty() { FIXTURES.to_vec() } else { cfg.fixtures.iter().map(String::as_str).collect() };
    let checks: Vec<CheckResult> = names.par_iter().map(|n| run_fixture(n, cfg)).collect::<Result<_>>()?;
    let passed = checks.iter().all(|c| c.passed);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let path = cfg.out.join("diagnose_report.json");
    write_json(
        &path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "experiment": "diagnose",
            "passed": passed,
            "failed": failed,
            "checks": checks,
        }),
    )?;
    Ok(Outcome { files: vec![path], passed })
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.experiment {
        Experiment::Mixture => cmd_mixture(cfg),
        Experiment::Summarize => cmd_summarize(cfg),
        Experiment::Diagnose => cmd_diagnose(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_config() {
        let cfg = ExperimentConfig::parse(
            "# run\nexperiment = mixture\nmethods = wkh, sbq\nk = 30\nseeds = 2..5  # three\nbandwidth = 0.7\n\n",
            Experiment::Mixture,
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::Wkh, Method::Sbq]);
        assert_eq!(cfg.k, vec![30]);
        assert_eq!(cfg.seeds, vec![2, 3, 4]);
        assert_eq!(cfg.bandwidth, Bandwidth::Fixed(0.7));
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = ExperimentConfig::parse("k = 5\nbogus = 1\n", Experiment::Mixture).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::parse("k = 5\nk = 6\n", Experiment::Mixture).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::parse("seeds = 1\nworkers = many\n", Experiment::Mixture).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ExperimentConfig::parse("experiment = summarize", Experiment::Mixture).is_err());
        assert!(ExperimentConfig::parse("k = 10, 20", Experiment::Mixture).is_err());
        assert!(ExperimentConfig::parse("methods = kh", Experiment::Summarize).is_err());
        assert!(ExperimentConfig::parse("no equals sign", Experiment::Mixture).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Summarize);
        for key in KEYS {
            let value = match *key {
                "experiment" => "summarize",
                "methods" => "wkh",
                "kernel" => "rbf",
                "bandwidth" => "median",
                "dataset" => "blobs",
                "embedding" => "raw",
                "fixtures" => "all",
                "spill_dir" | "out" => "x",
                "weighted_retrain" | "inject_fault" | "timing" => "true",
                "blobs_separation" | "mean_low" | "mean_high" | "var_low" | "var_high" | "lambda" => "0.5",
                "test_fraction" | "validation_fraction" => "0.1",
                _ => "3",
            };
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn mixture_generator_is_seeded() {
        let spec = MixtureSpec::default();
        let a = random_mixture(&spec, 3).unwrap();
        let b = random_mixture(&spec, 3).unwrap();
        let c = random_mixture(&spec, 4).unwrap();
        assert_eq!(a.components().len(), 20);
        let w: f64 = a.components().iter().map(|c| c.weight()).sum();
        assert!((w - 1.0).abs() < 1e-12);
        for comp in a.components() {
            assert!(comp.mean().iter().all(|m| (-5.0..5.0).contains(m)));
            assert!(comp.covariance().diagonal().iter().all(|v| (0.05..0.5).contains(v)));
        }
        assert_eq!(a.components()[0].mean(), b.components()[0].mean());
        assert_ne!(a.components()[0].mean(), c.components()[0].mean());
    }

    #[test]
    fn median_bandwidth_of_a_line() {
        let pool = CandidatePool::new((0..4).map(|i| Point::new(vec![i as f64]).unwrap()).collect()).unwrap();
        // distances 1,1,1,2,2,3
        assert_eq!(median_bandwidth(&pool, 0), 1.5);
    }

    #[test]
    fn mixture_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::parse("pool = 200\nk = 8\nseeds = 0,1\nworkers = 2", Experiment::Mixture).unwrap();
        cfg.out = dir.path().to_path_buf();
        let outcome = cmd_mixture(&cfg).unwrap();
        assert!(outcome.passed);
        let rows = read_trace_csv(&dir.path().join(trace_file_name(Method::Wkh, 2))).unwrap();
        assert_eq!(rows.len(), 2 * 9);
        assert_eq!(rows[0].iteration, 0);
        assert_eq!(rows[0].chosen_id, None);
        assert!(rows.iter().all(|r| r.g >= 0.0 && r.elapsed_ms == 0.0));
        let g: Vec<f64> = rows.iter().filter(|r| r.seed == 1).map(|r| r.g).collect();
        assert!(g.windows(2).all(|w| w[1] <= w[0]));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("mixture_summary.json")).unwrap()).unwrap();
        assert_eq!(report["schema_version"], SCHEMA_VERSION);
        assert_eq!(report["methods"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn libsvm_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svm");
        fs::write(&path, "+1 1:0.5 3:1\n-1 2:2\n0 1:x\n").unwrap();
        match load_libsvm(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "+1 1:0.5 3:1\n-1 2:2\n").unwrap();
        let data = load_libsvm(&path).unwrap();
        assert_eq!(data.dim(), 3);
        assert_eq!(data.features(0), &[0.5, 0.0, 1.0]);
        assert_eq!((data.label(0), data.label(1)), (1, 0));
    }

    #[test]
    fn csv_dataset_uses_last_column_as_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,b,y\n1,2,1\n3,4,0\n").unwrap();
        let data = load_csv(&path).unwrap();
        assert_eq!(data.features(1), &[3.0, 4.0]);
        fs::write(&path, "a,b,y\n1,2,1\n3,4,7\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn fault_injection_is_caught() {
        let cfg = ExperimentConfig::defaults(Experiment::Diagnose);
        assert!(run_fixture("orthogonality", &cfg).unwrap().passed);
        let mut bad = cfg.clone();
        bad.inject_fault = true;
        assert!(!run_fixture("orthogonality", &bad).unwrap().passed);
    }
}
