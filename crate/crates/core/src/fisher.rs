//! Training-set summarization for logistic regression.
//!
//! A model fit on the full training split maps each example to its
//! log-likelihood gradient (the practical Fisher embedding). A greedy rule
//! then picks training examples whose embeddings match the validation
//! embeddings, the model is refit on the picked examples only, and the test
//! negative log-likelihood is compared with a random subset of the same size
//! and with the full-data model.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributed::Distributed;
use crate::embedding::{EmpiricalDiscrete, TargetEmbedding};
use crate::error::{Error, Result};
use crate::kernel::{CandidatePool, FeatureMap, Kernel, Point};
use crate::select::{Greedy, Method};
use crate::state::QuadratureState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Binary-labelled examples, each tagged with the split it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    splits: Vec<Split>,
    dim: usize,
}

impl LabeledDataset {
    /// All examples start in the training split.
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidDataset(format!("row {i} has {} features, expected {dim}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("row {i} has a non-finite feature")));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidDataset(format!("row {i} has label {}, expected 0 or 1", labels[i])));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Self { features, labels, splits, dim })
    }

    /// Two unit-variance Gaussian blobs in `d` dimensions whose means lie
    /// `separation` apart along the diagonal. Labels alternate so the classes
    /// are balanced.
    pub fn blobs(n: usize, d: usize, separation: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = separation / 2.0 / (d as f64).sqrt();
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % 2) as u8;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let z: Vec<f64> = (0..d).map(|_| sign * shift + { let v: f64 = StandardNormal.sample(&mut rng); v }).collect();
            features.push(z);
            labels.push(y);
        }
        Self::new(features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.len() {
            return Err(Error::InvalidDataset(format!("{} split tags for {} rows", splits.len(), self.len())));
        }
        self.splits = splits;
        Ok(())
    }

    /// Shuffles under `seed`, sends `test_fraction` of the rows to test and
    /// then `validation_fraction` of the remainder to validation.
    pub fn assign_random_splits(&mut self, test_fraction: f64, validation_fraction: f64, seed: u64) -> Result<()> {
        for f in [test_fraction, validation_fraction] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("split fraction {f} outside [0, 1)")));
            }
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let n_val = ((self.len() - n_test) as f64 * validation_fraction).round() as usize;
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Validation
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    /// Row indices in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Logistic regression with the bias stored first in `theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    /// Infinity norm of the objective gradient at `theta`.
    pub grad_norm: f64,
    pub converged: bool,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn lift(x: &[f64]) -> Vec<f64> {
    std::iter::once(1.0).chain(x.iter().copied()).collect()
}

impl LogisticModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.theta[0] + self.theta[1..].iter().zip(x).map(|(t, v)| t * v).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// `-ln p(y | x)`.
    pub fn nll(&self, x: &[f64], y: u8) -> f64 {
        let t = self.logit(x);
        if y == 1 {
            softplus(-t)
        } else {
            softplus(t)
        }
    }

    /// Mean of [`Self::nll`] over the rows `ids` of `data`.
    pub fn mean_nll(&self, data: &LabeledDataset, ids: &[usize]) -> f64 {
        ids.iter().map(|&i| self.nll(data.features(i), data.label(i))).sum::<f64>() / ids.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_iters: usize,
    /// Stop once the gradient infinity norm is at most this.
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-6 }
    }
}

/// Regularized negative log-likelihood
/// `Σ v_i ln(1 + exp(-s_i θᵀx̃_i)) + λ/2 ‖θ‖²` over lifted rows `x̃ = (1, x)`,
/// with `s_i = ±1` and optional per-example weights `v_i`.
struct Objective {
    x: DMatrix<f64>,
    signs: DVector<f64>,
    weights: DVector<f64>,
    lambda: f64,
}

impl Objective {
    fn new(rows: &[&[f64]], labels: &[u8], weights: Option<&[f64]>, lambda: f64) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len()) + 1;
        let x = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let signs = DVector::from_iterator(n, labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }));
        let weights = match weights {
            Some(w) => DVector::from_column_slice(w),
            None => DVector::from_element(n, 1.0),
        };
        Self { x, signs, weights, lambda }
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        let margins = (&self.x * theta).component_mul(&self.signs);
        let loss: f64 = margins.iter().zip(self.weights.iter()).map(|(m, v)| v * softplus(-m)).sum();
        loss + 0.5 * self.lambda * theta.norm_squared()
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let margins = (&self.x * theta).component_mul(&self.signs);
        let coef = DVector::from_iterator(
            margins.len(),
            margins.iter().zip(self.signs.iter()).zip(self.weights.iter()).map(|((m, s), v)| -v * s * sigmoid(-m)),
        );
        self.x.tr_mul(&coef) + theta * self.lambda
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let t = &self.x * theta;
        let mut scaled = self.x.clone();
        for (i, (ti, v)) in t.iter().zip(self.weights.iter()).enumerate() {
            let p = sigmoid(*ti);
            scaled.row_mut(i).scale_mut(v * p * (1.0 - p));
        }
        let mut h = self.x.tr_mul(&scaled);
        for j in 0..h.ncols() {
            h[(j, j)] += self.lambda;
        }
        h
    }
}

fn fit(rows: &[&[f64]], labels: &[u8], weights: Option<&[f64]>, lambda: f64, opts: TrainOptions) -> LogisticModel {
    let obj = Objective::new(rows, labels, weights, lambda);
    let mut theta = DVector::zeros(obj.x.ncols());
    let mut f = obj.value(&theta);
    let mut grad = obj.gradient(&theta);
    let mut iterations = 0;
    while grad.amax() > opts.tol && iterations < opts.max_iters {
        let dir = match obj.hessian(&theta).cholesky() {
            Some(chol) => -chol.solve(&grad),
            None => -grad.clone(),
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut moved = false;
        while step >= 1e-20 {
            let next = &theta + &dir * step;
            let f_next = obj.value(&next);
            if f_next <= f + 0.25 * step * slope {
                theta = next;
                f = f_next;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        grad = obj.gradient(&theta);
        iterations += 1;
    }
    let grad_norm = grad.amax();
    let converged = grad_norm <= opts.tol;
    if !converged {
        warn!("logistic regression stopped after {iterations} iterations with gradient norm {grad_norm:e}");
    }
    LogisticModel { theta: theta.iter().copied().collect(), lambda, iterations, grad_norm, converged }
}

/// Fits on the rows `ids` of `data` by damped Newton steps with a
/// backtracking line search, starting from zero. A run that hits `max_iters` returns the model with
/// `converged = false`.
pub fn train_logistic(data: &LabeledDataset, ids: &[usize], lambda: f64, opts: TrainOptions) -> Result<LogisticModel> {
    if ids.len() < 2 {
        return Err(Error::TooFewExamples);
    }
    let ones = ids.iter().filter(|&&i| data.label(i) == 1).count();
    if ones == 0 || ones == ids.len() {
        return Err(Error::BothClassesRequired);
    }
    train_weighted(data, ids, None, lambda, opts)
}

/// Like [`train_logistic`] with per-example loss weights, and without the
/// class check: with `lambda > 0` the objective has a minimizer even when
/// one class is absent.
pub fn train_weighted(
    data: &LabeledDataset,
    ids: &[usize],
    weights: Option<&[f64]>,
    lambda: f64,
    opts: TrainOptions,
) -> Result<LogisticModel> {
    if ids.is_empty() {
        return Err(Error::TooFewExamples);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("regularization {lambda} must be finite and non-negative")));
    }
    let rows: Vec<&[f64]> = ids.iter().map(|&i| data.features(i)).collect();
    let labels: Vec<u8> = ids.iter().map(|&i| data.label(i)).collect();
    Ok(fit(&rows, &labels, weights, lambda, opts))
}

/// Log-likelihood gradient `(y - σ(θᵀx̃)) x̃` of one example.
pub fn fisher_gradient(model: &LogisticModel, x: &[f64], y: u8) -> Vec<f64> {
    let r = y as f64 - model.predict_proba(x);
    lift(x).into_iter().map(|v| r * v).collect()
}

/// [`fisher_gradient`] scaled to unit length.
pub fn fisher_embed(model: &LogisticModel, x: &[f64], y: u8) -> Result<Vec<f64>> {
    let f = fisher_gradient(model, x, y);
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(f.into_iter().map(|v| v / norm).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Unit-length gradients under the cosine kernel.
    Normalized,
    /// Raw gradients under the plain inner product (not standardized).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummarizeOptions {
    pub lambda: f64,
    pub embedding: EmbeddingMode,
    /// Refit with per-example weights `|w_i|` (rescaled to mean 1) instead of
    /// treating the selection as an unweighted subset.
    pub weighted_retrain: bool,
    pub train: TrainOptions,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self { lambda: 1.0, embedding: EmbeddingMode::Normalized, weighted_retrain: false, train: TrainOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub method: Method,
    pub workers: usize,
    pub k: usize,
    pub seed: u64,
    /// `g` before the first pick and after each accepted pick.
    pub g_trace: Vec<f64>,
    pub g_final: f64,
    /// Selected rows of the dataset, ascending.
    pub selected: Vec<usize>,
    pub test_nll: f64,
    pub random_g_final: f64,
    pub random_test_nll: f64,
    pub full_test_nll: f64,
    pub retrain_converged: bool,
}

/// Full-data model, embeddings and kernel shared by every
/// `(method, k, seed)` run on one dataset.
pub struct SummaryContext<'d> {
    data: &'d LabeledDataset,
    opts: SummarizeOptions,
    pub full_model: LogisticModel,
    pub full_test_nll: f64,
    /// Training rows, one per pool entry.
    pub pool_rows: Vec<usize>,
    pub pool: CandidatePool,
    pub target: TargetEmbedding,
    pub kernel: Kernel,
    pub test_rows: Vec<usize>,
    /// Training and validation rows dropped for a zero gradient.
    pub dropped: usize,
}

impl<'d> SummaryContext<'d> {
    pub fn prepare(data: &'d LabeledDataset, opts: SummarizeOptions) -> Result<Self> {
        let train = data.indices(Split::Train);
        let validation = data.indices(Split::Validation);
        let test_rows = data.indices(Split::Test);
        if validation.is_empty() || test_rows.is_empty() {
            return Err(Error::InvalidDataset("validation and test splits must be non-empty".into()));
        }
        let full_model = train_logistic(data, &train, opts.lambda, opts.train)?;
        let full_test_nll = full_model.mean_nll(data, &test_rows);

        let embed = |rows: &[usize]| -> Vec<Option<Point>> {
            rows.par_iter()
                .map(|&i| {
                    let f = match opts.embedding {
                        EmbeddingMode::Normalized => fisher_embed(&full_model, data.features(i), data.label(i)).ok()?,
                        EmbeddingMode::Raw => {
                            let f = fisher_gradient(&full_model, data.features(i), data.label(i));
                            if f.iter().all(|v| *v == 0.0) {
                                return None;
                            }
                            f
                        }
                    };
                    Point::new(f).ok()
                })
                .collect()
        };
        let mut dropped = 0;
        let mut pool_rows = Vec::new();
        let mut pool_points = Vec::new();
        for (row, p) in train.iter().zip(embed(&train)) {
            match p {
                Some(p) => {
                    pool_rows.push(*row);
                    pool_points.push(p);
                }
                None => dropped += 1,
            }
        }
        let val_points: Vec<Point> = embed(&validation)
            .into_iter()
            .filter_map(|p| {
                if p.is_none() {
                    dropped += 1;
                }
                p
            })
            .collect();
        if dropped > 0 {
            info!("dropped {dropped} examples with a zero Fisher embedding");
        }
        let pool = CandidatePool::new(pool_points)?;
        let target = TargetEmbedding::EmpiricalDiscrete(EmpiricalDiscrete::uniform(val_points)?);
        let kernel = match opts.embedding {
            EmbeddingMode::Normalized => Kernel::NormalizedFeature(FeatureMap::Identity),
            EmbeddingMode::Raw => Kernel::Linear(FeatureMap::Identity),
        };
        Ok(Self { data, opts, full_model, full_test_nll, pool_rows, pool, target, kernel, test_rows, dropped })
    }

    fn refit(&self, pool_ids: &[usize], weights: &[f64]) -> Result<LogisticModel> {
        let mut order: Vec<usize> = (0..pool_ids.len()).collect();
        order.sort_by_key(|&j| self.pool_rows[pool_ids[j]]);
        let rows: Vec<usize> = order.iter().map(|&j| self.pool_rows[pool_ids[j]]).collect();
        if self.opts.weighted_retrain {
            let abs: Vec<f64> = order.iter().map(|&j| weights[j].abs()).collect();
            let mean = abs.iter().sum::<f64>() / abs.len() as f64;
            let scaled: Vec<f64> = abs.iter().map(|w| w / mean).collect();
            train_weighted(self.data, &rows, Some(&scaled), self.opts.lambda, self.opts.train)
        } else {
            train_weighted(self.data, &rows, None, self.opts.lambda, self.opts.train)
        }
    }

    /// `k` pool entries drawn uniformly without replacement. The quadrature
    /// weights come from the span of the draws: an entry dependent on the
    /// earlier ones keeps weight zero and leaves `g` unchanged, but stays in
    /// the subset used for refitting.
    fn random_selection(&self, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let mut ids: Vec<usize> = self.pool.ids().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.truncate(k);
        let mut state = QuadratureState::new(&self.target, &self.kernel)?;
        let mut trace = vec![state.g()];
        for &id in &ids {
            match state.add_atom(self.pool.point(id).clone(), id) {
                Ok(()) | Err(Error::NearDependentAtom { .. }) => {}
                Err(e) => return Err(e),
            }
            trace.push(state.g());
        }
        let weights =
            ids.iter().map(|&id| state.ids().iter().position(|&a| a == id).map_or(0.0, |j| state.weights()[j])).collect();
        Ok((ids, weights, trace))
    }

    /// One summarization run. `workers > 1` uses the distributed selector
    /// for WKH and SBQ; MC ignores it.
    pub fn run(&self, method: Method, k: usize, workers: usize, seed: u64) -> Result<SummaryReport> {
        if method == Method::KhUniform {
            return Err(Error::UnsupportedMethod(format!("{method} (summarization needs WKH, SBQ or MC)")));
        }
        if k == 0 {
            return Err(Error::ZeroBudget);
        }
        let (ids, weights, g_trace) = match method {
            Method::McRandom => self.random_selection(k, seed)?,
            _ => {
                let greedy = Greedy::new(method, k)
                    .seed(seed)
                    .require_standardized(self.opts.embedding == EmbeddingMode::Normalized);
                if workers > 1 {
                    let opts = Distributed { greedy, workers, spill_dir: None };
                    let res = crate::distributed::run_distributed_with(&opts, &self.pool, &self.target, &self.kernel)?;
                    let w = res.winner_run();
                    (w.solution.ids(), w.solution.weights(), w.trace.g_values())
                } else {
                    let run = greedy.run(&self.pool, &self.target, &self.kernel)?;
                    (run.solution.ids(), run.solution.weights(), run.trace.g_values())
                }
            }
        };
        let model = self.refit(&ids, &weights)?;
        let test_nll = model.mean_nll(self.data, &self.test_rows);

        let (random_ids, random_weights, random_trace) = self.random_selection(k, seed)?;
        let random_model = self.refit(&random_ids, &random_weights)?;

        let mut selected: Vec<usize> = ids.iter().map(|&j| self.pool_rows[j]).collect();
        selected.sort_unstable();
        Ok(SummaryReport {
            method,
            workers: workers.max(1),
            k,
            seed,
            g_final: *g_trace.last().expect("trace has g_0"),
            g_trace,
            selected,
            test_nll,
            random_g_final: *random_trace.last().expect("trace has g_0"),
            random_test_nll: random_model.mean_nll(self.data, &self.test_rows),
            full_test_nll: self.full_test_nll,
            retrain_converged: model.converged,
        })
    }
}

/// Prepares the dataset and performs one run; see [`SummaryContext`].
pub fn summarize(
    data: &LabeledDataset,
    method: Method,
    k: usize,
    workers: usize,
    seed: u64,
    opts: SummarizeOptions,
) -> Result<SummaryReport> {
    SummaryContext::prepare(data, opts)?.run(method, k, workers, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn split_blobs(n: usize, d: usize, seed: u64) -> LabeledDataset {
        let mut data = LabeledDataset::blobs(n, d, 2.0, seed).unwrap();
        data.assign_random_splits(0.2, 0.1, seed).unwrap();
        data
    }

    #[test]
    fn separable_pair_is_classified() {
        let data = LabeledDataset::new(vec![vec![-1.0], vec![1.0]], vec![0, 1]).unwrap();
        let m = train_logistic(&data, &[0, 1], 0.1, TrainOptions::default()).unwrap();
        assert!(m.converged);
        assert!(m.predict_proba(&[-1.0]) < 0.5 && m.predict_proba(&[1.0]) > 0.5);
    }

    #[test]
    fn rejects_degenerate_training_sets() {
        let data = LabeledDataset::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![1, 1, 1]).unwrap();
        assert_eq!(train_logistic(&data, &[0, 1, 2], 1.0, TrainOptions::default()), Err(Error::BothClassesRequired));
        assert_eq!(train_logistic(&data, &[0], 1.0, TrainOptions::default()), Err(Error::TooFewExamples));
        assert!(LabeledDataset::new(vec![vec![0.0]], vec![2]).is_err());
        assert!(LabeledDataset::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
        assert!(LabeledDataset::new(vec![vec![f64::NAN]], vec![0]).is_err());
    }

    fn finite_difference(obj: &Objective, theta: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_iterator(
            theta.len(),
            (0..theta.len()).map(|j| {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                (obj.value(&up) - obj.value(&down)) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn blobs_model_converges_below_zero_model() {
        let data = LabeledDataset::blobs(200, 2, 2.0, 1).unwrap();
        let ids: Vec<usize> = (0..200).collect();
        let m = train_logistic(&data, &ids, 1.0, TrainOptions::default()).unwrap();
        assert!(m.converged && m.grad_norm <= 1e-6);
        let rows: Vec<&[f64]> = ids.iter().map(|&i| data.features(i)).collect();
        let labels: Vec<u8> = ids.iter().map(|&i| data.label(i)).collect();
        let obj = Objective::new(&rows, &labels, None, 1.0);
        let theta = DVector::from_vec(m.theta.clone());
        assert!(obj.value(&theta) < obj.value(&DVector::zeros(3)) - 10.0);
        let fd = finite_difference(&obj, &DVector::from_vec(vec![0.3, -0.2, 0.5]), 1e-5);
        let an = obj.gradient(&DVector::from_vec(vec![0.3, -0.2, 0.5]));
        assert!((fd - &an).norm() <= 1e-4 * an.norm());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..30);
            let d = rng.random_range(1..6);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let obj = Objective::new(&refs, &labels, Some(&weights), rng.random_range(0.0..2.0));
            let theta = DVector::from_iterator(d + 1, (0..=d).map(|_| rng.random_range(-1.0..1.0)));
            let fd = finite_difference(&obj, &theta, 1e-5);
            let an = obj.gradient(&theta);
            assert!((fd - &an).norm() <= 1e-4 * an.norm().max(1e-8));
        }
    }

    #[test]
    fn embedding_examples() {
        let model = LogisticModel { theta: vec![0.0, 0.0, 0.0], lambda: 0.0, iterations: 0, grad_norm: 0.0, converged: true };
        assert_eq!(fisher_gradient(&model, &[0.0, 0.0], 1), vec![0.5, 0.0, 0.0]);
        assert_eq!(fisher_embed(&model, &[0.0, 0.0], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        let a = fisher_embed(&model, &[0.3, -1.2], 0).unwrap();
        let b = fisher_embed(&model, &[0.3, -1.2], 0).unwrap();
        assert_eq!(a, b);
        let k = Kernel::cosine().eval(&Point::new(a).unwrap(), &Point::new(b).unwrap()).unwrap();
        assert!((k - 1.0).abs() <= 1e-15);
        let saturated = LogisticModel { theta: vec![1e4, 0.0], ..model };
        assert_eq!(fisher_embed(&saturated, &[0.0], 1), Err(Error::DegenerateEmbedding));
    }

    proptest! {
        #[test]
        fn induced_kernel_matches_dense_recomputation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = LogisticModel { theta, lambda: 1.0, iterations: 0, grad_norm: 0.0, converged: true };
            let xs: Vec<(Vec<f64>, u8)> = (0..2).map(|_| ((0..3).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..2))).collect();
            let fi = fisher_gradient(&model, &xs[0].0, xs[0].1);
            let fj = fisher_gradient(&model, &xs[1].0, xs[1].1);
            let dense = fi.iter().zip(&fj).map(|(a, b)| a * b).sum::<f64>()
                / (fi.iter().map(|a| a * a).sum::<f64>().sqrt() * fj.iter().map(|a| a * a).sum::<f64>().sqrt());
            let ei = Point::new(fisher_embed(&model, &xs[0].0, xs[0].1).unwrap()).unwrap();
            let ej = Point::new(fisher_embed(&model, &xs[1].0, xs[1].1).unwrap()).unwrap();
            let k = Kernel::cosine().eval(&ei, &ej).unwrap();
            prop_assert!((k - dense).abs() <= 1e-12);
            let norm: f64 = ei.coords().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let data = split_blobs(500, 2, 3);
        let (tr, va, te) = (data.indices(Split::Train), data.indices(Split::Validation), data.indices(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (360, 40, 100));
        let again = split_blobs(500, 2, 3);
        assert_eq!(again.indices(Split::Validation), va);
    }

    #[test]
    fn full_random_subset_reproduces_full_model() {
        let data = split_blobs(200, 3, 4);
        let ctx = SummaryContext::prepare(&data, SummarizeOptions::default()).unwrap();
        let n = ctx.pool.len();
        let report = ctx.run(Method::McRandom, n, 1, 9).unwrap();
        assert_eq!(report.selected, data.indices(Split::Train));
        assert_eq!(report.test_nll, report.full_test_nll);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let data = split_blobs(300, 20, 8);
        let a = summarize(&data, Method::Wkh, 10, 1, 2, SummarizeOptions::default()).unwrap();
        let b = summarize(&data, Method::Wkh, 10, 1, 2, SummarizeOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected.len(), 10);
        let ctx = SummaryContext::prepare(&data, SummarizeOptions::default()).unwrap();
        let sbq = ctx.run(Method::Sbq, 10, 1, 2).unwrap();
        assert!(sbq.g_final <= a.g_final + 1e-12);
        let dist = ctx.run(Method::Wkh, 10, 3, 2).unwrap();
        assert_eq!(dist.workers, 3);
        assert!(ctx.run(Method::KhUniform, 10, 1, 2).is_err());
    }

    #[test]
    fn raw_and_weighted_modes_run() {
        let data = split_blobs(200, 10, 6);
        let opts = SummarizeOptions { embedding: EmbeddingMode::Raw, weighted_retrain: true, ..Default::default() };
        let report = summarize(&data, Method::Sbq, 8, 1, 0, opts).unwrap();
        assert!(report.test_nll.is_finite());
        assert!(report.g_final <= report.g_trace[0]);
    }
}
