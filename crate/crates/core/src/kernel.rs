//! Points, candidate pools and standardized kernels.
//!
//! Every kernel shipped here (except [`Kernel::Linear`]) satisfies
//! `k(x, x) = 1`, which the selection rules rely on: the Schur complement of a
//! fresh candidate against an empty atom set is exactly one and the squared
//! discrepancy `g` is bounded by one.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A point of the domain. Coordinates are finite and non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyPoint);
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCoordinate(pos));
        }
        Ok(Self { coords })
    }

    /// A one-coordinate point naming row `index` of a precomputed kernel.
    pub fn index(index: usize) -> Self {
        Self { coords: vec![index as f64] }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Point::new(coords)
    }
}

/// Finite indexed set of points sharing one dimension. Ids are `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    points: Vec<Point>,
    dim: usize,
}

impl CandidatePool {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let dim = points.first().ok_or(Error::EmptyPool)?.dim();
        if points.iter().any(|p| p.dim() != dim) {
            return Err(Error::InconsistentPool);
        }
        Ok(Self { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, id: usize) -> &Point {
        &self.points[id]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.points.len()
    }
}

/// Explicit feature map used by the finite-dimensional kernels.
#[derive(Clone)]
pub enum FeatureMap {
    /// `φ(x) = x`.
    Identity,
    /// `φ(x) = (1, x)`. Lifts points onto an affine slice so the cone of
    /// features over a convex domain is convex.
    AffineLift,
    Custom(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl FeatureMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::AffineLift => std::iter::once(1.0).chain(x.iter().copied()).collect(),
            FeatureMap::Custom(f) => f(x),
        }
    }

    /// Returns `(⟨φ(x), φ(y)⟩, ‖φ(x)‖², ‖φ(y)‖²)`.
    fn inner_and_norms(&self, x: &[f64], y: &[f64]) -> (f64, f64, f64) {
        fn sums(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
            a.iter().zip(b).fold((0.0, 0.0, 0.0), |(ab, aa, bb), (&u, &v)| {
                (ab + u * v, aa + u * u, bb + v * v)
            })
        }
        match self {
            FeatureMap::Identity => sums(x, y),
            FeatureMap::AffineLift => {
                let (ab, aa, bb) = sums(x, y);
                (ab + 1.0, aa + 1.0, bb + 1.0)
            }
            FeatureMap::Custom(f) => {
                let (fx, fy) = (f(x), f(y));
                sums(&fx, &fy)
            }
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => write!(f, "Identity"),
            FeatureMap::AffineLift => write!(f, "AffineLift"),
            FeatureMap::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Symmetric unit-diagonal matrix addressed by [`Point::index`] points.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row_of(&self, p: &Point) -> Result<usize> {
        if p.dim() != 1 {
            return Err(Error::InvalidIndex(format!("{:?}", p.coords())));
        }
        let c = p.coords()[0];
        if c < 0.0 || c.fract() != 0.0 || c as usize >= self.n {
            return Err(Error::InvalidIndex(format!("{c}")));
        }
        Ok(c as usize)
    }
}

/// Positive-definite similarity on points.
#[derive(Clone, Debug)]
pub enum Kernel {
    /// `exp(-‖x-y‖² / (2σ²))`.
    Rbf { bandwidth: f64 },
    /// Cosine similarity of explicit features.
    NormalizedFeature(FeatureMap),
    /// Plain inner product of explicit features. Not standardized; only
    /// meant for raw-embedding experiments.
    Linear(FeatureMap),
    Precomputed(Arc<GramMatrix>),
}

impl Kernel {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        Ok(Kernel::Rbf { bandwidth })
    }

    pub fn cosine() -> Self {
        Kernel::NormalizedFeature(FeatureMap::Identity)
    }

    /// Validates symmetry (1e-12) and the unit diagonal (1e-10).
    pub fn precomputed(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidGram("empty matrix".into()));
        }
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidGram(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGram(format!("row {i} has a non-finite entry")));
            }
            values.extend_from_slice(row);
        }
        for i in 0..n {
            if (values[i * n + i] - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidGram(format!("diagonal entry {i} is {}", values[i * n + i])));
            }
            for j in 0..i {
                if (values[i * n + j] - values[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidGram(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Kernel::Precomputed(Arc::new(GramMatrix { n, values })))
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            Kernel::Rbf { bandwidth } => Some(*bandwidth),
            _ => None,
        }
    }

    pub fn eval(&self, x: &Point, y: &Point) -> Result<f64> {
        match self {
            Kernel::Precomputed(gram) => Ok(gram.get(gram.row_of(x)?, gram.row_of(y)?)),
            _ => {
                if x.dim() != y.dim() {
                    return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
                }
                self.eval_coords(x.coords(), y.coords())
            }
        }
    }

    fn eval_coords(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Kernel::Rbf { bandwidth } => {
                if !(*bandwidth > 0.0) {
                    return Err(Error::InvalidBandwidth(*bandwidth));
                }
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok((-sq / (2.0 * bandwidth * bandwidth)).exp())
            }
            Kernel::NormalizedFeature(map) => {
                let (xy, xx, yy) = map.inner_and_norms(x, y);
                if xx == 0.0 || yy == 0.0 {
                    return Err(Error::ZeroNormFeature);
                }
                Ok((xy / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0))
            }
            Kernel::Linear(map) => Ok(map.inner_and_norms(x, y).0),
            Kernel::Precomputed(_) => unreachable!("handled in eval"),
        }
    }

    /// Kernel values of `x` against every point of `others`, in order.
    pub fn gram_row(&self, x: &Point, others: &[Point]) -> Result<Vec<f64>> {
        others.iter().map(|y| self.eval(x, y)).collect()
    }

    /// `|k(x,x) - 1| ≤ tol` for every pool point.
    pub fn check_standardized(&self, pool: &CandidatePool, tol: f64) -> bool {
        pool.points()
            .iter()
            .all(|p| matches!(self.eval(p, p), Ok(v) if (v - 1.0).abs() <= tol))
    }

    /// Dense Gram matrix of `points`, row-major.
    pub fn gram_matrix(&self, points: &[&Point]) -> Result<Vec<Vec<f64>>> {
        points
            .iter()
            .map(|x| points.iter().map(|y| self.eval(x, y)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    #[test]
    fn rbf_values() {
        let k = Kernel::rbf(1.0).unwrap();
        assert_eq!(k.eval(&p(&[0.3, -2.0]), &p(&[0.3, -2.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(k.eval(&p(&[0.0]), &p(&[2.0])).unwrap(), (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.eval(&p(&[0.0]), &p(&[2.0])).unwrap(), 0.135335, epsilon = 1e-6);
    }

    #[test]
    fn cosine_orthogonal() {
        let k = Kernel::cosine();
        assert_eq!(k.eval(&p(&[1.0, 0.0]), &p(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn eval_errors() {
        let k = Kernel::rbf(1.0).unwrap();
        assert!(matches!(k.eval(&p(&[0.0]), &p(&[0.0, 1.0])), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(Kernel::rbf(0.0), Err(Error::InvalidBandwidth(_))));
        assert!(matches!(Kernel::rbf(-1.0), Err(Error::InvalidBandwidth(_))));
        let bad = Kernel::Rbf { bandwidth: -2.0 };
        assert!(bad.eval(&p(&[0.0]), &p(&[0.0])).is_err());
        assert_eq!(
            Kernel::cosine().eval(&p(&[0.0, 0.0]), &p(&[1.0, 0.0])),
            Err(Error::ZeroNormFeature)
        );
        assert!(Point::new(vec![]).is_err());
        assert!(Point::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn gram_row_cases() {
        let k = Kernel::rbf(1.0).unwrap();
        let x = p(&[0.0]);
        assert_eq!(k.gram_row(&x, &[x.clone()]).unwrap(), vec![1.0]);
        let row = k.gram_row(&x, &[p(&[0.0]), p(&[2.0])]).unwrap();
        assert_eq!(row[0], 1.0);
        assert_abs_diff_eq!(row[1], 0.135335, epsilon = 1e-6);
        assert!(k.gram_row(&x, &[]).unwrap().is_empty());
    }

    #[test]
    fn standardization_checks() {
        let pool = CandidatePool::new(vec![p(&[1.0, 2.0]), p(&[-3.0, 0.5]), p(&[0.0, 1.0])]).unwrap();
        assert!(Kernel::rbf(0.7).unwrap().check_standardized(&pool, 1e-12));
        assert!(Kernel::cosine().check_standardized(&pool, 1e-12));
        assert!(Kernel::NormalizedFeature(FeatureMap::AffineLift).check_standardized(&pool, 1e-12));
        assert!(!Kernel::Linear(FeatureMap::Identity).check_standardized(&pool, 1e-3));

        // Construction rejects a non-unit diagonal outright.
        assert!(Kernel::precomputed(vec![vec![1.0, 0.2], vec![0.2, 0.9]]).is_err());
        let gram = GramMatrix { n: 2, values: vec![1.0, 0.2, 0.2, 0.9] };
        let k = Kernel::Precomputed(Arc::new(gram));
        let ids = CandidatePool::new(vec![Point::index(0), Point::index(1)]).unwrap();
        assert!(!k.check_standardized(&ids, 1e-3));
    }

    #[test]
    fn precomputed_validation() {
        assert!(Kernel::precomputed(vec![vec![1.0, 0.3], vec![0.2, 1.0]]).is_err());
        assert!(Kernel::precomputed(vec![vec![1.0, 0.3]]).is_err());
        let k = Kernel::precomputed(vec![vec![1.0, 0.25], vec![0.25, 1.0]]).unwrap();
        assert_eq!(k.eval(&Point::index(0), &Point::index(1)).unwrap(), 0.25);
        assert!(k.eval(&Point::index(0), &Point::index(2)).is_err());
        assert!(k.eval(&Point::index(0), &p(&[0.5])).is_err());
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Point> {
        (0..n)
            .map(|_| p(&(0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()))
            .collect()
    }

    fn shipped_kernels() -> Vec<Kernel> {
        vec![
            Kernel::rbf(0.8).unwrap(),
            Kernel::cosine(),
            Kernel::NormalizedFeature(FeatureMap::AffineLift),
            Kernel::NormalizedFeature(FeatureMap::Custom(Arc::new(|x: &[f64]| {
                vec![x[0], x[1], x[0] * x[1], 1.0]
            }))),
        ]
    }

    #[test]
    fn symmetry_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in shipped_kernels() {
            for _ in 0..1000 {
                let pts = random_points(&mut rng, 2, 3);
                let a = k.eval(&pts[0], &pts[1]).unwrap();
                let b = k.eval(&pts[1], &pts[0]).unwrap();
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in shipped_kernels() {
            for n in [2, 7, 20] {
                let pts = random_points(&mut rng, n, 3);
                let refs: Vec<&Point> = pts.iter().collect();
                let g = k.gram_matrix(&refs).unwrap();
                let m = DMatrix::from_fn(n, n, |i, j| g[i][j]);
                let min = m.symmetric_eigenvalues().min();
                assert!(min >= -1e-8, "min eigenvalue {min}");
            }
            let pool = CandidatePool::new(random_points(&mut rng, 30, 3)).unwrap();
            assert!(k.check_standardized(&pool, 1e-10));
        }
    }
}
