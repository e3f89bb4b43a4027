//! Growing quadrature rule with optimal weights.
//!
//! The state keeps the lower Cholesky factor `L` of the atoms' Gram matrix
//! `K`, the mean-embedding values `z` at the atoms, `α = L⁻¹z` and the
//! weights `w = K⁻¹z = L⁻ᵀα`. The squared discrepancy of the weighted rule is
//! `g = c - zᵀK⁻¹z = c - ‖α‖²`, so adding an atom lowers `g` by exactly the
//! square of the new `α` entry.

use crate::embedding::TargetEmbedding;
use crate::error::{Error, Result};
use crate::kernel::{Kernel, Point};

/// Schur complements below this reject a candidate as dependent.
pub const DEPENDENCE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub id: usize,
    pub point: Point,
}

/// A candidate seen against the current atoms.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `L⁻¹ k_x`.
    pub coeffs: Vec<f64>,
    /// `k(x,x) - ‖L⁻¹k_x‖²`, the squared distance of `φ(x)` from the span of
    /// the atoms.
    pub schur: f64,
    /// `z(x)`.
    pub embedding: f64,
    /// `z(x) - k_xᵀw`.
    pub correlation: f64,
}

impl Projection {
    /// Decrease of `g` if the candidate were added; zero when dependent.
    pub fn variance_reduction(&self) -> f64 {
        if self.schur < DEPENDENCE_TOL {
            0.0
        } else {
            self.correlation * self.correlation / self.schur
        }
    }

    pub fn is_dependent(&self) -> bool {
        self.schur < DEPENDENCE_TOL
    }
}

#[derive(Clone, Debug)]
pub struct QuadratureState<'a> {
    kernel: &'a Kernel,
    target: &'a TargetEmbedding,
    atoms: Vec<Atom>,
    /// Row `i` holds the `i + 1` entries of row `i` of `L`.
    chol: Vec<Vec<f64>>,
    z: Vec<f64>,
    alpha: Vec<f64>,
    weights: Vec<f64>,
    explained: f64,
    c: f64,
}

impl<'a> QuadratureState<'a> {
    /// Empty rule; `g(∅) = c`.
    pub fn new(target: &'a TargetEmbedding, kernel: &'a Kernel) -> Result<Self> {
        let c = target.self_energy(kernel)?;
        Ok(Self::with_self_energy(target, kernel, c))
    }

    /// Empty rule reusing an already computed self-energy.
    pub fn with_self_energy(target: &'a TargetEmbedding, kernel: &'a Kernel, c: f64) -> Self {
        Self {
            kernel,
            target,
            atoms: Vec::new(),
            chol: Vec::new(),
            z: Vec::new(),
            alpha: Vec::new(),
            weights: Vec::new(),
            explained: 0.0,
            c,
        }
    }

    /// Adds `atoms` in order, failing on the first dependent one.
    pub fn from_atoms(
        target: &'a TargetEmbedding,
        kernel: &'a Kernel,
        atoms: impl IntoIterator<Item = (usize, Point)>,
    ) -> Result<Self> {
        let mut state = Self::new(target, kernel)?;
        for (id, point) in atoms {
            state.add_atom(point, id)?;
        }
        Ok(state)
    }

    pub fn kernel(&self) -> &'a Kernel {
        self.kernel
    }

    pub fn target(&self) -> &'a TargetEmbedding {
        self.target
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn ids(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.id).collect()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.atoms.iter().any(|a| a.id == id)
    }

    /// Replaces every atom id `i` with `map[i]`.
    pub(crate) fn relabel(&mut self, map: &[usize]) {
        for a in &mut self.atoms {
            a.id = map[a.id];
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn z_values(&self) -> &[f64] {
        &self.z
    }

    /// `L⁻¹z`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Row `i` of the Cholesky factor (entries `0..=i`).
    pub fn cholesky_row(&self, i: usize) -> &[f64] {
        &self.chol[i]
    }

    pub fn self_energy(&self) -> f64 {
        self.c
    }

    /// Squared discrepancy `c - zᵀK⁻¹z`. May dip below zero by rounding.
    pub fn g(&self) -> f64 {
        self.c - self.explained
    }

    /// Gram matrix of the atoms, evaluated from the kernel.
    pub fn gram(&self) -> Result<Vec<Vec<f64>>> {
        let points: Vec<&Point> = self.atoms.iter().map(|a| &a.point).collect();
        self.kernel.gram_matrix(&points)
    }

    /// `‖μ_p - Σ u_i φ(x_i)‖² = c - 2uᵀz + uᵀKu` for arbitrary weights `u`.
    pub fn objective_at(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: u.len() });
        }
        let gram = self.gram()?;
        let linear: f64 = u.iter().zip(&self.z).map(|(a, b)| a * b).sum();
        let quad: f64 = gram
            .iter()
            .zip(u)
            .map(|(row, ui)| ui * row.iter().zip(u).map(|(k, uj)| k * uj).sum::<f64>())
            .sum();
        Ok(self.c - 2.0 * linear + quad)
    }

    /// Solves `L v = b` by forward substitution over the first `b.len()` rows.
    fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(b.len());
        for (i, row) in self.chol.iter().enumerate().take(b.len()) {
            let dot: f64 = row[..i].iter().zip(&v).map(|(l, x)| l * x).sum();
            v.push((b[i] - dot) / row[i]);
        }
        v
    }

    fn back_solve_weights(&mut self) {
        let n = self.alpha.len();
        let mut w = vec![0.0; n];
        for i in (0..n).rev() {
            let tail: f64 = (i + 1..n).map(|j| self.chol[j][i] * w[j]).sum();
            w[i] = (self.alpha[i] - tail) / self.chol[i][i];
        }
        self.weights = w;
    }

    /// Projection of `x` given a known `z(x)`.
    pub fn project_with_embedding(&self, x: &Point, embedding: f64) -> Result<Projection> {
        let kx: Vec<f64> = self
            .atoms
            .iter()
            .map(|a| self.kernel.eval(x, &a.point))
            .collect::<Result<_>>()?;
        let coeffs = self.forward_solve(&kx);
        let kxx = self.kernel.eval(x, x)?;
        let schur = kxx - coeffs.iter().map(|v| v * v).sum::<f64>();
        let fitted: f64 = kx.iter().zip(&self.weights).map(|(k, w)| k * w).sum();
        Ok(Projection { coeffs, schur, embedding, correlation: embedding - fitted })
    }

    pub fn project(&self, x: &Point) -> Result<Projection> {
        let z = self.target.mean_embed(self.kernel, x)?;
        self.project_with_embedding(x, z)
    }

    /// Appends `x` as a new atom, extending the factor by one row.
    ///
    /// Rejects repeated pool ids and candidates whose Schur complement is
    /// below [`DEPENDENCE_TOL`]; the state is untouched on error.
    pub fn add_atom(&mut self, x: Point, pool_id: usize) -> Result<()> {
        let z = self.target.mean_embed(self.kernel, &x)?;
        self.add_atom_with_embedding(x, pool_id, z)
    }

    pub fn add_atom_with_embedding(&mut self, x: Point, pool_id: usize, embedding: f64) -> Result<()> {
        if self.contains(pool_id) {
            return Err(Error::DuplicateAtom(pool_id));
        }
        let proj = self.project_with_embedding(&x, embedding)?;
        if !(proj.schur >= DEPENDENCE_TOL) {
            return Err(Error::NearDependentAtom { id: pool_id, schur: proj.schur });
        }
        let diag = proj.schur.sqrt();
        let partial: f64 = proj.coeffs.iter().zip(&self.alpha).map(|(v, a)| v * a).sum();
        let alpha_new = (embedding - partial) / diag;

        let mut row = proj.coeffs;
        row.push(diag);
        self.chol.push(row);
        self.z.push(embedding);
        self.alpha.push(alpha_new);
        self.explained += alpha_new * alpha_new;
        self.atoms.push(Atom { id: pool_id, point: x });
        self.back_solve_weights();
        Ok(())
    }

    /// `z(x) - k_xᵀw`: correlation of `φ(x)` with the residual
    /// `μ_p - Σ w_i φ(x_i)`. Equals `z(x)` on the empty state.
    pub fn residual_correlation(&self, x: &Point) -> Result<f64> {
        Ok(self.project(x)?.correlation)
    }

    /// Exact decrease `g(S) - g(S ∪ {x})`. Zero for dependent candidates.
    pub fn posterior_variance_reduction(&self, x: &Point) -> Result<f64> {
        Ok(self.project(x)?.variance_reduction())
    }

    /// Overwrites the weights with `w + delta` without touching the
    /// factorization. Only useful for fault injection in audits.
    pub fn perturb_weights(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: delta.len() });
        }
        for (w, d) in self.weights.iter_mut().zip(delta) {
            *w += d;
        }
        Ok(())
    }
}
