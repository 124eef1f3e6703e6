//! Volatility uncertainty set and the sublinear function
//! `G(A) = 1/2 * sup_{Sigma in Theta} tr(A Sigma)`.
//!
//! `Theta` is held as a finite list of volatility generators `gamma_m`; the
//! covariance of each is `gamma_m gamma_m^T`. Since `G` is a supremum of linear
//! functionals of `Sigma`, the extreme points of a convex set suffice.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of a covariance below `-PSD_TOLERANCE` are rejected; those in
/// `[-PSD_TOLERANCE, 0)` are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Dense symmetric `d x d` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Builds `(A + A^T) / 2` from row-major entries.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("matrix dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) = {}",
                pos / dim,
                pos % dim,
                entries[pos]
            )));
        }
        let mut m = SymMatrix { dim, entries };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("matrix rows must form a square array".into()));
        }
        Self::new(dim, rows.iter().flatten().copied().collect())
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.entries[i * dim + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(1, vec![value])
    }

    fn symmetrize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (self.entries[i * d + j] + self.entries[j * d + i]);
                self.entries[i * d + j] = avg;
                self.entries[j * d + i] = avg;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `tr(A B)` for symmetric `A`, `B`, i.e. the Frobenius inner product.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_dim(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect();
        Ok(SymMatrix { dim: self.dim, entries })
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_dim(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect();
        Ok(SymMatrix { dim: self.dim, entries })
    }

    pub fn scale(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            entries: self.entries.iter().map(|v| v * factor).collect(),
        }
    }

    fn check_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "matrix dimensions {} and {} differ",
                self.dim, other.dim
            )));
        }
        Ok(())
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.entries);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().expect("dim > 0")
    }

    /// Rebuilds the matrix with eigenvalues in `[-PSD_TOLERANCE, 0)` set to zero.
    fn clamp_psd(&self) -> Result<SymMatrix> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.entries);
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE {
            return Err(Error::Invalid(format!(
                "covariance is not positive semidefinite (eigenvalue {min:e})"
            )));
        }
        if min >= 0.0 {
            return Ok(self.clone());
        }
        let clamped = eig.eigenvalues.map(|v| v.max(0.0));
        let rebuilt = &eig.eigenvectors
            * DMatrix::from_diagonal(&clamped)
            * eig.eigenvectors.transpose();
        let mut entries = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                entries.push(rebuilt[(i, j)]);
            }
        }
        SymMatrix::new(self.dim, entries)
    }
}

/// Finite family of volatility matrices generating the uncertainty set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSet {
    dim: usize,
    /// Row-major `d x d` volatility matrices `gamma_m`.
    generators: Vec<Vec<f64>>,
    covariances: Vec<SymMatrix>,
    sigma_lower_sq: f64,
    sigma_upper_sq: f64,
}

impl CovarianceSet {
    /// Builds the set from row-major volatility matrices; each covariance is
    /// `gamma gamma^T`.
    pub fn from_generators(dim: usize, generators: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("covariance set dimension must be positive".into()));
        }
        if generators.is_empty() {
            return Err(Error::Invalid("covariance set needs at least one generator".into()));
        }
        let mut covariances = Vec::with_capacity(generators.len());
        for (m, gamma) in generators.iter().enumerate() {
            if gamma.len() != dim * dim {
                return Err(Error::Dimension(format!(
                    "generator {m} has {} entries, expected {}",
                    gamma.len(),
                    dim * dim
                )));
            }
            if gamma.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("generator {m} has a non-finite entry")));
            }
            let mut sigma = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    sigma[i * dim + j] = (0..dim).map(|k| gamma[i * dim + k] * gamma[j * dim + k]).sum();
                }
            }
            covariances.push(SymMatrix::new(dim, sigma)?.clamp_psd()?);
        }
        Self::assemble(dim, generators, covariances)
    }

    /// Generators given as nested rows, as they appear in configuration files.
    pub fn from_generator_rows(generators: &[Vec<Vec<f64>>]) -> Result<Self> {
        let dim = generators.first().map(|g| g.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(generators.len());
        for (m, rows) in generators.iter().enumerate() {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::Dimension(format!("generator {m} is not {dim}x{dim}")));
            }
            flat.push(rows.iter().flatten().copied().collect());
        }
        Self::from_generators(dim, flat)
    }

    /// One-dimensional set from a variance interval `[lo, hi]`: exactly the two
    /// generators `sqrt(lo)` and `sqrt(hi)`, with covariances `lo` and `hi`
    /// stored as given.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFinite(format!("variance interval [{lo}, {hi}]")));
        }
        if lo < 0.0 || lo > hi {
            return Err(Error::Invalid(format!(
                "variance interval [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            )));
        }
        let generators = vec![vec![lo.sqrt()], vec![hi.sqrt()]];
        let covariances = vec![SymMatrix::scalar(lo)?, SymMatrix::scalar(hi)?];
        Self::assemble(1, generators, covariances)
    }

    fn assemble(dim: usize, generators: Vec<Vec<f64>>, covariances: Vec<SymMatrix>) -> Result<Self> {
        let mut lower = f64::INFINITY;
        let mut upper = f64::NEG_INFINITY;
        for sigma in &covariances {
            let ev = sigma.eigenvalues();
            lower = lower.min(ev[0].max(0.0));
            upper = upper.max(ev[dim - 1].max(0.0));
        }
        Ok(CovarianceSet {
            dim,
            generators,
            covariances,
            sigma_lower_sq: lower,
            sigma_upper_sq: upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.covariances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariances.is_empty()
    }

    pub fn generator(&self, m: usize) -> &[f64] {
        &self.generators[m]
    }

    pub fn generators(&self) -> &[Vec<f64>] {
        &self.generators
    }

    pub fn covariance(&self, m: usize) -> &SymMatrix {
        &self.covariances[m]
    }

    pub fn covariances(&self) -> &[SymMatrix] {
        &self.covariances
    }

    /// Smallest eigenvalue over all covariances.
    pub fn sigma_lower_sq(&self) -> f64 {
        self.sigma_lower_sq
    }

    /// Largest eigenvalue over all covariances.
    pub fn sigma_upper_sq(&self) -> f64 {
        self.sigma_upper_sq
    }

    fn check_arg(&self, a: &SymMatrix) -> Result<()> {
        if a.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "G argument is {}x{} but the covariance set is {}-dimensional",
                a.dim(),
                a.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `G(A)`.
    pub fn eval_g(&self, a: &SymMatrix) -> Result<f64> {
        Ok(self.argmax_sigma(a)?.2)
    }

    /// First covariance index attaining the supremum in `G(A)`, the covariance
    /// itself and the value `G(A)`.
    pub fn argmax_sigma(&self, a: &SymMatrix) -> Result<(usize, &SymMatrix, f64)> {
        self.check_arg(a)?;
        let (best, value) = argmax_first(self.covariances.iter().map(|s| 0.5 * a.trace_product(s)));
        Ok((best, &self.covariances[best], value))
    }

    /// `G` evaluated on a row-major buffer of the right size, skipping the
    /// allocation of a [`SymMatrix`]. The buffer is read as `(A + A^T) / 2`.
    pub fn eval_g_raw(&self, a: &[f64]) -> f64 {
        let d = self.dim;
        debug_assert_eq!(a.len(), d * d);
        let (_, value) = argmax_first(self.covariances.iter().map(|s| {
            let e = s.entries();
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += 0.5 * (a[i * d + j] + a[j * d + i]) * e[i * d + j];
                }
            }
            0.5 * acc
        }));
        value
    }

    /// A constant `c` with `G(A) - G(B) >= c tr(A - B)` whenever `A >= B`:
    /// half the smallest eigenvalue over the covariances.
    pub fn nondegeneracy_bound(&self) -> f64 {
        0.5 * self.sigma_lower_sq
    }
}

/// Index of the first maximum and the maximum itself.
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    (best, best_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_interval() -> CovarianceSet {
        CovarianceSet::interval(0.25, 1.0).unwrap()
    }

    #[test]
    fn zero_argument_gives_zero() {
        let theta = unit_interval();
        assert_eq!(theta.eval_g(&SymMatrix::zeros(1)).unwrap(), 0.0);
        let theta2 = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.3, 0.8]]).unwrap();
        assert_eq!(theta2.eval_g(&SymMatrix::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn interval_values_by_enumeration() {
        let theta = unit_interval();
        // enumerate {0.25, 1.0}: 1/2 max(2*0.25, 2*1.0) and 1/2 max(-0.5, -2)
        assert_eq!(theta.eval_g(&SymMatrix::scalar(2.0).unwrap()).unwrap(), 1.0);
        assert_eq!(theta.eval_g(&SymMatrix::scalar(-2.0).unwrap()).unwrap(), -0.25);
    }

    #[test]
    fn singleton_is_linear() {
        let theta = CovarianceSet::interval(1.0, 1.0).unwrap();
        for a in [-3.0, 0.0, 7.0] {
            assert_eq!(theta.eval_g(&SymMatrix::scalar(a).unwrap()).unwrap(), a / 2.0);
        }
    }

    #[test]
    fn argmax_picks_extreme_and_lowest_index_on_ties() {
        let theta = unit_interval();
        let (i, s, v) = theta.argmax_sigma(&SymMatrix::scalar(2.0).unwrap()).unwrap();
        assert_eq!((i, s.get(0, 0), v), (1, 1.0, 1.0));
        let (i, s, _) = theta.argmax_sigma(&SymMatrix::scalar(-2.0).unwrap()).unwrap();
        assert_eq!((i, s.get(0, 0)), (0, 0.25));
        let (i, _, _) = theta.argmax_sigma(&SymMatrix::zeros(1)).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn nondegeneracy_bound_values() {
        assert_eq!(unit_interval().nondegeneracy_bound(), 0.125);
        let with_zero = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 4]]).unwrap();
        assert_eq!(with_zero.nondegeneracy_bound(), 0.0);
        let id = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        assert!((id.nondegeneracy_bound() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_and_non_finite_are_errors() {
        let theta = unit_interval();
        assert!(matches!(theta.eval_g(&SymMatrix::zeros(2)), Err(Error::Dimension(_))));
        assert!(matches!(SymMatrix::new(1, vec![f64::NAN]), Err(Error::NonFinite(_))));
        assert!(CovarianceSet::interval(1.0, 0.5).is_err());
        assert!(CovarianceSet::from_generators(1, vec![]).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let a = SymMatrix::new(2, vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 3.0);
    }

    #[test]
    fn raw_evaluation_matches() {
        let theta = CovarianceSet::from_generators(
            2,
            vec![vec![1.0, 0.0, 0.2, 0.7], vec![0.5, 0.1, 0.0, 1.1]],
        )
        .unwrap();
        let raw = [0.3, -1.2, 0.4, 2.0];
        let a = SymMatrix::new(2, raw.to_vec()).unwrap();
        assert_eq!(theta.eval_g(&a).unwrap(), theta.eval_g_raw(&raw));
    }

    #[test]
    fn covariances_are_gamma_gamma_t() {
        let theta = CovarianceSet::from_generators(2, vec![vec![1.0, 2.0, 0.0, 3.0]]).unwrap();
        let s = theta.covariance(0);
        assert_eq!(s.get(0, 0), 5.0);
        assert_eq!(s.get(0, 1), 6.0);
        assert_eq!(s.get(1, 1), 9.0);
        assert!(theta.sigma_lower_sq() <= theta.sigma_upper_sq());
    }
}
