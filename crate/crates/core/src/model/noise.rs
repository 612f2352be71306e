use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Noise mixing matrix `Γ` together with its cached covariance `Σ = ΓᵀΓ`.
///
/// The correlated drivers are `E = ΓᵀB` for a standard Brownian motion `B`, so
/// species `i` receives `Σ_j Γ_ji dB_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    gamma: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
}

impl NoiseSpec {
    pub fn new(gamma: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let n = gamma.len();
        if n == 0 || gamma.iter().any(|row| row.len() != n) {
            return Err(ModelError::DimensionMismatch(format!(
                "noise matrix must be square and non-empty, got {} rows",
                n
            )));
        }
        if gamma.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter("noise matrix has non-finite entries".into()));
        }
        let mut sigma = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for row in &gamma {
                    acc += row[i] * row[j];
                }
                sigma[i][j] = acc;
            }
        }
        Ok(NoiseSpec { gamma, sigma })
    }

    /// `Γ = diag(sqrt(σ_ii))`.
    pub fn diagonal(variances: &[f64]) -> Result<Self, ModelError> {
        let n = variances.len();
        let mut gamma = vec![vec![0.0; n]; n];
        for (i, &v) in variances.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(ModelError::InvalidParameter(format!("variance {v} is negative")));
            }
            gamma[i][i] = v.sqrt();
        }
        NoiseSpec::new(gamma)
    }

    pub fn identity(n: usize) -> Self {
        NoiseSpec::diagonal(&vec![1.0; n]).expect("identity noise")
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[Vec<f64>] {
        &self.gamma
    }

    pub fn sigma(&self) -> &[Vec<f64>] {
        &self.sigma
    }

    pub fn sigma_ii(&self, i: usize) -> f64 {
        self.sigma[i][i]
    }

    /// `σ* = max_ij σ_ij`.
    pub fn sigma_star(&self) -> f64 {
        self.sigma.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_symmetric_eigenvalue(&self.sigma)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }

    pub fn require_positive_definite(&self) -> Result<(), ModelError> {
        let min_eig = self.min_eigenvalue();
        if min_eig > 0.0 {
            Ok(())
        } else {
            Err(ModelError::NotPositiveDefinite { min_eigenvalue: min_eig })
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix given as rows.
pub fn min_symmetric_eigenvalue(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n == 0 {
        return f64::NAN;
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    symmetric_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

pub(crate) fn symmetric_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return vec![f64::NAN; m.nrows()];
    }
    SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_is_gamma_transpose_gamma() {
        let noise = NoiseSpec::new(vec![vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let s = noise.sigma();
        assert_eq!(s[0][0], 1.0 * 1.0 + 0.5 * 0.5);
        assert_eq!(s[0][1], 1.0 * 2.0 - 0.5 * 1.0);
        assert_eq!(s[1][0], s[0][1]);
        assert_eq!(s[1][1], 4.0 + 1.0);
        assert!(noise.is_positive_definite());
    }

    #[test]
    fn equal_rows_are_singular() {
        let noise = NoiseSpec::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(!noise.is_positive_definite());
        assert!(matches!(noise.require_positive_definite(), Err(ModelError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn identity_has_unit_spectrum() {
        assert_eq!(NoiseSpec::identity(3).min_eigenvalue(), 1.0);
        assert_eq!(NoiseSpec::identity(3).sigma_star(), 1.0);
    }

    #[test]
    fn rejects_ragged_matrix() {
        assert!(NoiseSpec::new(vec![vec![1.0, 0.0], vec![1.0]]).is_err());
    }
}
