use serde::{Deserialize, Serialize};

use super::{History, ModelError};

/// One point mass of a delay measure: weight placed at `-lag`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayAtom {
    pub lag: f64,
    pub weight: f64,
}

/// A probability measure on `[-r, 0]` represented by finitely many atoms.
///
/// Continuous delay densities are turned into atoms with [`DelayKernel::midpoint`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayKernel {
    atoms: Vec<DelayAtom>,
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

impl DelayKernel {
    pub fn new(atoms: Vec<DelayAtom>) -> Result<Self, ModelError> {
        let kernel = DelayKernel { atoms };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Point mass at `-lag`.
    pub fn single(lag: f64) -> Result<Self, ModelError> {
        DelayKernel::new(vec![DelayAtom { lag, weight: 1.0 }])
    }

    /// Midpoint-rule quadrature of a density on `[-span, 0]`.
    ///
    /// `density(lag)` is evaluated at the cell midpoints and the weights are
    /// normalized to sum to one.
    pub fn midpoint<F: Fn(f64) -> f64>(density: F, span: f64, atoms: usize) -> Result<Self, ModelError> {
        if atoms == 0 || !(span > 0.0) || !span.is_finite() {
            return Err(ModelError::InvalidKernel(format!(
                "midpoint quadrature needs atoms > 0 and a positive span (got {atoms} atoms, span {span})"
            )));
        }
        let h = span / atoms as f64;
        let mut raw: Vec<DelayAtom> = (0..atoms)
            .map(|k| {
                let lag = (k as f64 + 0.5) * h;
                DelayAtom { lag, weight: density(lag) * h }
            })
            .collect();
        let total: f64 = raw.iter().map(|a| a.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ModelError::InvalidKernel(format!("density integrates to {total}")));
        }
        for a in &mut raw {
            a.weight /= total;
        }
        DelayKernel::new(raw)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.atoms.is_empty() {
            return Err(ModelError::InvalidKernel("kernel has no atoms".into()));
        }
        let mut total = 0.0;
        for a in &self.atoms {
            if !a.lag.is_finite() || a.lag < 0.0 {
                return Err(ModelError::NegativeLag(a.lag));
            }
            if !a.weight.is_finite() || a.weight < 0.0 {
                return Err(ModelError::InvalidKernel(format!("weight {} is not a nonnegative number", a.weight)));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(ModelError::InvalidKernel(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn atoms(&self) -> &[DelayAtom] {
        &self.atoms
    }

    pub fn max_lag(&self) -> f64 {
        self.atoms.iter().map(|a| a.lag).fold(0.0, f64::max)
    }

    /// `∫ φ_i(s) μ(ds)`.
    pub fn average(&self, seg: &dyn History, i: usize) -> f64 {
        self.atoms.iter().map(|a| a.weight * seg.lagged(i, a.lag)).sum()
    }

    /// `∫ F(φ(s)) μ(ds)` for a function of the full state vector at one instant.
    pub fn average_with<F: FnMut(&[f64]) -> f64>(&self, seg: &dyn History, buf: &mut Vec<f64>, mut f: F) -> f64 {
        let n = seg.dim();
        let mut acc = 0.0;
        for a in &self.atoms {
            buf.clear();
            buf.extend((0..n).map(|i| seg.lagged(i, a.lag)));
            acc += a.weight * f(buf);
        }
        acc
    }
}
