//! Coefficient functionals of the stochastic functional Kolmogorov system
//!
//! ```text
//! dX_i(t) = X_i(t) F_i(X_t) dt + X_i(t) Σ_j G_ij(X_t) dB_j(t)
//! ```
//!
//! where `X_t` is the segment of the path on `[-r, 0]`. The generic form
//! `g_i(φ) dE_i` with `E = ΓᵀB` is normalized to rows `G_ij = g_i(φ) Γ_ji`;
//! models whose noise does not factor that way (the replicator equation)
//! supply their rows directly.

mod face;
mod kernel;
mod noise;
pub mod zoo;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use face::{Face, MAX_COMPONENTS};
pub use kernel::{DelayAtom, DelayKernel};
pub(crate) use noise::symmetric_eigenvalues;
pub use noise::{min_symmetric_eigenvalue, NoiseSpec};
pub use zoo::{build_zoo_model, ZooParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("noise covariance is not positive definite (smallest eigenvalue {min_eigenvalue})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("negative or non-finite delay lag {0}")]
    NegativeLag(f64),
    #[error("invalid delay kernel: {0}")]
    InvalidKernel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Read access to a segment `φ ∈ C([-r, 0]; R^n)`.
pub trait History {
    fn dim(&self) -> usize;
    /// `φ_i(0)`.
    fn current(&self, i: usize) -> f64;
    /// `φ_i(-lag)` for `lag ∈ [0, r]`.
    fn lagged(&self, i: usize, lag: f64) -> f64;
}

/// Per-capita drift `F(φ) ∈ R^n` and diffusion rows `G(φ) ∈ R^{n×m}`.
pub trait Coefficients: Send + Sync {
    fn drift(&self, seg: &dyn History, out: &mut [f64]);
    /// Row-major `n × m` output.
    fn diffusion(&self, seg: &dyn History, out: &mut [f64]);
    /// Splits `F_i = q_i(φ)/x_i − k_i(φ)` for components with a zero-order
    /// inflow `q_i ≥ 0`. Only components listed by
    /// [`ModelSpec::inflow_components`] are read.
    fn inflow_split(&self, _seg: &dyn History, inflow: &mut [f64], _loss: &mut [f64]) {
        inflow.fill(0.0);
    }
}

/// A history with every component outside `face` read as zero.
pub struct FaceView<'a> {
    inner: &'a dyn History,
    face: Face,
}

impl<'a> FaceView<'a> {
    pub fn new(inner: &'a dyn History, face: Face) -> Self {
        FaceView { inner, face }
    }
}

impl History for FaceView<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn current(&self, i: usize) -> f64 {
        if self.face.contains(i) {
            self.inner.current(i)
        } else {
            0.0
        }
    }

    fn lagged(&self, i: usize, lag: f64) -> f64 {
        if self.face.contains(i) {
            self.inner.lagged(i, lag)
        } else {
            0.0
        }
    }
}

type DriftFn = dyn Fn(&dyn History, &mut [f64]) + Send + Sync;

/// Generic `X_i f_i dt + X_i g_i dE_i` system built from closures.
struct ClosureKolmogorov {
    f: Box<DriftFn>,
    g: Box<DriftFn>,
    gamma: Vec<Vec<f64>>,
}

impl Coefficients for ClosureKolmogorov {
    fn drift(&self, seg: &dyn History, out: &mut [f64]) {
        (self.f)(seg, out);
    }

    fn diffusion(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.gamma.len();
        let mut g = vec![0.0; n];
        (self.g)(seg, &mut g);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = g[i] * self.gamma[j][i];
            }
        }
    }
}

/// An immutable model: coefficient functionals, delay structure and noise.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    species: Vec<String>,
    drivers: usize,
    lags: Vec<f64>,
    noise: NoiseSpec,
    coefficients: Arc<dyn Coefficients>,
    simplex_total: Option<f64>,
    inflow: Face,
    restriction: Face,
    zoo: Option<ZooParams>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("species", &self.species)
            .field("drivers", &self.drivers)
            .field("lags", &self.lags)
            .field("restriction", &self.restriction)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Wraps arbitrary coefficient functionals.
    ///
    /// `lags` lists every lag the functionals read besides `0`. `drivers` is the
    /// number of independent Brownian motions the diffusion rows act on.
    pub fn from_coefficients(
        name: impl Into<String>,
        species: Vec<String>,
        noise: NoiseSpec,
        drivers: usize,
        lags: Vec<f64>,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self, ModelError> {
        let n = species.len();
        if n == 0 || n > MAX_COMPONENTS {
            return Err(ModelError::DimensionMismatch(format!("{n} components")));
        }
        if noise.dim() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "noise is {}-dimensional but the model has {n} components",
                noise.dim()
            )));
        }
        if drivers == 0 {
            return Err(ModelError::DimensionMismatch("no Brownian drivers".into()));
        }
        let mut lags = lags;
        for &l in &lags {
            if !l.is_finite() || l < 0.0 {
                return Err(ModelError::NegativeLag(l));
            }
        }
        lags.push(0.0);
        lags.sort_by(f64::total_cmp);
        lags.dedup();
        Ok(ModelSpec {
            name: name.into(),
            species,
            drivers,
            lags,
            noise,
            coefficients,
            simplex_total: None,
            inflow: Face::empty(),
            restriction: Face::full(n),
            zoo: None,
        })
    }

    /// Generic Kolmogorov system `dX_i = X_i f_i dt + X_i g_i dE_i`, `E = ΓᵀB`.
    ///
    /// `f` and `g` write `n` values each. Positive definiteness of `Σ` is not
    /// required here; audits report it.
    pub fn kolmogorov<F, G>(
        name: impl Into<String>,
        species: Vec<String>,
        noise: NoiseSpec,
        lags: Vec<f64>,
        f: F,
        g: G,
    ) -> Result<Self, ModelError>
    where
        F: Fn(&dyn History, &mut [f64]) + Send + Sync + 'static,
        G: Fn(&dyn History, &mut [f64]) + Send + Sync + 'static,
    {
        let n = species.len();
        let coefficients =
            Arc::new(ClosureKolmogorov { f: Box::new(f), g: Box::new(g), gamma: noise.gamma().to_vec() });
        ModelSpec::from_coefficients(name, species, noise, n, lags, coefficients)
    }

    pub(crate) fn with_simplex(mut self, total: f64) -> Self {
        self.simplex_total = Some(total);
        self
    }

    pub(crate) fn with_inflow(mut self, inflow: Face) -> Self {
        self.inflow = inflow;
        self
    }

    pub(crate) fn with_zoo(mut self, params: ZooParams) -> Self {
        self.zoo = Some(params);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.species.len()
    }

    pub fn drivers(&self) -> usize {
        self.drivers
    }

    pub fn species_names(&self) -> &[String] {
        &self.species
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    /// Distinct lags read by the functionals, ascending, always including 0.
    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    /// The delay span `r`.
    pub fn max_lag(&self) -> f64 {
        self.lags.last().copied().unwrap_or(0.0)
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    /// `Some(X)` for models living on the simplex `Σ x_i = X`.
    pub fn simplex_total(&self) -> Option<f64> {
        self.simplex_total
    }

    /// Components with a positive inflow (not of Kolmogorov form), whose
    /// zero face is not invariant.
    pub fn inflow_components(&self) -> Face {
        self.inflow
    }

    /// The face this model is clamped to (all components unless restricted).
    pub fn restriction(&self) -> Face {
        self.restriction
    }

    pub fn zoo(&self) -> Option<&ZooParams> {
        self.zoo.as_ref()
    }

    fn is_restricted(&self) -> bool {
        self.restriction != Face::full(self.dim())
    }

    pub fn per_capita_drift(&self, seg: &dyn History, out: &mut [f64]) {
        if self.is_restricted() {
            let view = FaceView::new(seg, self.restriction);
            self.coefficients.drift(&view, out);
            for i in self.restriction.complement(self.dim()).indices() {
                out[i] = 0.0;
            }
        } else {
            self.coefficients.drift(seg, out);
        }
    }

    pub fn per_capita_diffusion(&self, seg: &dyn History, out: &mut [f64]) {
        let m = self.drivers;
        if self.is_restricted() {
            let view = FaceView::new(seg, self.restriction);
            self.coefficients.diffusion(&view, out);
            for i in self.restriction.complement(self.dim()).indices() {
                out[i * m..(i + 1) * m].fill(0.0);
            }
        } else {
            self.coefficients.diffusion(seg, out);
        }
    }

    /// Inflow `q` and per-capita loss `k` with `F_i = q_i/x_i − k_i` on
    /// inflow components; other entries are left at 0.
    pub fn inflow_split(&self, seg: &dyn History, inflow: &mut [f64], loss: &mut [f64]) {
        inflow.fill(0.0);
        loss.fill(0.0);
        if self.inflow.intersect(self.restriction).is_empty() {
            return;
        }
        let view = FaceView::new(seg, self.restriction);
        self.coefficients.inflow_split(&view, inflow, loss);
        for i in self.inflow.complement(self.dim()).union(self.restriction.complement(self.dim())).indices() {
            inflow[i] = 0.0;
            loss[i] = 0.0;
        }
    }

    /// Per-capita log-growth integrand `F_i − ½ Σ_j G_ij²` for every component.
    pub fn invasion_integrand(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.dim();
        let m = self.drivers;
        let mut g = vec![0.0; n * m];
        self.per_capita_drift(seg, out);
        self.per_capita_diffusion(seg, &mut g);
        for i in 0..n {
            let q: f64 = g[i * m..(i + 1) * m].iter().map(|v| v * v).sum();
            out[i] -= 0.5 * q;
        }
    }

    /// The same model with any face restriction removed.
    pub fn unrestricted(&self) -> ModelSpec {
        let mut m = self.clone();
        m.restriction = Face::full(self.dim());
        m
    }

    /// Clamps every component outside `face` to zero. Restrictions compose by
    /// intersection, so restricting twice to the same face is a no-op.
    pub fn restrict_to_face(&self, face: Face) -> ModelSpec {
        let mut m = self.clone();
        m.restriction = self.restriction.intersect(face).intersect(Face::full(self.dim()));
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f64>);

    impl History for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn current(&self, i: usize) -> f64 {
            self.0[i]
        }
        fn lagged(&self, i: usize, _lag: f64) -> f64 {
            self.0[i]
        }
    }

    fn linear_model() -> ModelSpec {
        ModelSpec::kolmogorov(
            "linear",
            vec!["x1".into(), "x2".into()],
            NoiseSpec::new(vec![vec![1.0, 0.5], vec![0.0, 2.0]]).unwrap(),
            vec![1.0],
            |seg, out| {
                out[0] = 1.0 - seg.current(0) - seg.lagged(1, 1.0);
                out[1] = 2.0 - seg.current(1) - seg.lagged(0, 1.0);
            },
            |_seg, out| {
                out[0] = 1.0;
                out[1] = 3.0;
            },
        )
        .unwrap()
    }

    #[test]
    fn generic_diffusion_rows_are_g_times_gamma_transpose() {
        let m = linear_model();
        let mut g = vec![0.0; 4];
        m.per_capita_diffusion(&Constant(vec![1.0, 1.0]), &mut g);
        // G_ij = g_i Γ_ji
        assert_eq!(g, vec![1.0 * 1.0, 1.0 * 0.0, 3.0 * 0.5, 3.0 * 2.0]);
        // Σ_j G_ij² = g_i² σ_ii
        let s = m.noise().sigma();
        assert_eq!(g[0] * g[0] + g[1] * g[1], 1.0 * s[0][0]);
        assert_eq!(g[2] * g[2] + g[3] * g[3], 9.0 * s[1][1]);
    }

    #[test]
    fn restriction_zeroes_excluded_rows_and_inputs() {
        let m = linear_model().restrict_to_face(Face::single(0));
        let mut f = vec![0.0; 2];
        m.per_capita_drift(&Constant(vec![0.5, 7.0]), &mut f);
        assert_eq!(f, vec![0.5, 0.0]);
        let again = m.restrict_to_face(Face::single(0));
        let mut f2 = vec![0.0; 2];
        again.per_capita_drift(&Constant(vec![0.5, 7.0]), &mut f2);
        assert_eq!(f, f2);
        assert_eq!(again.restriction(), Face::single(0));
    }

    #[test]
    fn lags_are_sorted_and_include_zero() {
        let m = linear_model();
        assert_eq!(m.lags(), &[0.0, 1.0]);
        assert_eq!(m.max_lag(), 1.0);
    }

    #[test]
    fn rejects_negative_lag() {
        let err = ModelSpec::kolmogorov(
            "bad",
            vec!["x".into()],
            NoiseSpec::identity(1),
            vec![-1.0],
            |_s, o| o[0] = 0.0,
            |_s, o| o[0] = 0.0,
        )
        .unwrap_err();
        assert_eq!(err, ModelError::NegativeLag(-1.0));
    }
}
