//! Numerical audits of the standing assumptions and the Lyapunov functional
//! `V_ρ` at sampled segments.
//!
//! A sampled audit can only fail to find a violation; reports say so.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{symmetric_eigenvalues, DelayKernel, Face, History, ModelSpec, ZooParams};
use crate::sdde::{history_points, BrownianStream, Integrator, Segment, SimError};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
    #[error("V is not finite: {0}")]
    NonFiniteV(String),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// `h(x) = constant + coefficient·|x|^exponent`, `|x|` Euclidean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HFunction {
    pub constant: f64,
    #[serde(default)]
    pub coefficient: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    2.0
}

impl HFunction {
    pub fn constant(value: f64) -> Self {
        HFunction { constant: value, coefficient: 0.0, exponent: 1.0 }
    }

    pub fn power(constant: f64, coefficient: f64, exponent: f64) -> Self {
        HFunction { constant, coefficient, exponent }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if self.coefficient == 0.0 {
            return self.constant;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.constant + self.coefficient * norm.powf(self.exponent)
    }
}

/// Data of the growth bound on `Σ|f_i| + Σ g_i²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrowthCertificate {
    /// `Σ|f| + Σg² ≤ K̃ [h(x) + ∫h dμ]`.
    Upper { k_tilde: f64 },
    /// `b₁ h₁(x) ≤ Σ|f| + Σg² ≤ b₂ [h₁(x) + ∫h₁ dμ₁]`.
    TwoSided {
        b1: f64,
        b2: f64,
        h1: HFunction,
        #[serde(default)]
        mu1: Option<DelayKernel>,
    },
}

/// Volatility-control constants; stored and validated only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolatilityCertificate {
    pub p2: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

/// Exponent data of `V_ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovCertificate {
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub p0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionCertificate {
    pub c: Vec<f64>,
    pub gamma_b: f64,
    pub gamma_0: f64,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub m: f64,
    pub h: HFunction,
    /// Defaults to the model's own delay kernel.
    #[serde(default)]
    pub mu: Option<DelayKernel>,
    #[serde(default)]
    pub growth: Option<GrowthCertificate>,
    #[serde(default)]
    pub volatility: Option<VolatilityCertificate>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovCertificate>,
}

fn invalid(msg: impl Into<String>) -> AuditError {
    AuditError::InvalidCertificate(msg.into())
}

/// Kernel used for `∫ h dμ` when a certificate leaves `μ` unset.
pub fn model_kernel(model: &ModelSpec) -> DelayKernel {
    let zoo_kernel = model.zoo().map(|p| p.materialize()).and_then(|p| match p {
        ZooParams::CompetitiveLv(q) | ZooParams::PredatorPrey(q) => q.kernel,
        ZooParams::Replicator(q) => q.kernel,
        ZooParams::Sir(q) => q.kernel,
        ZooParams::Chemostat(q) => q.kernel,
    });
    zoo_kernel.unwrap_or_else(|| DelayKernel::single(model.max_lag()).expect("non-negative lag"))
}

impl AssumptionCertificate {
    pub fn kernel(&self, model: &ModelSpec) -> DelayKernel {
        self.mu.clone().unwrap_or_else(|| model_kernel(model))
    }

    /// Sign and ordering constraints, plus the bounds on `ρ`, `p₀` and `γ`
    /// when Lyapunov data are present.
    pub fn validate(&self, model: &ModelSpec) -> Result<(), AuditError> {
        let n = model.dim();
        if self.c.len() != n {
            return Err(invalid(format!("c has {} entries, model has {n}", self.c.len())));
        }
        if self.c.iter().any(|c| !(*c > 0.0)) {
            return Err(invalid("every c_i must be positive"));
        }
        for (name, v) in
            [("gamma_b", self.gamma_b), ("gamma_0", self.gamma_0), ("a0", self.a0), ("a2", self.a2), ("m", self.m)]
        {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.a1 > self.a2) {
            return Err(invalid("a1 must exceed a2"));
        }
        if !self.h.constant.is_finite() || self.h.coefficient < 0.0 {
            return Err(invalid("h must be finite with a non-negative coefficient"));
        }
        if let Some(mu) = &self.mu {
            mu.validate().map_err(|e| invalid(e.to_string()))?;
            if mu.max_lag() > model.max_lag() {
                return Err(invalid("mu reaches beyond the model's delay"));
            }
        }
        match &self.growth {
            Some(GrowthCertificate::Upper { k_tilde }) if *k_tilde < 0.0 => {
                return Err(invalid("k_tilde must be non-negative"))
            }
            Some(GrowthCertificate::TwoSided { b1, b2, .. }) if !(*b1 > 0.0 && *b2 > 0.0) => {
                return Err(invalid("b1 and b2 must be positive"))
            }
            _ => {}
        }
        if let Some(v) = &self.volatility {
            if !(v.b1 > v.b2 && v.b2 > 0.0) {
                return Err(invalid("volatility constants need b1 > b2 > 0"));
            }
        }
        if let Some(l) = &self.lyapunov {
            let sigma_star = model.noise().sigma_star();
            let bounds = lyapunov_bounds(self.gamma_b, n, sigma_star);
            if l.rho.len() != n {
                return Err(invalid("rho has the wrong length"));
            }
            let norm = l.rho.iter().map(|r| r * r).sum::<f64>().sqrt();
            if !(norm < bounds.rho) {
                return Err(invalid(format!("|rho| = {norm} must be below {}", bounds.rho)));
            }
            if !(l.p0 > 0.0 && l.p0 < bounds.p0) {
                return Err(invalid(format!("p0 must lie in (0, {})", bounds.p0)));
            }
            if !(l.gamma > 0.0 && l.gamma < self.gamma_b) {
                return Err(invalid("gamma must lie in (0, gamma_b)"));
            }
            if !(self.effective_a(model, l.gamma) > 0.0) {
                return Err(invalid("a1 − a2·∫e^{γ·lag}dμ must be positive"));
            }
        }
        Ok(())
    }

    /// `A₁ − A₂ Σ_k w_k e^{γ ℓ_k}`.
    pub fn effective_a(&self, model: &ModelSpec, gamma: f64) -> f64 {
        let mu = self.kernel(model);
        self.a1 - self.a2 * mu.atoms().iter().map(|a| a.weight * (gamma * a.lag).exp()).sum::<f64>()
    }
}

/// Upper bounds on `|ρ|` and `p₀` given `γ_b`, `n` and `σ* = max σ_ij`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovBounds {
    pub rho: f64,
    pub p0: f64,
}

pub fn lyapunov_bounds(gamma_b: f64, n: usize, sigma_star: f64) -> LyapunovBounds {
    let n = n as f64;
    LyapunovBounds {
        rho: (gamma_b / 2.0).min(1.0 / n).min(gamma_b / (4.0 * sigma_star)),
        p0: 1.0f64.min(gamma_b / (8.0 * n * sigma_star)),
    }
}

/// Random piecewise-linear segments in `C_+`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSampler {
    /// Sup-norm radius (Euclidean in the state) of the samples.
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    /// Bound on `|dφ_i/ds|`; unbounded when unset.
    #[serde(default)]
    pub max_slope: Option<f64>,
    #[serde(default = "default_knots")]
    pub knots: usize,
    /// Components outside the face are kept at zero.
    #[serde(default)]
    pub face: Option<Face>,
    /// Lower bound for every component of `φ(0)`.
    #[serde(default)]
    pub floor: Option<f64>,
}

fn default_knots() -> usize {
    8
}

struct Uniform(ChaCha12Rng);

impl Uniform {
    fn next(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl SegmentSampler {
    pub fn new(radius: f64, samples: usize, seed: u64) -> Self {
        SegmentSampler { radius, samples, seed, max_slope: None, knots: default_knots(), face: None, floor: None }
    }

    pub fn with_face(mut self, face: Face) -> Self {
        self.face = Some(face);
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    pub fn with_max_slope(mut self, slope: f64) -> Self {
        self.max_slope = Some(slope);
        self
    }

    fn validate(&self) -> Result<(), AuditError> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(AuditError::InvalidSampler("radius must be positive".into()));
        }
        if self.knots < 1 {
            return Err(AuditError::InvalidSampler("at least one knot".into()));
        }
        if matches!(self.max_slope, Some(s) if !(s >= 0.0)) {
            return Err(AuditError::InvalidSampler("max_slope must be non-negative".into()));
        }
        Ok(())
    }

    /// Grid of the model's simulation step, `r/64`.
    pub fn grid(model: &ModelSpec) -> (usize, f64) {
        let dt = crate::sdde::default_dt(None, model.max_lag());
        (history_points(model.max_lag(), dt), dt)
    }

    pub fn generate(&self, model: &ModelSpec) -> Result<Vec<Segment>, AuditError> {
        self.validate()?;
        let (n_r, dt) = Self::grid(model);
        Ok((0..self.samples).map(|k| self.sample(model, n_r, dt, k as u64)).collect())
    }

    /// The `k`-th sample; each sample has its own ChaCha stream.
    pub fn sample(&self, model: &ModelSpec, n_r: usize, dt: f64, k: u64) -> Segment {
        let n = model.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        let mut u = Uniform(rng);
        let face = self.face.unwrap_or(Face::full(n)).intersect(model.restriction());
        let span = n_r as f64 * dt;
        let knots = if n_r == 0 { 0 } else { self.knots.min(n_r) };
        let radius = self.radius * u.next();
        // knot values per component, oldest first; knot `knots` is s = 0
        let mut values = vec![vec![0.0; knots + 1]; n];
        for row in values.iter_mut() {
            for v in row.iter_mut() {
                *v = radius * u.next();
            }
        }
        if let (Some(slope), true) = (self.max_slope, knots > 0) {
            let step = slope * span / knots as f64;
            for row in values.iter_mut() {
                for j in (0..knots).rev() {
                    let hi = row[j + 1] + step;
                    let lo = (row[j + 1] - step).max(0.0);
                    row[j] = row[j].clamp(lo, hi);
                }
            }
        }
        let mut seg = Segment::from_fn(n, n_r, dt, |i, s| {
            if !face.contains(i) {
                return 0.0;
            }
            if knots == 0 {
                return values[i][0];
            }
            let pos = (s + span) / span * knots as f64;
            let j = (pos.floor() as usize).min(knots - 1);
            let frac = pos - j as f64;
            values[i][j] + frac * (values[i][j + 1] - values[i][j])
        });
        let w = n_r + 1;
        for t in 0..w {
            if let Some(total) = model.simplex_total() {
                let sum: f64 = (0..n).map(|i| seg.values[i * w + t]).sum();
                for i in 0..n {
                    let v = &mut seg.values[i * w + t];
                    *v = if sum > 0.0 {
                        *v * total / sum
                    } else if face.contains(i) {
                        total / face.len() as f64
                    } else {
                        0.0
                    };
                }
                continue;
            }
            let norm = (0..n).map(|i| seg.values[i * w + t].powi(2)).sum::<f64>().sqrt();
            if norm > radius && norm > 0.0 {
                for i in 0..n {
                    seg.values[i * w + t] *= radius / norm;
                }
            }
        }
        if let Some(floor) = self.floor {
            for i in face.indices() {
                let v = &mut seg.values[i * w + n_r];
                *v = v.max(floor);
            }
        }
        seg
    }
}

/// Summary of one sampled audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub assumption: String,
    pub samples: usize,
    pub radius: f64,
    pub violations: usize,
    /// Largest `LHS − RHS` seen; positive means violated.
    pub worst_margin: f64,
    pub worst_index: Option<usize>,
    pub worst_sample: Option<Segment>,
    pub non_finite: Vec<usize>,
    pub summary: String,
}

impl AuditReport {
    fn summarize(&mut self) {
        self.summary = if self.violations == 0 {
            format!("no violation found over {} samples in radius {}", self.samples, self.radius)
        } else {
            format!("{} violations over {} samples in radius {}", self.violations, self.samples, self.radius)
        };
        if !self.non_finite.is_empty() {
            self.summary.push_str(&format!("; {} non-finite samples", self.non_finite.len()));
        }
    }

    fn from_margins(assumption: &str, sampler: &SegmentSampler, segments: &[Segment], margins: &[(f64, bool)]) -> Self {
        let mut r = AuditReport {
            assumption: assumption.to_string(),
            samples: segments.len(),
            radius: sampler.radius,
            violations: 0,
            worst_margin: f64::NEG_INFINITY,
            worst_index: None,
            worst_sample: None,
            non_finite: Vec::new(),
            summary: String::new(),
        };
        for (k, &(m, violated)) in margins.iter().enumerate() {
            if m == f64::NEG_INFINITY {
                continue;
            }
            if m.is_nan() || m == f64::INFINITY {
                r.non_finite.push(k);
                continue;
            }
            if violated {
                r.violations += 1;
            }
            if m > r.worst_margin {
                r.worst_margin = m;
                r.worst_index = Some(k);
            }
        }
        r.worst_sample = r.worst_index.map(|k| segments[k].clone());
        r.summarize();
        r
    }

    /// Associative merge of two reports over disjoint sample sets.
    pub fn merge(&self, other: &AuditReport, offset: usize) -> AuditReport {
        let mut r = self.clone();
        r.samples += other.samples;
        r.radius = r.radius.max(other.radius);
        r.violations += other.violations;
        r.non_finite.extend(other.non_finite.iter().map(|k| k + offset));
        if other.worst_margin > r.worst_margin {
            r.worst_margin = other.worst_margin;
            r.worst_index = other.worst_index.map(|k| k + offset);
            r.worst_sample = other.worst_sample.clone();
        }
        r.summarize();
        r
    }
}

/// Drift, diffusion rows and derived quantities at one segment.
struct Local {
    x: Vec<f64>,
    f: Vec<f64>,
    rows: Vec<f64>,
    m: usize,
}

impl Local {
    fn at(model: &ModelSpec, seg: &dyn History) -> Self {
        let n = model.dim();
        let m = model.drivers();
        let mut f = vec![0.0; n];
        let mut rows = vec![0.0; n * m];
        model.per_capita_drift(seg, &mut f);
        model.per_capita_diffusion(seg, &mut rows);
        Local { x: (0..n).map(|i| seg.current(i)).collect(), f, rows, m }
    }

    /// `g_i² = Σ_j G_ij² / σ_ii`.
    fn g2(&self, model: &ModelSpec, i: usize) -> f64 {
        let s = model.noise().sigma_ii(i);
        let sq: f64 = self.rows[i * self.m..(i + 1) * self.m].iter().map(|g| g * g).sum();
        if s > 0.0 {
            sq / s
        } else {
            sq
        }
    }

    /// `Σ|f_i| + Σ g_i²`.
    fn size(&self, model: &ModelSpec) -> f64 {
        (0..self.x.len()).map(|i| self.f[i].abs() + self.g2(model, i)).sum()
    }
}

fn kernel_mean(mu: &DelayKernel, seg: &dyn History, h: &HFunction) -> f64 {
    let n = seg.dim();
    let mut buf = vec![0.0; n];
    mu.atoms()
        .iter()
        .map(|a| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = seg.lagged(i, a.lag);
            }
            a.weight * h.eval(&buf)
        })
        .sum()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Left side of the drift condition.
pub fn drift_lhs(model: &ModelSpec, cert: &AssumptionCertificate, seg: &dyn History) -> f64 {
    let l = Local::at(model, seg);
    drift_lhs_local(model, cert, &l)
}

fn drift_lhs_local(model: &ModelSpec, cert: &AssumptionCertificate, l: &Local) -> f64 {
    let n = l.x.len();
    let denom = 1.0 + cert.c.iter().zip(&l.x).map(|(c, x)| c * x).sum::<f64>();
    let first: f64 = (0..n).map(|i| cert.c[i] * l.x[i] * l.f[i]).sum::<f64>() / denom;
    let mut quad = 0.0;
    for k in 0..l.m {
        let v: f64 = (0..n).map(|i| cert.c[i] * l.x[i] * l.rows[i * l.m + k]).sum();
        quad += v * v;
    }
    first - 0.5 * quad / (denom * denom) + cert.gamma_b * l.size(model)
}

/// Right side of the drift condition.
pub fn drift_rhs(model: &ModelSpec, cert: &AssumptionCertificate, seg: &dyn History) -> f64 {
    let x: Vec<f64> = (0..seg.dim()).map(|i| seg.current(i)).collect();
    let inside = if norm(&x) < cert.m { cert.a0 } else { 0.0 };
    inside - cert.gamma_0 - cert.a1 * cert.h.eval(&x) + cert.a2 * kernel_mean(&cert.kernel(model), seg, &cert.h)
}

fn violated(lhs: f64, rhs: f64) -> bool {
    lhs - rhs > 1e-12 * (1.0 + lhs.abs() + rhs.abs())
}

fn check_h(cert: &AssumptionCertificate, seg: &Segment) -> bool {
    let w = seg.n_r + 1;
    (0..w).all(|t| {
        let x: Vec<f64> = (0..seg.n).map(|i| seg.values[i * w + t]).collect();
        let v = cert.h.eval(&x);
        v.is_finite() && v >= 1.0
    })
}

/// Evaluates both sides of the drift condition at every sampled segment.
pub fn check_drift_condition(
    model: &ModelSpec,
    cert: &AssumptionCertificate,
    sampler: &SegmentSampler,
) -> Result<AuditReport, AuditError> {
    cert.validate(model)?;
    let segments = sampler.generate(model)?;
    Ok(drift_report(model, cert, sampler, &segments))
}

fn drift_report(
    model: &ModelSpec,
    cert: &AssumptionCertificate,
    sampler: &SegmentSampler,
    segments: &[Segment],
) -> AuditReport {
    let margins: Vec<(f64, bool)> = segments
        .par_iter()
        .map(|seg| {
            if !check_h(cert, seg) {
                return (f64::NAN, false);
            }
            let lhs = drift_lhs(model, cert, seg);
            let rhs = drift_rhs(model, cert, seg);
            (lhs - rhs, violated(lhs, rhs))
        })
        .collect();
    AuditReport::from_margins("drift", sampler, segments, &margins)
}

/// Checks the selected growth bound of the certificate.
pub fn check_growth_condition(
    model: &ModelSpec,
    cert: &AssumptionCertificate,
    sampler: &SegmentSampler,
) -> Result<AuditReport, AuditError> {
    cert.validate(model)?;
    let growth = cert.growth.as_ref().ok_or_else(|| invalid("certificate carries no growth data"))?;
    let segments = sampler.generate(model)?;
    let mu = cert.kernel(model);
    let (id, margins): (&str, Vec<(f64, bool)>) = match growth {
        GrowthCertificate::Upper { k_tilde } => (
            "growth-upper",
            segments
                .par_iter()
                .map(|seg| {
                    let lhs = Local::at(model, seg).size(model);
                    let rhs = k_tilde * (cert.h.eval(&current(seg)) + kernel_mean(&mu, seg, &cert.h));
                    (lhs - rhs, violated(lhs, rhs))
                })
                .collect(),
        ),
        GrowthCertificate::TwoSided { b1, b2, h1, mu1 } => {
            let mu1 = mu1.clone().unwrap_or_else(|| mu.clone());
            (
                "growth-two-sided",
                segments
                    .par_iter()
                    .map(|seg| {
                        let s = Local::at(model, seg).size(model);
                        let x = current(seg);
                        let lower = b1 * h1.eval(&x);
                        let upper = b2 * (h1.eval(&x) + kernel_mean(&mu1, seg, h1));
                        let m = (lower - s).max(s - upper);
                        (m, violated(lower, s) || violated(s, upper))
                    })
                    .collect(),
            )
        }
    };
    Ok(AuditReport::from_margins(id, sampler, &segments, &margins))
}

fn current(seg: &dyn History) -> Vec<f64> {
    (0..seg.dim()).map(|i| seg.current(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub samples: usize,
    /// Smallest eigenvalue of `(g_i g_j σ_ij)` over all samples.
    pub min_eigenvalue: f64,
    pub min_eigenvalue_sample: Option<Segment>,
    /// Samples where that matrix was not positive definite.
    pub violations: usize,
    pub epsilon: f64,
    pub radius: f64,
    /// Largest spectral norm of the inverse of `(x_i x_j σ_ij g_i g_j)` over
    /// samples in the box `x_i ≥ ε`, `‖φ‖ ≤ R`.
    pub max_inverse_norm: f64,
    pub max_inverse_sample: Option<Segment>,
    pub singular: usize,
    pub summary: String,
}

fn diffusion_gram(l: &Local, n: usize, scale: bool) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let v: f64 = (0..l.m).map(|k| l.rows[i * l.m + k] * l.rows[j * l.m + k]).sum();
        if scale {
            v * l.x[i] * l.x[j]
        } else {
            v
        }
    })
}

/// Spectrum of the diffusion matrix over `sampler`, and the inverse bound
/// over the box `D_{ε,R}` sampled with the same seed.
pub fn check_nondegeneracy(
    model: &ModelSpec,
    sampler: &SegmentSampler,
    epsilon: f64,
    radius: f64,
) -> Result<SpectrumReport, AuditError> {
    if !(epsilon > 0.0 && radius > 0.0) {
        return Err(AuditError::InvalidSampler("epsilon and R must be positive".into()));
    }
    let n = model.dim();
    let segments = sampler.generate(model)?;
    let eig: Vec<f64> = segments
        .par_iter()
        .map(|seg| {
            let l = Local::at(model, seg);
            symmetric_eigenvalues(diffusion_gram(&l, n, false)).into_iter().fold(f64::INFINITY, f64::min)
        })
        .collect();
    let tol = 1e-12;
    let violations = eig.iter().filter(|e| !(**e > tol)).count();
    let (kmin, min_eigenvalue) =
        eig.iter()
            .copied()
            .enumerate()
            .fold((None, f64::INFINITY), |(k, m), (j, e)| if e < m { (Some(j), e) } else { (k, m) });
    let mut boxed = sampler.clone();
    boxed.radius = radius;
    boxed.floor = Some(epsilon);
    boxed.face = None;
    let in_box = boxed.generate(model)?;
    let inv: Vec<f64> = in_box
        .par_iter()
        .map(|seg| {
            let l = Local::at(model, seg);
            let lo = symmetric_eigenvalues(diffusion_gram(&l, n, true)).into_iter().fold(f64::INFINITY, f64::min);
            if lo > tol {
                1.0 / lo
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let singular = inv.iter().filter(|v| v.is_infinite()).count();
    let (kinv, max_inverse_norm) =
        inv.iter().copied().enumerate().fold((None, 0.0), |(k, m), (j, v)| if v > m { (Some(j), v) } else { (k, m) });
    let summary = if violations == 0 && singular == 0 {
        format!(
            "no violation found over {} samples in radius {} and {} samples in the box eps {epsilon}, R {radius}",
            segments.len(),
            sampler.radius,
            in_box.len()
        )
    } else {
        format!("{violations} non-positive-definite samples, {singular} singular samples in the box")
    };
    Ok(SpectrumReport {
        samples: segments.len(),
        min_eigenvalue,
        min_eigenvalue_sample: kmin.map(|k| segments[k].clone()),
        violations,
        epsilon,
        radius,
        max_inverse_norm,
        max_inverse_sample: kinv.map(|k| in_box[k].clone()),
        singular,
        summary,
    })
}

/// `Σ_k w_k ∫_{−ℓ_k}^0 e^{γ(u+ℓ_k)} h(φ(u)) du` by the trapezoid rule on the
/// grid of spacing `dt`.
pub fn memory_integral(mu: &DelayKernel, h: &HFunction, gamma: f64, seg: &dyn History, dt: f64) -> f64 {
    let n = seg.dim();
    let mut buf = vec![0.0; n];
    let mut hv = |lag: f64| {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = seg.lagged(i, lag);
        }
        h.eval(&buf)
    };
    let mut total = 0.0;
    for a in mu.atoms() {
        if a.lag <= 0.0 {
            continue;
        }
        let full = (a.lag / dt + 1e-9).floor() as usize;
        let weight = |lag: f64| (gamma * (a.lag - lag)).exp();
        let mut acc = 0.0;
        let mut prev = hv(0.0) * weight(0.0);
        for k in 1..=full {
            let lag = (k as f64 * dt).min(a.lag);
            let cur = hv(lag) * weight(lag);
            acc += 0.5 * (prev + cur) * dt;
            prev = cur;
        }
        let rest = a.lag - full as f64 * dt;
        if rest > 1e-12 * dt {
            let cur = hv(a.lag) * weight(a.lag);
            acc += 0.5 * (prev + cur) * rest;
        }
        total += a.weight * acc;
    }
    total
}

/// `V_ρ(φ) = (1 + cᵀx) Π x_i^{ρ_i} exp{A₂ ∫μ(ds) ∫_s^0 e^{γ(u−s)} h(φ(u)) du}`.
pub fn evaluate_v(model: &ModelSpec, cert: &AssumptionCertificate, seg: &Segment) -> Result<f64, AuditError> {
    let l = cert.lyapunov.as_ref().ok_or_else(|| invalid("certificate carries no Lyapunov data"))?;
    evaluate_v_on(&cert.kernel(model), cert, l, seg, seg.dt)
}

fn evaluate_v_on(
    mu: &DelayKernel,
    cert: &AssumptionCertificate,
    l: &LyapunovCertificate,
    seg: &dyn History,
    dt: f64,
) -> Result<f64, AuditError> {
    let x = current(seg);
    let mut log_prod = 0.0;
    for (i, (&xi, &r)) in x.iter().zip(&l.rho).enumerate() {
        if r == 0.0 {
            continue;
        }
        if xi <= 0.0 {
            if r < 0.0 {
                return Err(AuditError::NonFiniteV(format!("rho_{} < 0 with x_{} = 0", i + 1, i + 1)));
            }
            return Ok(0.0);
        }
        log_prod += r * xi.ln();
    }
    let lin = 1.0 + cert.c.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
    let mem = memory_integral(mu, &cert.h, l.gamma, seg, dt);
    let v = lin * (log_prod + cert.a2 * mem).exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AuditError::NonFiniteV("overflow".into()))
    }
}

/// Options of the one-step generator check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorOptions {
    /// Antithetic pairs of one-step draws.
    pub pairs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub delta: f64,
    /// `(E V^{p₀}(X_Δ) − V^{p₀}(φ))/Δ`.
    pub estimate: f64,
    pub se: f64,
    /// Right side of the generator bound at `φ`.
    pub bound: f64,
    /// `estimate − bound`.
    pub margin: f64,
    /// Allowance for the `O(Δ)` bias of the one-step estimate.
    pub bias_allowance: f64,
    pub holds: bool,
}

/// Right side of the generator bound at `seg`.
pub fn generator_bound(model: &ModelSpec, cert: &AssumptionCertificate, seg: &Segment) -> Result<f64, AuditError> {
    let l = cert.lyapunov.as_ref().ok_or_else(|| invalid("certificate carries no Lyapunov data"))?;
    let mu = cert.kernel(model);
    let v = evaluate_v_on(&mu, cert, l, seg, seg.dt)?.powf(l.p0);
    let loc = Local::at(model, seg);
    let x = current(seg);
    let inside = if norm(&x) < cert.m { cert.a0 } else { 0.0 };
    let a = cert.effective_a(model, l.gamma);
    let mem = memory_integral(&mu, &cert.h, l.gamma, seg, seg.dt);
    Ok(l.p0
        * v
        * (inside
            - cert.gamma_0
            - a * cert.h.eval(&x)
            - cert.a2 * l.gamma * mem
            - 0.5 * cert.gamma_b * loc.size(model)))
}

/// One-step Monte Carlo estimate of `L V^{p₀}(φ)` with `Δ` the segment's grid
/// step, compared with [`generator_bound`].
pub fn check_generator_bound(
    model: &ModelSpec,
    cert: &AssumptionCertificate,
    seg: &Segment,
    options: GeneratorOptions,
) -> Result<GeneratorReport, AuditError> {
    cert.validate(model)?;
    let l = cert.lyapunov.as_ref().ok_or_else(|| invalid("certificate carries no Lyapunov data"))?;
    if options.pairs < 2 {
        return Err(AuditError::InvalidSampler("at least two antithetic pairs".into()));
    }
    let mu = cert.kernel(model);
    let dt = seg.dt;
    let p0 = l.p0;
    let v0 = evaluate_v_on(&mu, cert, l, seg, dt)?.powf(p0);
    let n = model.dim();
    let face = Face::from_indices((0..n).filter(|&i| seg.current(i) > 0.0));
    let m = model.drivers();
    let mut stream = BrownianStream::new(options.seed, 0, m);
    let mut z = vec![0.0; m];
    let mut db = vec![0.0; m];
    let mut diffs = Vec::with_capacity(options.pairs);
    let base = Integrator::new(model, seg, face, dt)?;
    for _ in 0..options.pairs {
        stream.next_normals(&mut z);
        let mut pair = 0.0;
        for sign in [1.0, -1.0] {
            for (d, zk) in db.iter_mut().zip(&z) {
                *d = sign * zk * dt.sqrt();
            }
            let mut it = base.clone();
            it.evaluate()?;
            it.advance(&db)?;
            let next = it.segment();
            pair += 0.5 * evaluate_v_on(&mu, cert, l, &next, dt)?.powf(p0);
        }
        diffs.push((pair - v0) / dt);
    }
    let k = diffs.len() as f64;
    let estimate = diffs.iter().sum::<f64>() / k;
    let se = (diffs.iter().map(|d| (d - estimate).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    let bound = generator_bound(model, cert, seg)?;
    let margin = estimate - bound;
    let bias_allowance = dt * (estimate.abs() + bound.abs());
    Ok(GeneratorReport {
        delta: dt,
        estimate,
        se,
        bound,
        margin,
        bias_allowance,
        holds: margin <= 4.0 * se + bias_allowance,
    })
}

/// Options of the time-`t` moment check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentOptions {
    pub trajectories: usize,
    pub horizon: f64,
    pub checkpoints: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheckpoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub initial_value: f64,
    /// `(A₀/γ₀) sup V^{p₀}` over the sampled segments of the set where the
    /// memory term is at most `A₀` and `|x| ≤ M`.
    pub m_bar: f64,
    pub sup_samples: usize,
    pub checkpoints: Vec<MomentCheckpoint>,
    pub holds: bool,
}

/// Empirical check of `E V^{p₀}(X_t) ≤ V^{p₀}(φ) e^{−γ₀ p₀ t} + M̄` for `ρ ≥ 0`.
pub fn check_moment_bound(
    model: &ModelSpec,
    cert: &AssumptionCertificate,
    initial: &Segment,
    sup_sampler: &SegmentSampler,
    options: &MomentOptions,
) -> Result<MomentReport, AuditError> {
    cert.validate(model)?;
    let l = cert.lyapunov.as_ref().ok_or_else(|| invalid("certificate carries no Lyapunov data"))?;
    if l.rho.iter().any(|r| *r < 0.0) {
        return Err(invalid("the moment bound needs rho ≥ 0"));
    }
    if options.trajectories < 2 || options.checkpoints == 0 || !(options.horizon > 0.0) {
        return Err(AuditError::InvalidSampler("need ≥ 2 trajectories, ≥ 1 checkpoint and a positive horizon".into()));
    }
    let mu = cert.kernel(model);
    let p0 = l.p0;
    let dt = initial.dt;
    let v0 = evaluate_v_on(&mu, cert, l, initial, dt)?.powf(p0);
    let mut sup: f64 = 0.0;
    let mut count = 0;
    for seg in sup_sampler.generate(model)? {
        let mem = memory_integral(&mu, &cert.h, l.gamma, &seg, seg.dt);
        if cert.a2 * l.gamma * mem <= cert.a0 && norm(&current(&seg)) <= cert.m {
            sup = sup.max(evaluate_v_on(&mu, cert, l, &seg, seg.dt)?.powf(p0));
            count += 1;
        }
    }
    let m_bar = cert.a0 / cert.gamma_0 * sup;
    let total_steps = (options.horizon / dt).round().max(1.0) as u64;
    let every = (total_steps / options.checkpoints as u64).max(1);
    let face = Face::from_indices((0..model.dim()).filter(|&i| initial.current(i) > 0.0));
    let runs: Vec<Result<Vec<f64>, AuditError>> = (0..options.trajectories as u64)
        .into_par_iter()
        .map(|k| {
            let mut it = Integrator::new(model, initial, face, dt)?;
            let mut noise = BrownianStream::new(options.seed, k, model.drivers());
            let mut out = Vec::new();
            for c in 1..=options.checkpoints as u64 {
                let target = (c * every).min(total_steps);
                let todo = target - it.step_index();
                it.run(todo, &mut noise, &mut ())?;
                out.push(evaluate_v_on(&mu, cert, l, it.history(), dt)?.powf(p0));
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::new();
    for r in runs {
        values.push(r?);
    }
    let k = values.len() as f64;
    let mut checkpoints = Vec::new();
    for c in 0..options.checkpoints {
        let t = ((c as u64 + 1) * every).min(total_steps) as f64 * dt;
        let col: Vec<f64> = values.iter().map(|v| v[c]).collect();
        let mean = col.iter().sum::<f64>() / k;
        let se = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        let bound = v0 * (-cert.gamma_0 * p0 * t).exp() + m_bar;
        checkpoints.push(MomentCheckpoint { t, mean, se, bound, holds: mean <= bound + 4.0 * se });
    }
    let holds = checkpoints.iter().all(|c| c.holds);
    Ok(MomentReport { initial_value: v0, m_bar, sup_samples: count, checkpoints, holds })
}

/// Settings of the coarse certificate search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOptions {
    /// Samples used by the search; an audit should use a different seed.
    pub sampler: SegmentSampler,
    #[serde(default = "search_defaults::gamma_b")]
    pub gamma_b: Vec<f64>,
    #[serde(default = "search_defaults::a1")]
    pub a1: Vec<f64>,
    /// `A₂ = ratio · A₁`.
    #[serde(default = "search_defaults::a2_ratio")]
    pub a2_ratio: Vec<f64>,
    /// Coefficient `κ` of `h(x) = 1 + κ|x|`.
    #[serde(default = "search_defaults::h_coefficient")]
    pub h_coefficient: Vec<f64>,
    /// Weights `s` with `c = (1, s, …, s)`.
    #[serde(default = "search_defaults::c_scale")]
    pub c_scale: Vec<f64>,
    #[serde(default = "search_defaults::gamma_0")]
    pub gamma_0: f64,
    /// Multiplicative safety factor on the fitted `A₀` and `M`.
    #[serde(default = "search_defaults::safety")]
    pub safety: f64,
}

mod search_defaults {
    pub fn gamma_b() -> Vec<f64> {
        vec![1e-3, 1e-2, 5e-2]
    }
    pub fn a1() -> Vec<f64> {
        vec![0.01, 0.05, 0.2, 1.0]
    }
    pub fn a2_ratio() -> Vec<f64> {
        vec![0.25, 0.5, 0.75]
    }
    pub fn h_coefficient() -> Vec<f64> {
        vec![0.1, 0.5, 1.0]
    }
    pub fn c_scale() -> Vec<f64> {
        vec![1.0, 0.5, 0.25, 0.1]
    }
    pub fn gamma_0() -> f64 {
        0.01
    }
    pub fn safety() -> f64 {
        1.5
    }
}

impl SearchOptions {
    pub fn new(sampler: SegmentSampler) -> Self {
        SearchOptions {
            sampler,
            gamma_b: search_defaults::gamma_b(),
            a1: search_defaults::a1(),
            a2_ratio: search_defaults::a2_ratio(),
            h_coefficient: search_defaults::h_coefficient(),
            c_scale: search_defaults::c_scale(),
            gamma_0: search_defaults::gamma_0(),
            safety: search_defaults::safety(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSearch {
    pub certificate: AssumptionCertificate,
    pub candidates: usize,
    pub feasible: usize,
    /// Largest `|x|` of a search sample needing the `A₀` indicator.
    pub support_radius: f64,
    pub note: String,
}

/// Linear segments from a past state to a current state over a grid of
/// magnitudes along the axes and the diagonal.
pub fn stress_segments(model: &ModelSpec, radius: f64) -> Vec<Segment> {
    let n = model.dim();
    let (n_r, dt) = SegmentSampler::grid(model);
    let span = n_r as f64 * dt;
    let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    dirs.push(vec![1.0 / (n as f64).sqrt(); n]);
    let levels: Vec<f64> =
        [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0].into_iter().filter(|l| *l <= radius).collect();
    let mut out = Vec::new();
    let points: Vec<Vec<f64>> =
        dirs.iter().flat_map(|d| levels.iter().map(move |l| d.iter().map(|v| v * l).collect::<Vec<f64>>())).collect();
    for now in &points {
        for past in &points {
            let mut seg = Segment::from_fn(n, n_r, dt, |i, s| {
                if span == 0.0 {
                    now[i]
                } else {
                    let w = (s + span) / span;
                    past[i] + w * (now[i] - past[i])
                }
            });
            if let Some(total) = model.simplex_total() {
                let w = n_r + 1;
                for t in 0..w {
                    let sum: f64 = (0..n).map(|i| seg.values[i * w + t]).sum();
                    for i in 0..n {
                        let v = &mut seg.values[i * w + t];
                        *v = if sum > 0.0 { *v * total / sum } else { total / n as f64 };
                    }
                }
            }
            out.push(seg);
        }
    }
    out
}

/// Coarse grid search over `(c, γ_b, A₁, A₂, κ)` with `h(x) = 1 + κ|x|`.
///
/// For each candidate the residual `q = LHS + γ₀ + A₁h − A₂∫h dμ` is computed
/// on the search samples; `M` must cover every sample with `q > 0` within
/// half the search radius, and `A₀` covers the largest such `q`. Among
/// feasible candidates the largest `γ_b`, then the smallest `M`, wins.
pub fn search_certificate(model: &ModelSpec, options: &SearchOptions) -> Result<CertificateSearch, AuditError> {
    match model.zoo() {
        Some(ZooParams::CompetitiveLv(_) | ZooParams::PredatorPrey(_) | ZooParams::Replicator(_)) => {}
        Some(_) => {
            return Err(AuditError::Unsupported(
                "certificate search needs bounded per-capita rates near the boundary; nutrient models are excluded"
                    .into(),
            ))
        }
        None => return Err(AuditError::Unsupported("certificate search covers zoo models only".into())),
    }
    let n = model.dim();
    let mut segments = options.sampler.generate(model)?;
    segments.extend(stress_segments(model, options.sampler.radius));
    let mu = model_kernel(model);
    let locals: Vec<Local> = segments.iter().map(|s| Local::at(model, s)).collect();
    let half = 0.5 * options.sampler.radius;
    let mut best: Option<(AssumptionCertificate, f64)> = None;
    let mut candidates = 0;
    let mut feasible = 0;
    for &s in &options.c_scale {
        let c: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { s }).collect();
        for &gb in &options.gamma_b {
            for &a1 in &options.a1 {
                for &ratio in &options.a2_ratio {
                    for &kappa in &options.h_coefficient {
                        candidates += 1;
                        let mut cert = AssumptionCertificate {
                            c: c.clone(),
                            gamma_b: gb,
                            gamma_0: options.gamma_0,
                            a0: 1.0,
                            a1,
                            a2: ratio * a1,
                            m: 1.0,
                            h: HFunction::power(1.0, kappa, 1.0),
                            mu: Some(mu.clone()),
                            growth: None,
                            volatility: None,
                            lyapunov: None,
                        };
                        let mut support: f64 = 0.0;
                        let mut need: f64 = 0.0;
                        for (seg, loc) in segments.iter().zip(&locals) {
                            let q = drift_lhs_local(model, &cert, loc) + cert.gamma_0 + cert.a1 * cert.h.eval(&loc.x)
                                - cert.a2 * kernel_mean(&mu, seg, &cert.h);
                            if q > 0.0 {
                                support = support.max(norm(&loc.x));
                                need = need.max(q);
                            }
                        }
                        if model.simplex_total().is_none() && support > half {
                            continue;
                        }
                        feasible += 1;
                        cert.m = options.safety * support + 1.0;
                        cert.a0 = options.safety * need + 0.1;
                        let better = match &best {
                            None => true,
                            Some((b, bs)) => gb > b.gamma_b || (gb == b.gamma_b && support < *bs),
                        };
                        if better {
                            best = Some((cert, support));
                        }
                    }
                }
            }
        }
    }
    let (certificate, support_radius) =
        best.ok_or_else(|| AuditError::Unsupported(format!("no feasible certificate among {candidates} candidates")))?;
    Ok(CertificateSearch {
        certificate,
        candidates,
        feasible,
        support_radius,
        note: format!(
            "best-effort certificate fitted on {} samples in radius {}",
            segments.len(),
            options.sampler.radius
        ),
    })
}
