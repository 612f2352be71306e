//! Built-in application models with their parameter records.
//!
//! Index 0 is always the first state component. For the chemostat that is the
//! nutrient `S`, for the SIR model the susceptibles `S`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Coefficients, DelayKernel, Face, History, ModelError, ModelSpec, NoiseSpec};

/// Noise given as a mixing matrix `Γ`, a covariance `Σ` (factored by
/// Cholesky) or independent variances. At most one may be set; none means
/// `Γ = I`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
}

impl NoiseInput {
    pub fn variances(v: Vec<f64>) -> Self {
        NoiseInput { variances: Some(v), ..Default::default() }
    }

    pub fn gamma(g: Vec<Vec<f64>>) -> Self {
        NoiseInput { gamma: Some(g), ..Default::default() }
    }

    pub fn covariance(s: Vec<Vec<f64>>) -> Self {
        NoiseInput { covariance: Some(s), ..Default::default() }
    }

    fn is_unset(&self) -> bool {
        self.gamma.is_none() && self.covariance.is_none() && self.variances.is_none()
    }

    pub fn build(&self, n: usize) -> Result<NoiseSpec, ModelError> {
        let set =
            [self.gamma.is_some(), self.covariance.is_some(), self.variances.is_some()].iter().filter(|&&b| b).count();
        if set > 1 {
            return Err(ModelError::InvalidParameter("noise: give only one of gamma, covariance, variances".into()));
        }
        let noise = if let Some(g) = &self.gamma {
            NoiseSpec::new(g.clone())?
        } else if let Some(s) = &self.covariance {
            cholesky_gamma(s)?
        } else if let Some(v) = &self.variances {
            NoiseSpec::diagonal(v)?
        } else {
            NoiseSpec::identity(n)
        };
        if noise.dim() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "noise is {}-dimensional, model has {n} components",
                noise.dim()
            )));
        }
        Ok(noise)
    }
}

/// `Γ` upper triangular with `ΓᵀΓ = Σ`.
fn cholesky_gamma(sigma: &[Vec<f64>]) -> Result<NoiseSpec, ModelError> {
    let n = sigma.len();
    if n == 0 || sigma.iter().any(|r| r.len() != n) {
        return Err(ModelError::DimensionMismatch("covariance must be square".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if sigma[i][j] != sigma[j][i] {
                return Err(ModelError::InvalidParameter("covariance must be symmetric".into()));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| sigma[i][j]);
    let chol = m
        .clone()
        .cholesky()
        .ok_or(ModelError::NotPositiveDefinite { min_eigenvalue: super::min_symmetric_eigenvalue(sigma) })?;
    let l = chol.l();
    NoiseSpec::new((0..n).map(|i| (0..n).map(|j| l[(j, i)]).collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LotkaVolterraParams {
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<DelayKernel>,
    #[serde(default)]
    pub noise: NoiseInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicatorParams {
    /// Population size `X`.
    pub total: f64,
    /// Affine payoffs `f_i(y) = β_i + Σ_k A_ik y_k`: this is `A`.
    pub payoff: Vec<Vec<f64>>,
    /// `β`, zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff_offset: Option<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<DelayKernel>,
}

/// Incidence functions `f(s, s̄, i, ī)` of the SIR model, with `s̄`, `ī` the
/// delayed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Incidence {
    /// `c1 s + c2 s̄`
    Linear { c1: f64, c2: f64 },
    /// `c1 s/(1 + α s) + c2 s̄/(1 + α s̄)`
    Saturated { c1: f64, c2: f64, alpha: f64 },
    /// `c1 s/(1 + α s + β i) + c2 s̄/(1 + α s̄ + β ī)`
    BeddingtonDeAngelis { c1: f64, c2: f64, alpha: f64, beta: f64 },
}

impl Incidence {
    pub fn eval(&self, s: f64, s_lag: f64, i: f64, i_lag: f64) -> f64 {
        match *self {
            Incidence::Linear { c1, c2 } => c1 * s + c2 * s_lag,
            Incidence::Saturated { c1, c2, alpha } => c1 * s / (1.0 + alpha * s) + c2 * s_lag / (1.0 + alpha * s_lag),
            Incidence::BeddingtonDeAngelis { c1, c2, alpha, beta } => {
                c1 * s / (1.0 + alpha * s + beta * i) + c2 * s_lag / (1.0 + alpha * s_lag + beta * i_lag)
            }
        }
    }

    fn validate(&self, what: &str) -> Result<(), ModelError> {
        let (c1, c2, rest): (f64, f64, Vec<f64>) = match *self {
            Incidence::Linear { c1, c2 } => (c1, c2, vec![]),
            Incidence::Saturated { c1, c2, alpha } => (c1, c2, vec![alpha]),
            Incidence::BeddingtonDeAngelis { c1, c2, alpha, beta } => (c1, c2, vec![alpha, beta]),
        };
        if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("{what}: c1, c2 must be positive")));
        }
        if rest.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("{what}: saturation constants must be nonnegative")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirParams {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    /// `f_2`, the per-capita growth of `I` from infection.
    pub infection: Incidence,
    /// `f_1`, the depletion of `S` per infected; equal to `infection` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depletion: Option<Incidence>,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<DelayKernel>,
    #[serde(default)]
    pub noise: NoiseInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Uptake {
    /// `m s/(k + s)`
    Monod { m: f64, k: f64 },
    /// `m s²/(k² + s²)`
    Sigmoid { m: f64, k: f64 },
}

impl Uptake {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Uptake::Monod { m, k } => m * s / (k + s),
            Uptake::Sigmoid { m, k } => m * s * s / (k * k + s * s),
        }
    }

    /// `p(s)/s`, finite at `s = 0` for the Monod form.
    fn per_unit(&self, s: f64) -> f64 {
        match *self {
            Uptake::Monod { m, k } => m / (k + s),
            Uptake::Sigmoid { m, k } => m * s / (k * k + s * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemostatParams {
    pub a: f64,
    pub uptake: Vec<Uptake>,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<DelayKernel>,
    #[serde(default)]
    pub noise: NoiseInput,
}

/// Parameter record of one built-in model, tagged by `"name"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ZooParams {
    CompetitiveLv(LotkaVolterraParams),
    PredatorPrey(LotkaVolterraParams),
    Replicator(ReplicatorParams),
    Sir(SirParams),
    Chemostat(ChemostatParams),
}

impl ZooParams {
    pub fn name(&self) -> &'static str {
        match self {
            ZooParams::CompetitiveLv(_) => "competitive_lv",
            ZooParams::PredatorPrey(_) => "predator_prey",
            ZooParams::Replicator(_) => "replicator",
            ZooParams::Sir(_) => "sir",
            ZooParams::Chemostat(_) => "chemostat",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ZooParams::CompetitiveLv(p) | ZooParams::PredatorPrey(p) => p.a.len(),
            ZooParams::Replicator(p) => p.sigma.len(),
            ZooParams::Sir(_) => 2,
            ZooParams::Chemostat(p) => p.uptake.len() + 1,
        }
    }

    /// Copy with every optional field filled in.
    pub fn materialize(&self) -> ZooParams {
        let mut p = self.clone();
        let n = p.dim();
        fn fill(kernel: &mut Option<DelayKernel>, r: f64) {
            if kernel.is_none() {
                if let Ok(k) = DelayKernel::single(r) {
                    *kernel = Some(k);
                }
            }
        }
        fn fill_noise(noise: &mut NoiseInput, n: usize) {
            if noise.is_unset() {
                *noise = NoiseInput::variances(vec![1.0; n]);
            }
        }
        match &mut p {
            ZooParams::CompetitiveLv(q) | ZooParams::PredatorPrey(q) => {
                fill(&mut q.kernel, q.r);
                fill_noise(&mut q.noise, n);
            }
            ZooParams::Replicator(q) => {
                fill(&mut q.kernel, q.r);
                if q.payoff_offset.is_none() {
                    q.payoff_offset = Some(vec![0.0; n]);
                }
            }
            ZooParams::Sir(q) => {
                fill(&mut q.kernel, q.r);
                fill_noise(&mut q.noise, n);
                if q.depletion.is_none() {
                    q.depletion = Some(q.infection.clone());
                }
            }
            ZooParams::Chemostat(q) => {
                fill(&mut q.kernel, q.r);
                fill_noise(&mut q.noise, n);
            }
        }
        p
    }

    /// Affine structure `F_i = α_i + Σ_j C_ij x_j(0) + Σ_j D_ij x̄_j` with
    /// constant noise, available for the two Lotka–Volterra models.
    pub(crate) fn affine(&self) -> Option<AffineKolmogorov> {
        match self {
            ZooParams::CompetitiveLv(p) => {
                let n = p.a.len();
                Some(AffineKolmogorov {
                    alpha: p.a.clone(),
                    c: (0..n).map(|i| (0..n).map(|j| -p.b[i][j]).collect()).collect(),
                    d: (0..n).map(|i| (0..n).map(|j| -p.b_hat[i][j]).collect()).collect(),
                })
            }
            ZooParams::PredatorPrey(p) => {
                let n = p.a.len();
                let (alpha, c, d) = predator_prey_coefficients(p, n);
                Some(AffineKolmogorov { alpha, c, d })
            }
            _ => None,
        }
    }
}

/// Linear-in-state per-capita drift with constant noise rows.
#[derive(Clone, Debug)]
pub(crate) struct AffineKolmogorov {
    pub alpha: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

fn predator_prey_coefficients(p: &LotkaVolterraParams, n: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let alpha = (0..n).map(|i| if i == 0 { p.a[0] } else { -p.a[i] }).collect();
    let c = (0..n).map(|i| (0..n).map(|j| if i > 0 && j == 0 { p.b[i][0] } else { -p.b[i][j] }).collect()).collect();
    let d = (0..n).map(|i| (0..n).map(|j| -p.b_hat[i][j]).collect()).collect();
    (alpha, c, d)
}

fn check_finite(name: &str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{name} must be finite")))
    }
}

fn check_kernel(kernel: &Option<DelayKernel>, r: f64) -> Result<DelayKernel, ModelError> {
    if !r.is_finite() || r < 0.0 {
        return Err(ModelError::NegativeLag(r));
    }
    match kernel {
        Some(k) => {
            k.validate()?;
            if k.max_lag() > r {
                return Err(ModelError::InvalidKernel(format!("kernel lag {} exceeds r = {r}", k.max_lag())));
            }
            Ok(k.clone())
        }
        None => DelayKernel::single(r),
    }
}

fn kernel_lags(kernel: &DelayKernel, r: f64) -> Vec<f64> {
    let mut lags: Vec<f64> = kernel.atoms().iter().map(|a| a.lag).collect();
    lags.push(r);
    lags
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Constant rows `G_ij = Γ_ji`.
fn constant_rows(noise: &NoiseSpec) -> Vec<f64> {
    let n = noise.dim();
    let g = noise.gamma();
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rows[i * n + j] = g[j][i];
        }
    }
    rows
}

/// Builds the model for a parameter record, validating every parameter.
pub fn build_zoo_model(params: &ZooParams) -> Result<ModelSpec, ModelError> {
    let echo = params.materialize();
    let model = match params {
        ZooParams::CompetitiveLv(p) => build_lv(p, false)?,
        ZooParams::PredatorPrey(p) => build_lv(p, true)?,
        ZooParams::Replicator(p) => build_replicator(p)?,
        ZooParams::Sir(p) => build_sir(p)?,
        ZooParams::Chemostat(p) => build_chemostat(p)?,
    };
    Ok(model.with_zoo(echo))
}

struct AffineCoefficients {
    n: usize,
    alpha: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    kernel: DelayKernel,
    rows: Vec<f64>,
}

impl Coefficients for AffineCoefficients {
    fn drift(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.n;
        let mut lagged = [0.0f64; 8];
        let mut heap;
        let xbar: &mut [f64] = if n <= 8 {
            &mut lagged[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for (j, v) in xbar.iter_mut().enumerate() {
            *v = self.kernel.average(seg, j);
        }
        for i in 0..n {
            let mut acc = self.alpha[i];
            for j in 0..n {
                acc += self.c[i * n + j] * seg.current(j);
                acc += self.d[i * n + j] * xbar[j];
            }
            out[i] = acc;
        }
    }

    fn diffusion(&self, _seg: &dyn History, out: &mut [f64]) {
        out.copy_from_slice(&self.rows);
    }
}

fn build_lv(p: &LotkaVolterraParams, predator_prey: bool) -> Result<ModelSpec, ModelError> {
    let n = p.a.len();
    let kind = if predator_prey { "predator_prey" } else { "competitive_lv" };
    if n == 0 || (predator_prey && n < 2) {
        return Err(ModelError::DimensionMismatch(format!("{kind}: too few species ({n})")));
    }
    for (name, m) in [("b", &p.b), ("b_hat", &p.b_hat)] {
        if m.len() != n || m.iter().any(|row| row.len() != n) {
            return Err(ModelError::DimensionMismatch(format!("{kind}: {name} must be {n}x{n}")));
        }
        for v in m.iter().flatten() {
            check_finite(name, *v)?;
        }
    }
    for &a in &p.a {
        check_finite("a", a)?;
    }
    if !(p.a[0] > 0.0) {
        return Err(ModelError::InvalidParameter(format!("{kind}: a_1 must be positive")));
    }
    if predator_prey && p.a[1..].iter().any(|&a| !(a > 0.0)) {
        return Err(ModelError::InvalidParameter("predator_prey: predator death rates must be positive".into()));
    }
    if !predator_prey && p.a.iter().any(|&a| !(a > 0.0)) {
        return Err(ModelError::InvalidParameter("competitive_lv: growth rates must be positive".into()));
    }
    for i in 0..n {
        if !(p.b[i][i] > 0.0) {
            return Err(ModelError::InvalidParameter(format!("{kind}: b_{0}{0} must be positive", i + 1)));
        }
        for j in 0..n {
            if i != j && p.b[i][j] < 0.0 {
                return Err(ModelError::InvalidParameter(format!("{kind}: b_{}{} must be nonnegative", i + 1, j + 1)));
            }
            if !(p.b_hat[i][j] > -p.b[i][i]) {
                return Err(ModelError::InvalidParameter(format!(
                    "{kind}: b_hat_{}{} must exceed -b_{}{}",
                    i + 1,
                    j + 1,
                    i + 1,
                    i + 1
                )));
            }
        }
    }
    let kernel = check_kernel(&p.kernel, p.r)?;
    let noise = p.noise.build(n)?;
    noise.require_positive_definite()?;
    let (alpha, c, d) = if predator_prey {
        predator_prey_coefficients(p, n)
    } else {
        (
            p.a.clone(),
            p.b.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
            p.b_hat.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
        )
    };
    let coefficients = AffineCoefficients {
        n,
        alpha,
        c: c.into_iter().flatten().collect(),
        d: d.into_iter().flatten().collect(),
        rows: constant_rows(&noise),
        kernel: kernel.clone(),
    };
    ModelSpec::from_coefficients(kind, numbered("x", n), noise, n, kernel_lags(&kernel, p.r), Arc::new(coefficients))
}

struct ReplicatorCoefficients {
    n: usize,
    total: f64,
    payoff: Vec<f64>,
    offset: Vec<f64>,
    sigma: Vec<f64>,
    kernel: DelayKernel,
}

impl ReplicatorCoefficients {
    fn payoffs(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.n;
        let mut acc = self.offset.clone();
        for k in 0..n {
            let y = self.kernel.average(seg, k);
            for (i, a) in acc.iter_mut().enumerate() {
                *a += self.payoff[i * n + k] * y;
            }
        }
        out[..n].copy_from_slice(&acc);
    }
}

impl Coefficients for ReplicatorCoefficients {
    fn drift(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.n;
        self.payoffs(seg, out);
        let mean: f64 = (0..n).map(|j| seg.current(j) * out[j]).sum::<f64>() / self.total;
        for v in out.iter_mut().take(n) {
            *v -= mean;
        }
    }

    fn diffusion(&self, seg: &dyn History, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let own = if i == j { self.sigma[i] } else { 0.0 };
                out[i * n + j] = own - self.sigma[j] * seg.current(j) / self.total;
            }
        }
    }
}

fn build_replicator(p: &ReplicatorParams) -> Result<ModelSpec, ModelError> {
    let n = p.sigma.len();
    if n < 2 {
        return Err(ModelError::DimensionMismatch("replicator: needs at least two strategies".into()));
    }
    if !(p.total > 0.0) || !p.total.is_finite() {
        return Err(ModelError::InvalidParameter("replicator: total must be positive".into()));
    }
    if p.sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(ModelError::InvalidParameter("replicator: sigma_i must be nonnegative".into()));
    }
    if p.payoff.len() != n || p.payoff.iter().any(|r| r.len() != n) {
        return Err(ModelError::DimensionMismatch(format!("replicator: payoff must be {n}x{n}")));
    }
    for v in p.payoff.iter().flatten() {
        check_finite("payoff", *v)?;
    }
    let offset = p.payoff_offset.clone().unwrap_or_else(|| vec![0.0; n]);
    if offset.len() != n {
        return Err(ModelError::DimensionMismatch(format!("replicator: payoff_offset must have {n} entries")));
    }
    for v in &offset {
        check_finite("payoff_offset", *v)?;
    }
    let kernel = check_kernel(&p.kernel, p.r)?;
    let coefficients = ReplicatorCoefficients {
        n,
        total: p.total,
        payoff: p.payoff.iter().flatten().copied().collect(),
        offset,
        sigma: p.sigma.clone(),
        kernel: kernel.clone(),
    };
    Ok(ModelSpec::from_coefficients(
        "replicator",
        numbered("x", n),
        NoiseSpec::identity(n),
        n,
        kernel_lags(&kernel, p.r),
        Arc::new(coefficients),
    )?
    .with_simplex(p.total))
}

struct SirCoefficients {
    a: f64,
    b1: f64,
    b2: f64,
    infection: Incidence,
    depletion: Incidence,
    kernel: DelayKernel,
    rows: Vec<f64>,
}

impl Coefficients for SirCoefficients {
    fn drift(&self, seg: &dyn History, out: &mut [f64]) {
        let s = seg.current(0);
        let i = seg.current(1);
        let s_lag = self.kernel.average(seg, 0);
        let i_lag = self.kernel.average(seg, 1);
        out[0] = if s > 0.0 { (self.a - i * self.depletion.eval(s, s_lag, i, i_lag)) / s - self.b1 } else { 0.0 };
        out[1] = -self.b2 + self.infection.eval(s, s_lag, i, i_lag);
    }

    fn diffusion(&self, _seg: &dyn History, out: &mut [f64]) {
        out.copy_from_slice(&self.rows);
    }

    fn inflow_split(&self, seg: &dyn History, inflow: &mut [f64], loss: &mut [f64]) {
        let s = seg.current(0);
        let i = seg.current(1);
        inflow[0] = self.a;
        loss[0] = if s > 0.0 {
            self.b1 + i * self.depletion.eval(s, self.kernel.average(seg, 0), i, self.kernel.average(seg, 1)) / s
        } else {
            self.b1
        };
    }
}

fn build_sir(p: &SirParams) -> Result<ModelSpec, ModelError> {
    for (name, v) in [("a", p.a), ("b1", p.b1), ("b2", p.b2)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ModelError::InvalidParameter(format!("sir: {name} must be positive")));
        }
    }
    p.infection.validate("sir infection")?;
    let depletion = p.depletion.clone().unwrap_or_else(|| p.infection.clone());
    depletion.validate("sir depletion")?;
    let kernel = check_kernel(&p.kernel, p.r)?;
    let noise = p.noise.build(2)?;
    noise.require_positive_definite()?;
    let coefficients = SirCoefficients {
        a: p.a,
        b1: p.b1,
        b2: p.b2,
        infection: p.infection.clone(),
        depletion,
        rows: constant_rows(&noise),
        kernel: kernel.clone(),
    };
    Ok(ModelSpec::from_coefficients(
        "sir",
        vec!["S".into(), "I".into()],
        noise,
        2,
        kernel_lags(&kernel, p.r),
        Arc::new(coefficients),
    )?
    .with_inflow(Face::single(0)))
}

struct ChemostatCoefficients {
    a: f64,
    uptake: Vec<Uptake>,
    kernel: DelayKernel,
    rows: Vec<f64>,
}

impl Coefficients for ChemostatCoefficients {
    fn drift(&self, seg: &dyn History, out: &mut [f64]) {
        let s = seg.current(0);
        out[0] = if s > 0.0 {
            let consumed: f64 = self.uptake.iter().enumerate().map(|(k, p)| seg.current(k + 1) * p.per_unit(s)).sum();
            (1.0 + self.a * self.kernel.average(seg, 0)) / s - 1.0 - consumed
        } else {
            0.0
        };
        for (k, p) in self.uptake.iter().enumerate() {
            let delayed: f64 = self.kernel.atoms().iter().map(|at| at.weight * p.eval(seg.lagged(0, at.lag))).sum();
            out[k + 1] = delayed - 1.0;
        }
    }

    fn diffusion(&self, _seg: &dyn History, out: &mut [f64]) {
        out.copy_from_slice(&self.rows);
    }

    fn inflow_split(&self, seg: &dyn History, inflow: &mut [f64], loss: &mut [f64]) {
        let s = seg.current(0);
        inflow[0] = 1.0 + self.a * self.kernel.average(seg, 0);
        loss[0] = 1.0 + self.uptake.iter().enumerate().map(|(k, p)| seg.current(k + 1) * p.per_unit(s)).sum::<f64>();
    }
}

fn build_chemostat(p: &ChemostatParams) -> Result<ModelSpec, ModelError> {
    if !(p.a >= 0.0 && p.a < 1.0) {
        return Err(ModelError::InvalidParameter("chemostat: a must lie in [0, 1)".into()));
    }
    if p.uptake.is_empty() {
        return Err(ModelError::DimensionMismatch("chemostat: needs at least one consumer".into()));
    }
    for u in &p.uptake {
        let (Uptake::Monod { m, k } | Uptake::Sigmoid { m, k }) = *u;
        if !(m > 0.0 && k > 0.0 && m.is_finite() && k.is_finite()) {
            return Err(ModelError::InvalidParameter("chemostat: uptake constants must be positive".into()));
        }
    }
    let n = p.uptake.len() + 1;
    let kernel = check_kernel(&p.kernel, p.r)?;
    let noise = p.noise.build(n)?;
    noise.require_positive_definite()?;
    let mut species = vec!["S".to_string()];
    species.extend(numbered("x", n - 1));
    let coefficients =
        ChemostatCoefficients { a: p.a, uptake: p.uptake.clone(), rows: constant_rows(&noise), kernel: kernel.clone() };
    Ok(ModelSpec::from_coefficients("chemostat", species, noise, n, kernel_lags(&kernel, p.r), Arc::new(coefficients))?
        .with_inflow(Face::single(0)))
}
