//! Invasion rates `λ_i(π)` of a species against the ergodic measure of a face.
//!
//! `λ_i(π) = ∫ (F_i − ½ Σ_j G_ij²) dπ`. The primary estimator averages the
//! integrand along a face-restricted run; a Lyapunov-exponent estimator that
//! injects a small invader serves as a cross-check. Closed forms are
//! available for the Lotka–Volterra, SIR and replicator zoo models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::detect_absorbed_face;
use crate::measures::{simulate_with_stats, OccupationStats};
use crate::model::zoo::{AffineKolmogorov, Incidence, ReplicatorParams};
use crate::model::{Face, History, ModelSpec, ZooParams};
use crate::sdde::{BrownianStream, Integrator, Segment, SimConfig, SimError, StepObserver, StepSample};

/// Occupancy threshold used when checking that a face run stayed on its face.
pub const FACE_OCCUPANCY_THRESHOLD: f64 = 0.95;

/// Replicate-dispersion ratio above which multiple ergodic measures are suspected.
pub const DISPERSION_RATIO: f64 = 4.0;

pub const DEFAULT_INVADER_CAP: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TimeAverage,
    ClosedForm,
    LyapunovExponent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvasionFlags {
    /// Some face run was absorbed into a sub-face or never settled.
    pub wrong_ergodic_measure: bool,
    /// Replicate means disagree far beyond their batch SE.
    pub suspected_multiple_measures: bool,
    /// The injected invader grew past the cap.
    pub cap_exceeded: bool,
    /// Fewer than the minimum number of batches.
    pub se_unavailable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvasionEstimate {
    pub face: Face,
    pub face_label: String,
    pub species: usize,
    pub species_name: String,
    pub lambda: f64,
    pub se: Option<f64>,
    pub method: Method,
    pub replicates: usize,
    pub aborted: usize,
    pub horizon: f64,
    pub flags: InvasionFlags,
    /// Per-replicate estimates (reported instead of a pooled value when the
    /// face may carry several ergodic measures).
    pub per_replicate: Vec<f64>,
}

impl InvasionEstimate {
    /// Combined SE of two independent estimates.
    pub fn combined_se(&self, other: &InvasionEstimate) -> Option<f64> {
        Some((self.se?.powi(2) + other.se?.powi(2)).sqrt())
    }

    /// Sign decided at `k` standard errors: `None` when the interval holds 0.
    pub fn sign(&self, k: f64) -> Option<f64> {
        let se = self.se?;
        if self.lambda.abs() > k * se {
            Some(self.lambda.signum())
        } else {
            None
        }
    }
}

#[derive(Debug, Error)]
pub enum InvasionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("every replicate aborted ({0} runs)")]
    AllAborted(usize),
    #[error("species index {0} out of range")]
    InvalidSpecies(usize),
}

/// A positive constant segment on `face`: 1 per component, or the uniform
/// point of the simplex.
pub fn default_initial(model: &ModelSpec, face: Face, dt: f64) -> Segment {
    let n = model.dim();
    let n_r = crate::sdde::history_points(model.max_lag(), dt);
    let face = face.intersect(model.restriction());
    let level = match model.simplex_total() {
        Some(total) if !face.is_empty() => total / face.len() as f64,
        _ => 1.0,
    };
    let x: Vec<f64> = (0..n).map(|i| if face.contains(i) { level } else { 0.0 }).collect();
    Segment::constant(&x, n_r, dt)
}

fn label(model: &ModelSpec, face: Face) -> String {
    face.label(model.species_names())
}

fn check_species(model: &ModelSpec, species: usize) -> Result<(), InvasionError> {
    if species >= model.dim() {
        Err(InvasionError::InvalidSpecies(species))
    } else {
        Ok(())
    }
}

/// Time-average estimator started from [`default_initial`].
pub fn estimate_lambda(
    model: &ModelSpec,
    face: Face,
    species: usize,
    config: &SimConfig,
) -> Result<InvasionEstimate, InvasionError> {
    let init = default_initial(model, face, config.resolved_dt(model));
    estimate_lambda_from(model, &init, face, species, config)
}

pub fn estimate_lambda_from(
    model: &ModelSpec,
    initial: &dyn History,
    face: Face,
    species: usize,
    config: &SimConfig,
) -> Result<InvasionEstimate, InvasionError> {
    check_species(model, species)?;
    config.validate(model)?;
    let dt = config.resolved_dt(model);
    let initial = Segment::sample(initial, crate::sdde::history_points(model.max_lag(), dt), dt);
    let initial = &initial;
    let runs: Vec<Result<(crate::sdde::Trajectory, OccupationStats), SimError>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|k| simulate_with_stats(model, initial, config, face, k))
        .collect();
    let mut stats = Vec::new();
    let mut aborted = 0;
    let mut flags = InvasionFlags::default();
    let face = face.intersect(model.restriction());
    for run in runs {
        match run {
            Ok((traj, s)) => {
                if detect_absorbed_face(&traj, config.extinction_floor, FACE_OCCUPANCY_THRESHOLD) != Some(face) {
                    flags.wrong_ergodic_measure = true;
                }
                stats.push(s);
            }
            Err(SimError::Divergence { .. } | SimError::NonFinite { .. }) => aborted += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let Some(pooled) = OccupationStats::merged(&stats) else {
        return Err(InvasionError::AllAborted(aborted));
    };
    let per_replicate: Vec<f64> = stats.iter().map(|s| s.mean_integrand(species).mean).collect();
    let est = pooled.mean_integrand(species);
    flags.se_unavailable = est.se.is_none();
    if stats.len() >= 2 {
        let per_run_batches = stats[0].batches.len();
        if let Some(ratio) = pooled.group_dispersion(species, per_run_batches) {
            flags.suspected_multiple_measures = ratio > DISPERSION_RATIO;
        }
    }
    Ok(InvasionEstimate {
        face,
        face_label: label(model, face),
        species,
        species_name: model.species_names()[species].clone(),
        lambda: est.mean,
        se: est.se,
        method: Method::TimeAverage,
        replicates: stats.len(),
        aborted,
        horizon: config.horizon,
        flags,
        per_replicate,
    })
}

/// Closed form wrapped as an estimate with zero SE.
pub fn closed_form_estimate(model: &ModelSpec, face: Face, species: usize, horizon: f64) -> Option<InvasionEstimate> {
    let lambda = closed_form_lambda(model, face, species)?;
    Some(InvasionEstimate {
        face,
        face_label: label(model, face),
        species,
        species_name: model.species_names().get(species)?.clone(),
        lambda,
        se: Some(0.0),
        method: Method::ClosedForm,
        replicates: 0,
        aborted: 0,
        horizon,
        flags: InvasionFlags::default(),
        per_replicate: Vec::new(),
    })
}

/// Exact `λ_i(π_face)` where the zoo model admits one, `None` otherwise
/// (including faces that carry no ergodic measure).
pub fn closed_form_lambda(model: &ModelSpec, face: Face, species: usize) -> Option<f64> {
    let params = model.zoo()?;
    let n = model.dim();
    if species >= n || !face.is_subset_of(Face::full(n)) {
        return None;
    }
    let sigma = model.noise().sigma();
    match params {
        ZooParams::CompetitiveLv(_) | ZooParams::PredatorPrey(_) => {
            let aff = params.affine()?;
            let s: Vec<f64> = (0..n).map(|i| sigma[i][i]).collect();
            affine_lambda(&aff, &s, face, species)
        }
        ZooParams::Sir(p) => sir_lambda(p.a, p.b1, p.b2, &p.infection, sigma[1][1], face, species),
        ZooParams::Replicator(p) => replicator_lambda(p, face, species),
        ZooParams::Chemostat(_) => None,
    }
}

/// Mean state `m_J` on face `J` from the stationary identities
/// `α_k − σ_kk/2 + Σ_{j∈J} (C_kj + D_kj) m_j = 0`, `k ∈ J`.
fn affine_face_mean(aff: &AffineKolmogorov, s: &[f64], face: Face) -> Option<Vec<f64>> {
    let idx: Vec<usize> = face.indices().collect();
    let k = idx.len();
    let n = s.len();
    let mut m = vec![0.0; n];
    if k == 0 {
        return Some(m);
    }
    let a = nalgebra::DMatrix::from_fn(k, k, |r, c| aff.c[idx[r]][idx[c]] + aff.d[idx[r]][idx[c]]);
    let b = nalgebra::DVector::from_fn(k, |r, _| -(aff.alpha[idx[r]] - 0.5 * s[idx[r]]));
    let sol = a.lu().solve(&b)?;
    for (r, &i) in idx.iter().enumerate() {
        if !(sol[r] > 0.0) || !sol[r].is_finite() {
            return None;
        }
        m[i] = sol[r];
    }
    Some(m)
}

fn affine_rate(aff: &AffineKolmogorov, s: &[f64], m: &[f64], i: usize) -> f64 {
    let mut v = aff.alpha[i] - 0.5 * s[i];
    for (j, &mj) in m.iter().enumerate() {
        if mj != 0.0 {
            v += (aff.c[i][j] + aff.d[i][j]) * mj;
        }
    }
    v
}

/// A face carries an interior ergodic measure when every ergodic measure on
/// its boundary is invaded by some species of the face.
fn affine_exists(aff: &AffineKolmogorov, s: &[f64], face: Face) -> Option<Vec<f64>> {
    let m = affine_face_mean(aff, s, face)?;
    for sub in Face::all_subsets(s.len()) {
        if sub == face || !sub.is_subset_of(face) {
            continue;
        }
        let Some(ms) = affine_exists(aff, s, sub) else { continue };
        let invaded = face.intersect(sub.complement(s.len())).indices().any(|k| affine_rate(aff, s, &ms, k) > 0.0);
        if !invaded {
            return None;
        }
    }
    Some(m)
}

fn affine_lambda(aff: &AffineKolmogorov, s: &[f64], face: Face, species: usize) -> Option<f64> {
    let m = affine_exists(aff, s, face)?;
    if face.contains(species) {
        return Some(0.0);
    }
    Some(affine_rate(aff, s, &m, species))
}

fn sir_lambda(
    a: f64,
    b1: f64,
    b2: f64,
    infection: &Incidence,
    sigma22: f64,
    face: Face,
    species: usize,
) -> Option<f64> {
    let s_face = Face::single(0);
    let base = -b2 - 0.5 * sigma22;
    if face.is_empty() {
        return (species == 1).then_some(base);
    }
    let Incidence::Linear { c1, c2 } = *infection else {
        return None;
    };
    let endemic = base + a * (c1 + c2) / b1;
    if face == s_face {
        return Some(if species == 0 { 0.0 } else { endemic });
    }
    if face == Face::full(2) && endemic > 0.0 {
        return Some(0.0);
    }
    None
}

fn replicator_payoff(p: &ReplicatorParams, i: usize, y: &[f64]) -> f64 {
    let beta = p.payoff_offset.as_ref().map_or(0.0, |b| b[i]);
    beta + p.payoff[i].iter().zip(y).map(|(a, v)| a * v).sum::<f64>()
}

/// `λ_i(δ_k) = f_i(X e_k) − f_k(X e_k) − (σ_k² + σ_i²)/2`.
pub(crate) fn replicator_vertex(p: &ReplicatorParams, k: usize, i: usize) -> f64 {
    let n = p.sigma.len();
    let mut y = vec![0.0; n];
    y[k] = p.total;
    replicator_payoff(p, i, &y) - replicator_payoff(p, k, &y) - 0.5 * (p.sigma[k].powi(2) + p.sigma[i].powi(2))
}

/// `u = E[x_j]/X` on the edge `{j, l}` from `λ_j = λ_l`, when both vertices
/// are invaded along the edge.
fn replicator_edge_share(p: &ReplicatorParams, j: usize, l: usize) -> Option<f64> {
    if !(replicator_vertex(p, l, j) > 0.0 && replicator_vertex(p, j, l) > 0.0) {
        return None;
    }
    let x = p.total;
    let beta = |i: usize| p.payoff_offset.as_ref().map_or(0.0, |b| b[i]);
    let a = &p.payoff;
    let s2 = p.sigma[j].powi(2) + p.sigma[l].powi(2);
    let d0 = beta(j) - beta(l) + x * (a[j][l] - a[l][l]) - 0.5 * s2;
    let d1 = x * ((a[j][j] - a[l][j]) - (a[j][l] - a[l][l])) + s2;
    if d1 == 0.0 {
        return None;
    }
    let u = -d0 / d1;
    (u > 0.0 && u < 1.0).then_some(u)
}

fn replicator_lambda(p: &ReplicatorParams, face: Face, species: usize) -> Option<f64> {
    let n = p.sigma.len();
    let idx: Vec<usize> = face.indices().collect();
    match idx.len() {
        1 => {
            let k = idx[0];
            Some(if species == k { 0.0 } else { replicator_vertex(p, k, species) })
        }
        2 => {
            let (j, l) = (idx[0], idx[1]);
            let u = replicator_edge_share(p, j, l)?;
            if face.contains(species) {
                return Some(0.0);
            }
            let mut y = vec![0.0; n];
            y[j] = u * p.total;
            y[l] = (1.0 - u) * p.total;
            let i = species;
            Some(
                replicator_payoff(p, i, &y)
                    - replicator_payoff(p, j, &y)
                    - 0.5 * p.sigma[i].powi(2)
                    - 0.5 * p.sigma[j].powi(2) * (2.0 * u - 1.0),
            )
        }
        _ => None,
    }
}

/// Options of the Lyapunov-exponent cross-check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovOptions {
    /// Initial invader level `ε₀`.
    pub invader_scale: f64,
    /// Macroscopic level the invader must stay below.
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_INVADER_CAP
}

impl LyapunovOptions {
    pub fn new(invader_scale: f64) -> Self {
        LyapunovOptions { invader_scale, cap: DEFAULT_INVADER_CAP }
    }
}

struct MaxLog {
    species: usize,
    max: f64,
}

impl StepObserver for MaxLog {
    fn observe(&mut self, s: &StepSample<'_>) {
        self.max = self.max.max(s.log_x[self.species]);
    }
}

/// `(ln X_i(T) − ln ε₀)/T` with the invader injected at `ε₀` after a warm-up
/// of `burn_in · T` on the face; the full system (face plus invader) is
/// simulated so the invader's feedback is retained.
pub fn lyapunov_exponent(
    model: &ModelSpec,
    face: Face,
    species: usize,
    config: &SimConfig,
    options: LyapunovOptions,
) -> Result<InvasionEstimate, InvasionError> {
    check_species(model, species)?;
    config.validate(model)?;
    if !(options.invader_scale > 0.0) {
        return Err(SimError::InvalidConfig("invader_scale must be positive".into()).into());
    }
    let dt = config.resolved_dt(model);
    let face = face.intersect(model.restriction());
    let steps = config.steps(model);
    let warm = config.burn_in_steps(model);
    let ln_eps = options.invader_scale.ln();
    let ln_cap = options.cap.ln();
    let init = default_initial(model, face, dt);
    let runs: Vec<Result<(f64, bool), SimError>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|k| {
            let mut it = Integrator::new(model, &init, face, dt)?.with_log_ceiling(config.log_ceiling);
            let mut noise = BrownianStream::new(config.seed, 2 * k, model.drivers());
            it.run(warm, &mut noise, &mut ())?;
            let mut seg = it.segment();
            let w = seg.n_r + 1;
            for v in &mut seg.values[species * w..(species + 1) * w] {
                *v = options.invader_scale;
            }
            let mut full = Integrator::new(model, &seg, face.with(species), dt)?.with_log_ceiling(config.log_ceiling);
            let mut noise = BrownianStream::new(config.seed, 2 * k + 1, model.drivers());
            let mut obs = MaxLog { species, max: ln_eps };
            full.run(steps, &mut noise, &mut obs)?;
            let last = full.log_state()[species];
            let exceeded = obs.max.max(last) > ln_cap;
            Ok(((last - ln_eps) / (steps as f64 * dt), exceeded))
        })
        .collect();
    let mut values = Vec::new();
    let mut aborted = 0;
    let mut flags = InvasionFlags::default();
    for r in runs {
        match r {
            Ok((v, exceeded)) => {
                values.push(v);
                flags.cap_exceeded |= exceeded;
            }
            Err(SimError::Divergence { .. } | SimError::NonFinite { .. }) => aborted += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if values.is_empty() {
        return Err(InvasionError::AllAborted(aborted));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let se = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        Some((var / k).sqrt())
    } else {
        None
    };
    flags.se_unavailable = se.is_none();
    Ok(InvasionEstimate {
        face,
        face_label: label(model, face),
        species,
        species_name: model.species_names()[species].clone(),
        lambda: mean,
        se,
        method: Method::LyapunovExponent,
        replicates: values.len(),
        aborted,
        horizon: config.horizon,
        flags,
        per_replicate: values,
    })
}
