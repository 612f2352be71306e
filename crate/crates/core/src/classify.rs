//! Regime classification from the signs of invasion rates, and Monte Carlo
//! basin probabilities of the extinction faces.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invasion::{
    closed_form_estimate, closed_form_lambda, estimate_lambda, InvasionError, InvasionEstimate, InvasionFlags, Method,
};
use crate::model::{Face, History, ModelSpec, ZooParams};
use crate::sdde::{integrate, Segment, SimConfig, SimError, Trajectory};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Sign decisions need `|λ̂| > SIGN_Z · SE`.
pub const SIGN_Z: f64 = 4.0;

/// Unassigned fraction above which the horizon is flagged as too short.
pub const UNASSIGNED_LIMIT: f64 = 0.2;

/// The face a run settled on: `Some(I)` when every component in `I` persists
/// and every other component is extinct, `None` when some component is
/// ambiguous.
///
/// Component `i` is extinct when `ln X_i(T) < eps_log` and more than
/// `threshold` of the final half has `ln X_i < eps_log/2`; it persists when
/// `ln X_i(T) ≥ eps_log` and at most `1 − threshold` of the final half is
/// below `eps_log/2`.
pub fn detect_absorbed_face(trajectory: &Trajectory, eps_log: f64, threshold: f64) -> Option<Face> {
    let n = trajectory.final_log_state.len();
    let half = trajectory.final_half();
    let count = half.len().max(1) as f64;
    let mut face = Face::empty();
    for i in 0..n {
        let last = trajectory.final_log_state[i];
        let low = trajectory.log_states[half.clone()].iter().filter(|l| l[i] < 0.5 * eps_log).count() as f64 / count;
        if last < eps_log && low > threshold {
            continue;
        }
        if last >= eps_log && low <= 1.0 - threshold {
            face = face.with(i);
            continue;
        }
        return None;
    }
    Some(face)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Invasion(#[from] InvasionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("model {0} has no regime classification")]
    Unsupported(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    Positive,
    Negative,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub face: Vec<String>,
    pub species: String,
    pub lambda: f64,
    pub se: Option<f64>,
    pub method: Method,
    pub sign: Sign,
    /// Closed form for reference, when one exists.
    pub closed_form: Option<f64>,
    pub flags: InvasionFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub model: String,
    pub params: ZooParams,
    pub regime: String,
    /// Every rate a decision consulted, in the order consulted.
    pub lambdas: Vec<LambdaEntry>,
    #[serde(default)]
    pub basins: Option<BasinReport>,
}

#[derive(Clone, Debug)]
pub struct ClassifyOptions {
    /// Monte Carlo settings for rates without a closed form.
    pub config: SimConfig,
    /// Use closed forms where they exist.
    pub closed_form: bool,
}

impl ClassifyOptions {
    pub fn new(config: SimConfig) -> Self {
        ClassifyOptions { config, closed_form: true }
    }

    pub fn monte_carlo(config: SimConfig) -> Self {
        ClassifyOptions { config, closed_form: false }
    }
}

struct Oracle<'a> {
    model: &'a ModelSpec,
    options: &'a ClassifyOptions,
    cache: HashMap<(u64, usize), Sign>,
    entries: Vec<LambdaEntry>,
    values: HashMap<(u64, usize), f64>,
}

impl<'a> Oracle<'a> {
    fn new(model: &'a ModelSpec, options: &'a ClassifyOptions) -> Self {
        Oracle { model, options, cache: HashMap::new(), entries: Vec::new(), values: HashMap::new() }
    }

    fn estimate(&self, face: Face, species: usize) -> Result<InvasionEstimate, InvasionError> {
        if self.options.closed_form {
            if let Some(e) = closed_form_estimate(self.model, face, species, self.options.config.horizon) {
                return Ok(e);
            }
        }
        estimate_lambda(self.model, face, species, &self.options.config)
    }

    fn sign(&mut self, face: Face, species: usize) -> Result<Sign, InvasionError> {
        let key = (face.bits(), species);
        if let Some(s) = self.cache.get(&key) {
            return Ok(*s);
        }
        let e = self.estimate(face, species)?;
        let sign = match e.method {
            Method::ClosedForm if e.lambda > 0.0 => Sign::Positive,
            Method::ClosedForm if e.lambda < 0.0 => Sign::Negative,
            Method::ClosedForm => Sign::Inconclusive,
            _ => match e.sign(SIGN_Z) {
                Some(s) if s > 0.0 => Sign::Positive,
                Some(_) => Sign::Negative,
                None => Sign::Inconclusive,
            },
        };
        let names = self.model.species_names();
        self.entries.push(LambdaEntry {
            face: face.names(names),
            species: names[species].clone(),
            lambda: e.lambda,
            se: e.se,
            method: e.method,
            sign,
            closed_form: closed_form_lambda(self.model, face, species),
            flags: e.flags.clone(),
        });
        self.cache.insert(key, sign);
        self.values.insert(key, e.lambda);
        Ok(sign)
    }

    fn value(&self, face: Face, species: usize) -> f64 {
        self.values[&(face.bits(), species)]
    }
}

/// Outcome of one decision node: a label, or "inconclusive" when a sign
/// could not be resolved.
struct Undecided;

fn decide(s: Sign) -> Result<bool, Undecided> {
    match s {
        Sign::Positive => Ok(true),
        Sign::Negative => Ok(false),
        Sign::Inconclusive => Err(Undecided),
    }
}

macro_rules! pos {
    ($o:expr, $face:expr, $i:expr) => {
        match decide($o.sign($face, $i)?) {
            Ok(b) => b,
            Err(Undecided) => return Ok("inconclusive".to_string()),
        }
    };
}

fn f(ix: &[usize]) -> Face {
    Face::from_indices(ix.iter().copied())
}

fn competitive(o: &mut Oracle) -> Result<String, InvasionError> {
    let l1 = pos!(o, Face::empty(), 0);
    let l2 = pos!(o, Face::empty(), 1);
    Ok(match (l1, l2) {
        (false, false) => "both-extinct",
        (true, false) => "1-wins",
        (false, true) => "2-wins",
        (true, true) => {
            let a = pos!(o, f(&[0]), 1);
            let b = pos!(o, f(&[1]), 0);
            match (a, b) {
                (false, false) => "bistable",
                (false, true) => "1-wins",
                (true, false) => "2-wins",
                (true, true) => "coexistence",
            }
        }
    }
    .to_string())
}

fn predator_prey(o: &mut Oracle, n: usize) -> Result<String, InvasionError> {
    if !pos!(o, Face::empty(), 0) {
        return Ok("all-extinct".into());
    }
    if n == 2 {
        return Ok(if pos!(o, f(&[0]), 1) { "coexistence" } else { "prey-only" }.into());
    }
    let a2 = pos!(o, f(&[0]), 1);
    let a3 = pos!(o, f(&[0]), 2);
    Ok(match (a2, a3) {
        (false, false) => "prey-only",
        (true, false) => {
            if pos!(o, f(&[0, 1]), 2) {
                "coexistence"
            } else {
                "prey-and-2"
            }
        }
        (false, true) => {
            if pos!(o, f(&[0, 2]), 1) {
                "coexistence"
            } else {
                "prey-and-3"
            }
        }
        (true, true) => {
            let b3 = pos!(o, f(&[0, 1]), 2);
            let b2 = pos!(o, f(&[0, 2]), 1);
            match (b3, b2) {
                (false, false) => "predators-bistable",
                (false, true) => "prey-and-2",
                (true, false) => "prey-and-3",
                (true, true) => "coexistence",
            }
        }
    }
    .to_string())
}

fn chemostat(o: &mut Oracle, n: usize) -> Result<String, InvasionError> {
    let s = f(&[0]);
    if n == 2 {
        return Ok(if pos!(o, s, 1) { "persistence" } else { "washout" }.into());
    }
    if n != 3 {
        return Ok("unclassified".into());
    }
    let l1 = pos!(o, s, 1);
    let l2 = pos!(o, s, 2);
    Ok(match (l1, l2) {
        (false, false) => "washout",
        (true, false) => {
            if pos!(o, f(&[0, 1]), 2) {
                "coexistence"
            } else {
                "1-wins"
            }
        }
        (false, true) => {
            if pos!(o, f(&[0, 2]), 1) {
                "coexistence"
            } else {
                "2-wins"
            }
        }
        (true, true) => {
            let b = pos!(o, f(&[0, 1]), 2);
            let c = pos!(o, f(&[0, 2]), 1);
            match (b, c) {
                (false, false) => "bistable",
                (false, true) => "1-wins",
                (true, false) => "2-wins",
                (true, true) => "coexistence",
            }
        }
    }
    .to_string())
}

fn sir(o: &mut Oracle) -> Result<String, InvasionError> {
    Ok(if pos!(o, f(&[0]), 1) { "endemic" } else { "disease-extinct" }.into())
}

fn replicator(o: &mut Oracle, n: usize) -> Result<String, InvasionError> {
    if n == 2 {
        let p = pos!(o, f(&[1]), 0);
        let q = pos!(o, f(&[0]), 1);
        return Ok(match (p, q) {
            (false, false) => "bistable",
            (false, true) => "2-dominates",
            (true, false) => "1-dominates",
            (true, true) => "coexistence",
        }
        .into());
    }
    if n != 3 {
        return Ok("unclassified".into());
    }
    // vertex k attracts when no species invades it
    let mut invaded = [[false; 3]; 3];
    for k in 0..3 {
        for i in 0..3 {
            if i != k {
                invaded[k][i] = pos!(o, f(&[k]), i);
            }
        }
    }
    let mut attractors = Vec::new();
    let mut boundary: Vec<Face> = Vec::new();
    for k in 0..3 {
        boundary.push(f(&[k]));
        if (0..3).all(|i| i == k || !invaded[k][i]) {
            attractors.push(format!("vertex-{}", k + 1));
        }
    }
    for (j, l) in [(0, 1), (0, 2), (1, 2)] {
        if invaded[j][l] && invaded[l][j] {
            let third = 3 - j - l;
            let edge = f(&[j, l]);
            boundary.push(edge);
            if !pos!(o, edge, third) {
                attractors.push(format!("edge-{}{}", j + 1, l + 1));
            }
        }
    }
    if attractors.len() == 1 {
        return Ok(attractors.remove(0));
    }
    if attractors.len() > 1 {
        return Ok("multistable".into());
    }
    // no boundary attractor: look for weights making every boundary measure
    // invaded on average
    let steps = 100;
    for a in 1..steps {
        for b in 1..steps - a {
            let p = [a as f64, b as f64, (steps - a - b) as f64];
            let ok = boundary
                .iter()
                .all(|&face| (0..3).filter(|&i| !face.contains(i)).map(|i| p[i] * o.value(face, i)).sum::<f64>() > 0.0);
            if ok {
                return Ok("coexistence".into());
            }
        }
    }
    Ok("unclassified".into())
}

/// Regime label from the decision tree of the zoo model.
pub fn classify_regime(model: &ModelSpec, options: &ClassifyOptions) -> Result<RegimeReport, ClassifyError> {
    let params = model.zoo().ok_or_else(|| ClassifyError::Unsupported(model.name().to_string()))?;
    let n = model.dim();
    let mut o = Oracle::new(model, options);
    let regime = match params {
        ZooParams::CompetitiveLv(_) if n == 2 => competitive(&mut o)?,
        ZooParams::CompetitiveLv(_) => return Err(ClassifyError::Unsupported("competitive_lv with n != 2".into())),
        ZooParams::PredatorPrey(_) => predator_prey(&mut o, n)?,
        ZooParams::Replicator(_) => replicator(&mut o, n)?,
        ZooParams::Sir(_) => sir(&mut o)?,
        ZooParams::Chemostat(_) => chemostat(&mut o, n)?,
    };
    Ok(RegimeReport {
        model: model.name().to_string(),
        params: params.materialize(),
        regime,
        lambdas: o.entries,
        basins: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceOutcome {
    pub replicate: u64,
    pub face: Option<Face>,
    pub final_log_state: Vec<f64>,
    /// `ln X_i(T)/T` for the species extinct at the assigned face.
    pub extinct_rates: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceProbability {
    pub face: Vec<String>,
    pub label: String,
    pub count: usize,
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the face was never observed: the 95% rule-of-three bound.
    pub upper_bound: Option<f64>,
    pub summary: String,
}

/// Empirical `ln X_i(T)/T` of runs absorbed at one face compared with the
/// closed-form rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub face: Vec<String>,
    pub species: String,
    pub runs: usize,
    pub mean_rate: f64,
    pub sd: f64,
    pub closed_form: Option<f64>,
    pub tolerance: Option<f64>,
    /// Fraction of runs within the tolerance.
    pub within_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinReport {
    pub model: String,
    pub replicates: usize,
    pub completed: usize,
    pub aborted: usize,
    pub horizon: f64,
    pub faces: Vec<FaceProbability>,
    pub unassigned: usize,
    pub unassigned_fraction: f64,
    pub horizon_too_short: bool,
    pub rate_checks: Vec<RateCheck>,
    pub outcomes: Vec<FaceOutcome>,
}

impl BasinReport {
    pub fn probability(&self, face: Face, names: &[String]) -> Option<&FaceProbability> {
        let label = face.label(names);
        self.faces.iter().find(|p| p.label == label)
    }
}

/// Faces a run can be absorbed into.
pub fn candidate_faces(model: &ModelSpec) -> Vec<Face> {
    let n = model.dim();
    let inflow = model.inflow_components();
    Face::all_subsets(n)
        .filter(|f| f.is_subset_of(model.restriction()))
        .filter(|f| inflow.is_subset_of(*f))
        .filter(|f| model.simplex_total().is_none() || !f.is_empty())
        .collect()
}

fn percent(x: f64) -> String {
    let s = format!("{:.2}", 100.0 * x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// Runs `config.replicates` full-system trajectories from `initial` and
/// tallies the absorbing faces.
pub fn estimate_basin_probabilities(
    model: &ModelSpec,
    initial: &dyn History,
    config: &SimConfig,
) -> Result<BasinReport, ClassifyError> {
    config.validate(model)?;
    let dt = config.resolved_dt(model);
    let initial = Segment::sample(initial, crate::sdde::history_points(model.max_lag(), dt), dt);
    let initial = &initial;
    let runs: Vec<Result<FaceOutcome, SimError>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|k| {
            let traj = integrate(model, initial, config, model.restriction(), k)?;
            let face = detect_absorbed_face(&traj, config.extinction_floor, crate::invasion::FACE_OCCUPANCY_THRESHOLD);
            let horizon = traj.horizon();
            let extinct_rates = (0..traj.final_log_state.len())
                .map(|i| match face {
                    Some(f) if !f.contains(i) && traj.final_log_state[i].is_finite() => {
                        Some(traj.final_log_state[i] / horizon)
                    }
                    _ => None,
                })
                .collect();
            Ok(FaceOutcome { replicate: k, face, final_log_state: traj.final_log_state, extinct_rates })
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut aborted = 0;
    for r in runs {
        match r {
            Ok(o) => outcomes.push(o),
            Err(SimError::Divergence { .. } | SimError::NonFinite { .. }) => aborted += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let completed = outcomes.len();
    let names = model.species_names();
    let horizon = config.horizon;
    let mut faces = Vec::new();
    let mut rate_checks = Vec::new();
    let mut candidates = candidate_faces(model);
    for o in &outcomes {
        if let Some(face) = o.face {
            if !candidates.contains(&face) {
                candidates.push(face);
            }
        }
    }
    for face in candidates {
        let hits: Vec<&FaceOutcome> = outcomes.iter().filter(|o| o.face == Some(face)).collect();
        let count = hits.len();
        let p = if completed > 0 { count as f64 / completed as f64 } else { 0.0 };
        let (lower, upper) = wilson_interval(count, completed, Z95);
        let upper_bound = (count == 0 && completed > 0).then(|| 3.0 / completed as f64);
        let summary = match upper_bound {
            Some(b) => format!("< {} (95%)", percent(b)),
            None => format!("{} [{}, {}] (95%)", percent(p), percent(lower), percent(upper)),
        };
        faces.push(FaceProbability {
            face: face.names(names),
            label: face.label(names),
            count,
            probability: p,
            lower,
            upper,
            upper_bound,
            summary,
        });
        if count == 0 {
            continue;
        }
        for i in face.complement(model.dim()).intersect(model.restriction()).indices() {
            let rates: Vec<f64> = hits.iter().filter_map(|o| o.extinct_rates[i]).collect();
            if rates.is_empty() {
                continue;
            }
            let k = rates.len() as f64;
            let mean = rates.iter().sum::<f64>() / k;
            let sd = if rates.len() > 1 {
                (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            let closed = closed_form_lambda(model, face, i).filter(|l| *l < 0.0);
            let tolerance = closed.map(|l| (SIGN_Z * sd).max(0.1 * l.abs()));
            let within_fraction =
                closed.zip(tolerance).map(|(l, tol)| rates.iter().filter(|r| (*r - l).abs() <= tol).count() as f64 / k);
            rate_checks.push(RateCheck {
                face: face.names(names),
                species: names[i].clone(),
                runs: rates.len(),
                mean_rate: mean,
                sd,
                closed_form: closed,
                tolerance,
                within_fraction,
            });
        }
    }
    let unassigned = outcomes.iter().filter(|o| o.face.is_none()).count();
    let unassigned_fraction = if completed > 0 { unassigned as f64 / completed as f64 } else { 0.0 };
    Ok(BasinReport {
        model: model.name().to_string(),
        replicates: config.replicates,
        completed,
        aborted,
        horizon,
        faces,
        unassigned,
        unassigned_fraction,
        horizon_too_short: unassigned_fraction > UNASSIGNED_LIMIT,
        rate_checks,
        outcomes,
    })
}
