//! Positivity-preserving integration of the segment process.
//!
//! Each on-face component is advanced in log coordinates,
//!
//! ```text
//! ln X_i(t+dt) = ln X_i(t) + (F_i − ½ Σ_j G_ij²) dt + Σ_j G_ij ΔB_j,
//! ```
//!
//! so positivity holds by construction and the log-growth integrand is a
//! byproduct of stepping. Components with a zero-order inflow (`F_i = q_i/x_i − k_i`)
//! take the exponential step `x·exp((−k_i − ½ΣG²)dt + G·ΔB) + q_i·dt·φ(k_i dt)`
//! instead, which stays positive without the stiffness of `q_i/x_i`.

mod history;
mod noise;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Face, History, ModelSpec};

pub(crate) use history::RingHistory;
pub use history::Segment;
pub use noise::{brownian_increments, BrownianStream, Coarsened, NoiseSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Step size; defaults to `r/64`, or `1/128` without delay.
    #[serde(default)]
    pub dt: Option<f64>,
    pub horizon: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// `ε_log`: a component with `ln X_i` below this counts as absorbed.
    #[serde(default = "default_extinction_floor")]
    pub extinction_floor: f64,
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
    /// Divergence ceiling on `ln X_i`.
    #[serde(default = "default_log_ceiling")]
    pub log_ceiling: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_burn_in() -> f64 {
    0.2
}
fn default_replicates() -> usize {
    1
}
fn default_extinction_floor() -> f64 {
    -30.0
}
fn default_record_stride() -> usize {
    8
}
fn default_log_ceiling() -> f64 {
    50.0
}
fn default_batches() -> usize {
    32
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64) -> Self {
        SimConfig {
            dt: None,
            horizon,
            burn_in: default_burn_in(),
            seed,
            replicates: default_replicates(),
            extinction_floor: default_extinction_floor(),
            record_stride: default_record_stride(),
            log_ceiling: default_log_ceiling(),
            batches: default_batches(),
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn resolved_dt(&self, model: &ModelSpec) -> f64 {
        default_dt(self.dt, model.max_lag())
    }

    /// Total step count `round(T/dt)`.
    pub fn steps(&self, model: &ModelSpec) -> u64 {
        (self.horizon / self.resolved_dt(model)).round() as u64
    }

    /// First step counted by post-burn-in statistics.
    pub fn burn_in_steps(&self, model: &ModelSpec) -> u64 {
        (self.burn_in * self.steps(model) as f64).ceil() as u64
    }

    /// Copy with `dt` filled in.
    pub fn materialize(&self, model: &ModelSpec) -> SimConfig {
        let mut c = self.clone();
        c.dt = Some(self.resolved_dt(model));
        c
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        let dt = self.resolved_dt(model);
        let r = model.max_lag();
        if !(dt > 0.0) || !dt.is_finite() {
            return bad(format!("dt must be positive, got {dt}"));
        }
        if r > 0.0 && dt > r {
            return bad(format!("dt = {dt} exceeds the delay r = {r}"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!("burn_in must lie in [0, 1), got {}", self.burn_in));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.extinction_floor < 0.0) {
            return bad(format!("extinction_floor must be negative, got {}", self.extinction_floor));
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        if !(self.log_ceiling > 0.0) {
            return bad("log_ceiling must be positive".into());
        }
        if self.batches == 0 {
            return bad("batches must be at least 1".into());
        }
        if self.steps(model) == 0 {
            return bad("horizon is shorter than one step".into());
        }
        Ok(())
    }
}

pub(crate) fn default_dt(dt: Option<f64>, r: f64) -> f64 {
    match dt {
        Some(dt) => dt,
        None if r > 0.0 => r / 64.0,
        None => 1.0 / 128.0,
    }
}

/// Number of grid steps covering the delay span.
pub fn history_points(r: f64, dt: f64) -> usize {
    if r <= 0.0 {
        0
    } else {
        ((r / dt) - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("replicate diverged: ln x{} = {log_value} exceeds the ceiling at t = {t}", component + 1)]
    Divergence { component: usize, t: f64, log_value: f64 },
    #[error("non-finite coefficient for x{} at t = {t}", component + 1)]
    NonFinite { component: usize, t: f64, segment: Box<Segment> },
    #[error("invalid initial segment: {0}")]
    InvalidInitial(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// What an observer sees before each step: the current segment, its log
/// state and the log-growth integrand evaluated there.
pub struct StepSample<'a> {
    pub step: u64,
    pub t: f64,
    pub dt: f64,
    pub segment: &'a dyn History,
    pub log_x: &'a [f64],
    pub integrand: &'a [f64],
}

pub trait StepObserver {
    fn observe(&mut self, sample: &StepSample<'_>);
}

impl StepObserver for () {
    fn observe(&mut self, _sample: &StepSample<'_>) {}
}

impl<A: StepObserver, B: StepObserver> StepObserver for (A, B) {
    fn observe(&mut self, sample: &StepSample<'_>) {
        self.0.observe(sample);
        self.1.observe(sample);
    }
}

impl<T: StepObserver + ?Sized> StepObserver for &mut T {
    fn observe(&mut self, sample: &StepSample<'_>) {
        (**self).observe(sample);
    }
}

/// Running record of the exact invariants the scheme promises.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantLog {
    pub steps: u64,
    /// On-face components whose log state left the finite range.
    pub positivity_violations: u64,
    /// Off-face components that were not bitwise zero.
    pub off_face_violations: u64,
    /// Largest `|Σx/X − 1|` before renormalization (replicator only).
    pub max_simplex_defect_pre: f64,
    /// Largest `|Σx/X − 1|` after renormalization.
    pub max_simplex_defect_post: f64,
}

impl InvariantLog {
    pub fn merge(&mut self, other: &InvariantLog) {
        self.steps += other.steps;
        self.positivity_violations += other.positivity_violations;
        self.off_face_violations += other.off_face_violations;
        self.max_simplex_defect_pre = self.max_simplex_defect_pre.max(other.max_simplex_defect_pre);
        self.max_simplex_defect_post = self.max_simplex_defect_post.max(other.max_simplex_defect_post);
    }

    pub fn is_clean(&self, simplex_tol: f64) -> bool {
        self.positivity_violations == 0 && self.off_face_violations == 0 && self.max_simplex_defect_post <= simplex_tol
    }
}

/// Single-trajectory stepper over a ring-buffered history.
#[derive(Clone)]
pub struct Integrator {
    model: ModelSpec,
    /// Evaluates off-face rows too, so their integrand is the invasion integrand.
    parent: ModelSpec,
    face: Face,
    inflow: Face,
    n: usize,
    m: usize,
    dt: f64,
    ring: RingHistory,
    log_x: Vec<f64>,
    x: Vec<f64>,
    step: u64,
    log_ceiling: f64,
    drift: Vec<f64>,
    rows: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    integrand: Vec<f64>,
    db: Vec<f64>,
    evaluated: bool,
    invariants: InvariantLog,
}

impl Integrator {
    /// Prepares a run on `face` (intersected with any restriction already on
    /// the model). Off-face values of `initial` are ignored; on-face values
    /// must be positive at every grid point.
    pub fn new(model: &ModelSpec, initial: &dyn History, face: Face, dt: f64) -> Result<Self, SimError> {
        let n = model.dim();
        if initial.dim() != n {
            return Err(SimError::InvalidInitial(format!("segment has {} components, model has {n}", initial.dim())));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        let model = model.restrict_to_face(face);
        let face = model.restriction();
        let n_r = history_points(model.max_lag(), dt);
        let mut ring = RingHistory::new(n, n_r, dt);
        ring.load(initial);
        let off = face.complement(n);
        let mut snapshot = ring.to_segment();
        for i in off.indices() {
            for v in &mut snapshot.values[i * (n_r + 1)..(i + 1) * (n_r + 1)] {
                *v = 0.0;
            }
        }
        for i in face.indices() {
            if let Some(v) = snapshot.species(i).iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(SimError::InvalidInitial(format!(
                    "{} must be positive on its history, found {v}",
                    model.species_names()[i]
                )));
            }
        }
        if let Some(total) = model.simplex_total() {
            if !face.is_empty() {
                for k in 0..=n_r {
                    let s: f64 = face.indices().map(|i| snapshot.values[i * (n_r + 1) + k]).sum();
                    for i in face.indices() {
                        snapshot.values[i * (n_r + 1) + k] *= total / s;
                    }
                }
            }
        }
        ring.load(&snapshot);
        let x: Vec<f64> = (0..n).map(|i| snapshot.current(i)).collect();
        let log_x =
            x.iter().enumerate().map(|(i, &v)| if face.contains(i) { v.ln() } else { f64::NEG_INFINITY }).collect();
        let m = model.drivers();
        Ok(Integrator {
            inflow: model.inflow_components().intersect(face),
            face,
            n,
            m,
            dt,
            ring,
            log_x,
            x,
            step: 0,
            log_ceiling: f64::INFINITY,
            drift: vec![0.0; n],
            rows: vec![0.0; n * m],
            q: vec![0.0; n],
            k: vec![0.0; n],
            integrand: vec![0.0; n],
            db: vec![0.0; m],
            evaluated: false,
            invariants: InvariantLog::default(),
            parent: model.unrestricted(),
            model,
        })
    }

    pub fn with_log_ceiling(mut self, ceiling: f64) -> Self {
        self.log_ceiling = ceiling;
        self
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn face(&self) -> Face {
        self.face
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn log_state(&self) -> &[f64] {
        &self.log_x
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn history(&self) -> &dyn History {
        &self.ring
    }

    pub fn segment(&self) -> Segment {
        self.ring.to_segment()
    }

    pub fn invariants(&self) -> &InvariantLog {
        &self.invariants
    }

    /// Log-growth integrand at the current segment.
    pub fn integrand(&mut self) -> Result<&[f64], SimError> {
        self.evaluate()?;
        Ok(&self.integrand)
    }

    /// Evaluates coefficients at the current segment (cached until the next step).
    pub fn evaluate(&mut self) -> Result<(), SimError> {
        if self.evaluated {
            return Ok(());
        }
        // off-face history is exactly zero, so on-face rows equal the restricted ones
        self.parent.per_capita_drift(&self.ring, &mut self.drift);
        self.parent.per_capita_diffusion(&self.ring, &mut self.rows);
        if !self.inflow.is_empty() {
            self.parent.inflow_split(&self.ring, &mut self.q, &mut self.k);
        }
        let m = self.m;
        for i in 0..self.n {
            if !self.face.contains(i) {
                self.integrand[i] = self.drift[i] - 0.5 * sq_norm(&self.rows[i * m..(i + 1) * m]);
                continue;
            }
            let row = &self.rows[i * m..(i + 1) * m];
            let val = self.drift[i] - 0.5 * sq_norm(row);
            let bad =
                !val.is_finite() || (self.inflow.contains(i) && !(self.q[i].is_finite() && self.k[i].is_finite()));
            if bad {
                return Err(SimError::NonFinite { component: i, t: self.time(), segment: Box::new(self.segment()) });
            }
            self.integrand[i] = val;
        }
        self.evaluated = true;
        Ok(())
    }

    /// Advances one step with the given Brownian increments.
    pub fn advance(&mut self, db: &[f64]) -> Result<(), SimError> {
        self.evaluate()?;
        let dt = self.dt;
        let m = self.m;
        for i in self.face.indices() {
            let row = &self.rows[i * m..(i + 1) * m];
            let noise: f64 = row.iter().zip(db).map(|(g, b)| g * b).sum();
            if self.inflow.contains(i) {
                let kdt = self.k[i] * dt;
                let mult = self.log_x[i] + (-self.k[i] - 0.5 * sq_norm(row)) * dt + noise;
                let add = self.q[i] * dt * phi1(kdt);
                self.log_x[i] = if add > 0.0 { log_add_exp(mult, add.ln()) } else { mult };
            } else {
                self.log_x[i] += self.integrand[i] * dt + noise;
            }
        }
        if let Some(total) = self.model.simplex_total() {
            self.renormalize(total);
        }
        self.step += 1;
        for i in 0..self.n {
            if self.face.contains(i) {
                let l = self.log_x[i];
                if l.is_nan() {
                    return Err(SimError::NonFinite {
                        component: i,
                        t: self.time(),
                        segment: Box::new(self.segment()),
                    });
                }
                if l > self.log_ceiling {
                    return Err(SimError::Divergence { component: i, t: self.time(), log_value: l });
                }
                if !l.is_finite() {
                    self.invariants.positivity_violations += 1;
                }
                self.x[i] = l.exp();
            } else if self.x[i].to_bits() != 0 {
                self.invariants.off_face_violations += 1;
            }
        }
        self.ring.push(&self.x);
        self.invariants.steps += 1;
        self.evaluated = false;
        Ok(())
    }

    fn renormalize(&mut self, total: f64) {
        if self.face.is_empty() {
            return;
        }
        let pre: f64 = self.face.indices().map(|i| self.log_x[i].exp()).sum();
        let shift = (pre / total).ln();
        for i in self.face.indices() {
            self.log_x[i] -= shift;
        }
        let post: f64 = self.face.indices().map(|i| self.log_x[i].exp()).sum();
        let inv = &mut self.invariants;
        inv.max_simplex_defect_pre = inv.max_simplex_defect_pre.max((pre / total - 1.0).abs());
        inv.max_simplex_defect_post = inv.max_simplex_defect_post.max((post / total - 1.0).abs());
    }

    /// Draws the increments for the current step from `noise` and advances.
    pub fn step_with(&mut self, noise: &mut dyn NoiseSource) -> Result<(), SimError> {
        let mut db = std::mem::take(&mut self.db);
        noise.increments(self.step, self.dt, &mut db);
        let out = self.advance(&db);
        self.db = db;
        out
    }

    /// Runs `steps` steps, calling `observer` before each one.
    pub fn run(
        &mut self,
        steps: u64,
        noise: &mut dyn NoiseSource,
        observer: &mut dyn StepObserver,
    ) -> Result<(), SimError> {
        for _ in 0..steps {
            self.evaluate()?;
            observer.observe(&StepSample {
                step: self.step,
                t: self.time(),
                dt: self.dt,
                segment: &self.ring,
                log_x: &self.log_x,
                integrand: &self.integrand,
            });
            self.step_with(noise)?;
        }
        Ok(())
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum()
}

/// `(1 − e^{−z})/z`, continuous at 0.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Recorded path plus realized log-growth integrals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub face: Face,
    pub dt: f64,
    /// Delay span `r` of the model.
    pub lag: f64,
    pub steps: u64,
    pub burn_in_steps: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub log_states: Vec<Vec<f64>>,
    /// Log-growth integrand at each recorded sample.
    pub integrands: Vec<Vec<f64>>,
    /// `∫_0^T (F_i − ½Σ_j G_ij²) ds` per component.
    pub growth: Vec<f64>,
    /// Same integral over the post-burn-in window.
    pub growth_post_burn_in: Vec<f64>,
    pub initial_log_state: Vec<f64>,
    pub final_log_state: Vec<f64>,
    pub invariants: InvariantLog,
}

impl Trajectory {
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.final_log_state.iter().map(|l| l.exp()).collect()
    }

    /// Indices of recorded samples in the second half of the horizon.
    pub fn final_half(&self) -> std::ops::Range<usize> {
        let half = 0.5 * self.horizon();
        let start = self.times.partition_point(|&t| t < half);
        start..self.times.len()
    }
}

/// Observer recording every `stride`-th state and the growth integrals.
pub struct Recorder {
    stride: u64,
    burn_in_steps: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub log_states: Vec<Vec<f64>>,
    pub integrands: Vec<Vec<f64>>,
    pub growth: Vec<f64>,
    pub growth_post: Vec<f64>,
}

impl Recorder {
    pub fn new(n: usize, stride: usize, burn_in_steps: u64) -> Self {
        Recorder {
            stride: stride.max(1) as u64,
            burn_in_steps,
            times: Vec::new(),
            states: Vec::new(),
            log_states: Vec::new(),
            integrands: Vec::new(),
            growth: vec![0.0; n],
            growth_post: vec![0.0; n],
        }
    }

    fn record(&mut self, t: f64, seg: &dyn History, log_x: &[f64], integrand: &[f64]) {
        self.times.push(t);
        self.states.push((0..seg.dim()).map(|i| seg.current(i)).collect());
        self.log_states.push(log_x.to_vec());
        self.integrands.push(integrand.to_vec());
    }
}

impl StepObserver for Recorder {
    fn observe(&mut self, s: &StepSample<'_>) {
        if s.step.is_multiple_of(self.stride) {
            self.record(s.t, s.segment, s.log_x, s.integrand);
        }
        let post = s.step >= self.burn_in_steps;
        for (i, v) in s.integrand.iter().enumerate() {
            if s.log_x[i] == f64::NEG_INFINITY {
                continue;
            }
            self.growth[i] += v * s.dt;
            if post {
                self.growth_post[i] += v * s.dt;
            }
        }
    }
}

/// Integrates one replicate with the configured Brownian stream and records
/// a [`Trajectory`].
pub fn integrate(
    model: &ModelSpec,
    initial: &dyn History,
    config: &SimConfig,
    face: Face,
    replicate: u64,
) -> Result<Trajectory, SimError> {
    let mut noise = BrownianStream::new(config.seed, replicate, model.drivers());
    integrate_with(model, initial, config, face, &mut noise, &mut ())
}

/// As [`integrate`], with an explicit noise source and an extra observer.
pub fn integrate_with(
    model: &ModelSpec,
    initial: &dyn History,
    config: &SimConfig,
    face: Face,
    noise: &mut dyn NoiseSource,
    observer: &mut dyn StepObserver,
) -> Result<Trajectory, SimError> {
    config.validate(model)?;
    let dt = config.resolved_dt(model);
    let steps = config.steps(model);
    let burn = config.burn_in_steps(model);
    let mut it = Integrator::new(model, initial, face, dt)?.with_log_ceiling(config.log_ceiling);
    let initial_log_state = it.log_state().to_vec();
    let mut rec = Recorder::new(model.dim(), config.record_stride, burn);
    it.run(steps, noise, &mut (&mut rec, observer))?;
    let log_x = it.log_state().to_vec();
    let integrand = it.integrand()?.to_vec();
    rec.record(it.time(), it.history(), &log_x, &integrand);
    Ok(Trajectory {
        face: it.face(),
        dt,
        lag: model.max_lag(),
        steps,
        burn_in_steps: burn,
        times: rec.times,
        states: rec.states,
        log_states: rec.log_states,
        integrands: rec.integrands,
        growth: rec.growth,
        growth_post_burn_in: rec.growth_post,
        initial_log_state,
        final_log_state: it.log_state().to_vec(),
        invariants: it.invariants().clone(),
    })
}
