//! Streaming time-averages of the normalized occupation measure.
//!
//! The measure itself lives on segment space and is never stored; only its
//! action on a fixed set of functionals is tracked:
//! `φ_i(0)`, `φ_i(-r)`, `φ_i(0)φ_j(0)`, the log-growth integrand, face
//! occupancy `{min_{i∈I} X_i < ε}`, per-component occupancy `{X_i < ε}` and
//! tail mass `{|X| > R}`.

use serde::{Deserialize, Serialize};

use crate::model::{Face, History, ModelSpec};
use crate::sdde::{integrate_with, BrownianStream, SimConfig, SimError, StepObserver, StepSample, Trajectory};

/// Batch count below which standard errors are reported as unavailable.
pub const MIN_BATCHES: usize = 20;

/// z-score beyond which a window is flagged non-stationary.
pub const STATIONARITY_Z: f64 = 4.0;

pub fn default_eps_grid() -> Vec<f64> {
    vec![1e-12, 1e-9, 1e-6, 1e-3, 1e-2, 1e-1]
}

pub fn default_radius_grid() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
}

/// Which functionals are tracked and where they sit in a batch vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub n: usize,
    pub lag: f64,
    pub face: Face,
    pub eps_grid: Vec<f64>,
    pub radius_grid: Vec<f64>,
}

impl Layout {
    pub fn new(model: &ModelSpec, face: Face) -> Self {
        Layout {
            n: model.dim(),
            lag: model.max_lag(),
            face: face.intersect(model.restriction()),
            eps_grid: default_eps_grid(),
            radius_grid: default_radius_grid(),
        }
    }

    fn width(&self) -> usize {
        let n = self.n;
        let e = self.eps_grid.len();
        4 * n + n * n + e + n * e + self.radius_grid.len()
    }

    fn current(&self, i: usize) -> usize {
        i
    }
    fn lagged(&self, i: usize) -> usize {
        self.n + i
    }
    fn difference(&self, i: usize) -> usize {
        2 * self.n + i
    }
    fn integrand(&self, i: usize) -> usize {
        3 * self.n + i
    }
    fn second(&self, i: usize, j: usize) -> usize {
        4 * self.n + i * self.n + j
    }
    fn face_occ(&self, e: usize) -> usize {
        4 * self.n + self.n * self.n + e
    }
    fn species_occ(&self, i: usize, e: usize) -> usize {
        4 * self.n + self.n * self.n + self.eps_grid.len() + i * self.eps_grid.len() + e
    }
    fn tail(&self, k: usize) -> usize {
        4 * self.n + self.n * self.n + self.eps_grid.len() * (1 + self.n) + k
    }
}

/// Sums over one contiguous block of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub count: u64,
    pub sums: Vec<f64>,
}

/// Post-burn-in time averages as a list of batches; merging concatenates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationStats {
    pub layout: Layout,
    pub dt: f64,
    pub batches: Vec<Batch>,
}

/// Streaming accumulator, fed by the integrator as an observer.
pub struct OccupationAccumulator {
    stats: OccupationStats,
    first_step: u64,
    window_steps: u64,
    batches: usize,
    values: Vec<f64>,
}

impl OccupationAccumulator {
    /// Accumulates steps in `[first_step, first_step + window_steps)` into
    /// `batches` equal blocks.
    pub fn new(layout: Layout, dt: f64, first_step: u64, window_steps: u64, batches: usize) -> Self {
        let batches = batches.max(1).min(window_steps.max(1) as usize);
        let width = layout.width();
        OccupationAccumulator {
            stats: OccupationStats {
                batches: (0..batches).map(|_| Batch { count: 0, sums: vec![0.0; width] }).collect(),
                layout,
                dt,
            },
            first_step,
            window_steps,
            batches,
            values: vec![0.0; width],
        }
    }

    pub fn finish(mut self) -> OccupationStats {
        self.stats.batches.retain(|b| b.count > 0);
        self.stats
    }
}

impl StepObserver for OccupationAccumulator {
    fn observe(&mut self, s: &StepSample<'_>) {
        if s.step < self.first_step || s.step >= self.first_step + self.window_steps {
            return;
        }
        let offset = s.step - self.first_step;
        let b = ((offset as u128 * self.batches as u128) / self.window_steps as u128) as usize;
        let l = &self.stats.layout;
        let v = &mut self.values;
        let n = l.n;
        let mut norm2 = 0.0;
        let mut min_face = f64::INFINITY;
        for i in 0..n {
            let x = s.segment.current(i);
            let xl = s.segment.lagged(i, l.lag);
            v[l.current(i)] = x;
            v[l.lagged(i)] = xl;
            v[l.difference(i)] = x - xl;
            v[l.integrand(i)] = s.integrand[i];
            for j in 0..n {
                v[l.second(i, j)] = x * s.segment.current(j);
            }
            for (e, &eps) in l.eps_grid.iter().enumerate() {
                v[l.species_occ(i, e)] = if x < eps { 1.0 } else { 0.0 };
            }
            norm2 += x * x;
            if l.face.contains(i) {
                min_face = min_face.min(x);
            }
        }
        if l.face.is_empty() {
            min_face = 0.0;
        }
        for (e, &eps) in l.eps_grid.iter().enumerate() {
            v[l.face_occ(e)] = if min_face < eps { 1.0 } else { 0.0 };
        }
        let norm = norm2.sqrt();
        for (k, &r) in l.radius_grid.iter().enumerate() {
            v[l.tail(k)] = if norm > r { 1.0 } else { 0.0 };
        }
        let batch = &mut self.stats.batches[b];
        batch.count += 1;
        for (acc, x) in batch.sums.iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
}

/// Mean with a batch-means standard error (`None` below [`MIN_BATCHES`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: Option<f64>,
}

impl Estimate {
    /// `|mean − target| ≤ k·SE`; false when SE is unavailable.
    pub fn within(&self, target: f64, k: f64) -> bool {
        match self.se {
            Some(se) => (self.mean - target).abs() <= k * se,
            None => false,
        }
    }
}

impl OccupationStats {
    pub fn samples(&self) -> u64 {
        self.batches.iter().map(|b| b.count).sum()
    }

    pub fn window(&self) -> f64 {
        self.samples() as f64 * self.dt
    }

    pub fn se_available(&self) -> bool {
        self.batches.len() >= MIN_BATCHES
    }

    /// Combines disjoint windows (or independent replicates).
    pub fn merge(&mut self, other: &OccupationStats) {
        assert_eq!(self.layout.width(), other.layout.width(), "incompatible layouts");
        self.batches.extend(other.batches.iter().cloned());
    }

    pub fn merged<'a, I: IntoIterator<Item = &'a OccupationStats>>(parts: I) -> Option<OccupationStats> {
        let mut it = parts.into_iter();
        let mut first = it.next()?.clone();
        for p in it {
            first.merge(p);
        }
        Some(first)
    }

    fn estimate(&self, idx: usize) -> Estimate {
        let total = self.samples();
        if total == 0 {
            return Estimate { mean: 0.0, se: None };
        }
        let sum: f64 = self.batches.iter().map(|b| b.sums[idx]).sum();
        let mean = sum / total as f64;
        batch_estimate(mean, self.batches.iter().map(|b| b.sums[idx] / b.count as f64))
    }

    pub fn mean_current(&self, i: usize) -> Estimate {
        self.estimate(self.layout.current(i))
    }

    pub fn mean_lagged(&self, i: usize) -> Estimate {
        self.estimate(self.layout.lagged(i))
    }

    /// `mean φ_i(0) − mean φ_i(−r)`, with its own batch SE.
    pub fn mean_difference(&self, i: usize) -> Estimate {
        self.estimate(self.layout.difference(i))
    }

    /// Time-average of `F_i − ½Σ_j G_ij²`.
    pub fn mean_integrand(&self, i: usize) -> Estimate {
        self.estimate(self.layout.integrand(i))
    }

    pub fn second_moment(&self, i: usize, j: usize) -> Estimate {
        self.estimate(self.layout.second(i, j))
    }

    pub fn face_occupancy(&self, e: usize) -> f64 {
        self.estimate(self.layout.face_occ(e)).mean
    }

    pub fn species_occupancy(&self, i: usize, e: usize) -> f64 {
        self.estimate(self.layout.species_occ(i, e)).mean
    }

    pub fn tail_mass_at(&self, k: usize) -> f64 {
        self.estimate(self.layout.tail(k)).mean
    }

    /// Spread of one functional's batch means relative to its pooled SE
    /// computed per group of `group` consecutive batches (replicates).
    pub fn group_dispersion(&self, idx_species: usize, group: usize) -> Option<f64> {
        let idx = self.layout.integrand(idx_species);
        if group == 0 || self.batches.len() < 2 * group {
            return None;
        }
        let means: Vec<f64> = self
            .batches
            .chunks(group)
            .map(|c| {
                let n: u64 = c.iter().map(|b| b.count).sum();
                c.iter().map(|b| b.sums[idx]).sum::<f64>() / n as f64
            })
            .collect();
        let g = means.len() as f64;
        let m = means.iter().sum::<f64>() / g;
        let between = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (g - 1.0);
        let within: f64 = self
            .batches
            .chunks(group)
            .map(|c| {
                let bm: Vec<f64> = c.iter().map(|b| b.sums[idx] / b.count as f64).collect();
                let k = bm.len() as f64;
                let mm = bm.iter().sum::<f64>() / k;
                bm.iter().map(|x| (x - mm).powi(2)).sum::<f64>() / (k - 1.0).max(1.0) / k
            })
            .sum::<f64>()
            / g;
        if within > 0.0 {
            Some(between / within)
        } else if between > 0.0 {
            Some(f64::INFINITY)
        } else {
            Some(1.0)
        }
    }

    pub fn report(&self, names: &[String]) -> OccupationReport {
        let n = self.layout.n;
        let species = (0..n)
            .map(|i| SpeciesStats {
                name: names.get(i).cloned().unwrap_or_else(|| format!("x{}", i + 1)),
                mean_current: self.mean_current(i),
                mean_lagged: self.mean_lagged(i),
                mean_integrand: self.mean_integrand(i),
                occupancy_below: self
                    .layout
                    .eps_grid
                    .iter()
                    .enumerate()
                    .map(|(e, &eps)| GridValue { at: eps, value: self.species_occupancy(i, e) })
                    .collect(),
            })
            .collect();
        OccupationReport {
            window: self.window(),
            samples: self.samples(),
            batches: self.batches.len(),
            se_available: self.se_available(),
            lag: self.layout.lag,
            species,
            second_moments: (0..n).map(|i| (0..n).map(|j| self.second_moment(i, j).mean).collect()).collect(),
            face_occupancy: self
                .layout
                .eps_grid
                .iter()
                .enumerate()
                .map(|(e, &eps)| GridValue { at: eps, value: self.face_occupancy(e) })
                .collect(),
            tail_mass: self
                .layout
                .radius_grid
                .iter()
                .enumerate()
                .map(|(k, &r)| GridValue { at: r, value: self.tail_mass_at(k) })
                .collect(),
            stationarity: stationarity_diagnostic(self),
        }
    }
}

fn batch_estimate(mean: f64, batch_means: impl Iterator<Item = f64>) -> Estimate {
    let bm: Vec<f64> = batch_means.collect();
    let k = bm.len();
    if k < MIN_BATCHES {
        return Estimate { mean, se: None };
    }
    let m = bm.iter().sum::<f64>() / k as f64;
    let var = bm.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    Estimate { mean, se: Some((var / k as f64).sqrt()) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub at: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesStats {
    pub name: String,
    pub mean_current: Estimate,
    pub mean_lagged: Estimate,
    pub mean_integrand: Estimate,
    pub occupancy_below: Vec<GridValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationReport {
    pub window: f64,
    pub samples: u64,
    pub batches: usize,
    pub se_available: bool,
    pub lag: f64,
    pub species: Vec<SpeciesStats>,
    pub second_moments: Vec<Vec<f64>>,
    pub face_occupancy: Vec<GridValue>,
    pub tail_mass: Vec<GridValue>,
    pub stationarity: Vec<StationarityReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// `(mean φ_i(0) − mean φ_i(−r)) / SE`; `None` when SE is unavailable.
    pub z: Option<f64>,
    pub non_stationary: bool,
}

/// Per-component z-score of `mean φ_i(0) − mean φ_i(−r)`.
pub fn stationarity_diagnostic(stats: &OccupationStats) -> Vec<StationarityReport> {
    (0..stats.layout.n)
        .map(|i| {
            let d = stats.mean_difference(i);
            let z = d.se.map(|se| {
                if se > 0.0 {
                    d.mean / se
                } else if d.mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            });
            StationarityReport { z, non_stationary: z.is_some_and(|z| z.abs() > STATIONARITY_Z) }
        })
        .collect()
}

/// Tail mass at the grid radius nearest to `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailMass {
    pub fraction: f64,
    pub radius: f64,
    /// Set when `r` was not a grid point.
    pub snapped: bool,
}

pub fn tail_mass(stats: &OccupationStats, r: f64) -> TailMass {
    let grid = &stats.layout.radius_grid;
    let k = grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - r).abs().total_cmp(&(b.1 - r).abs()))
        .map(|(k, _)| k)
        .expect("radius grid is empty");
    TailMass { fraction: stats.tail_mass_at(k), radius: grid[k], snapped: grid[k] != r }
}

/// Occupation statistics from the recorded samples of a trajectory.
///
/// Every recorded sample at or after the burn-in time carries equal weight;
/// `φ(−r)` is interpolated between recorded samples.
pub fn accumulate(trajectory: &Trajectory, config: &SimConfig) -> OccupationStats {
    let n = trajectory.final_log_state.len();
    let layout = Layout {
        n,
        lag: trajectory.lag,
        face: trajectory.face,
        eps_grid: default_eps_grid(),
        radius_grid: default_radius_grid(),
    };
    let t0 = trajectory.burn_in_steps as f64 * trajectory.dt;
    let first = trajectory.times.partition_point(|&t| t < t0 - 1e-9 * trajectory.dt);
    let count = (trajectory.times.len() - first) as u64;
    let spacing = if trajectory.times.len() > 1 { trajectory.times[1] - trajectory.times[0] } else { trajectory.dt };
    let mut acc = OccupationAccumulator::new(layout, spacing, 0, count, config.batches);
    for (k, idx) in (first..trajectory.times.len()).enumerate() {
        let view = RecordedView { traj: trajectory, idx };
        acc.observe(&StepSample {
            step: k as u64,
            t: trajectory.times[idx],
            dt: spacing,
            segment: &view,
            log_x: &trajectory.log_states[idx],
            integrand: &trajectory.integrands[idx],
        });
    }
    acc.finish()
}

struct RecordedView<'a> {
    traj: &'a Trajectory,
    idx: usize,
}

impl History for RecordedView<'_> {
    fn dim(&self) -> usize {
        self.traj.final_log_state.len()
    }

    fn current(&self, i: usize) -> f64 {
        self.traj.states[self.idx][i]
    }

    fn lagged(&self, i: usize, lag: f64) -> f64 {
        let times = &self.traj.times;
        let t = times[self.idx] - lag;
        let hi = times.partition_point(|&s| s < t);
        if hi == 0 {
            return self.traj.states[0][i];
        }
        if hi >= times.len() {
            return self.traj.states[times.len() - 1][i];
        }
        let (ta, tb) = (times[hi - 1], times[hi]);
        let (a, b) = (self.traj.states[hi - 1][i], self.traj.states[hi][i]);
        if tb == t {
            return b;
        }
        a + (t - ta) / (tb - ta) * (b - a)
    }
}

/// Runs one replicate and accumulates statistics at every post-burn-in step.
pub fn simulate_with_stats(
    model: &ModelSpec,
    initial: &dyn History,
    config: &SimConfig,
    face: Face,
    replicate: u64,
) -> Result<(Trajectory, OccupationStats), SimError> {
    config.validate(model)?;
    let steps = config.steps(model);
    let burn = config.burn_in_steps(model);
    let mut acc = OccupationAccumulator::new(
        Layout::new(model, face),
        config.resolved_dt(model),
        burn,
        steps - burn,
        config.batches,
    );
    let mut noise = BrownianStream::new(config.seed, replicate, model.drivers());
    let traj = integrate_with(model, initial, config, face, &mut noise, &mut acc)?;
    Ok((traj, acc.finish()))
}
