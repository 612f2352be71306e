use serde::{Deserialize, Serialize};

use crate::model::History;

/// A sampled segment on the grid `-r = -n_r·dt, …, -dt, 0`.
///
/// `values` is species-major; within a species index 0 is the oldest point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub n: usize,
    pub n_r: usize,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn constant(x: &[f64], n_r: usize, dt: f64) -> Self {
        Segment::from_fn(x.len(), n_r, dt, |i, _| x[i])
    }

    /// `f(i, s)` with `s ∈ [-r, 0]`.
    pub fn from_fn<F: Fn(usize, f64) -> f64>(n: usize, n_r: usize, dt: f64, f: F) -> Self {
        let mut values = Vec::with_capacity(n * (n_r + 1));
        for i in 0..n {
            for k in 0..=n_r {
                values.push(f(i, -((n_r - k) as f64) * dt));
            }
        }
        Segment { n, n_r, dt, values }
    }

    /// Samples any history on the grid of span `n_r·dt`.
    pub fn sample(h: &dyn History, n_r: usize, dt: f64) -> Self {
        Segment::from_fn(h.dim(), n_r, dt, |i, s| h.lagged(i, -s))
    }

    pub fn span(&self) -> f64 {
        self.n_r as f64 * self.dt
    }

    pub fn species(&self, i: usize) -> &[f64] {
        let w = self.n_r + 1;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn sup_distance(&self, other: &Segment) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn interpolate(points: impl Fn(usize) -> f64, n_r: usize, dt: f64, lag: f64) -> f64 {
    // `points(k)` is the value at time -k·dt
    if n_r == 0 || lag <= 0.0 {
        return points(0);
    }
    let pos = lag / dt;
    let k = pos.floor();
    let ku = k as usize;
    if ku >= n_r {
        return points(n_r);
    }
    let frac = pos - k;
    if frac == 0.0 {
        return points(ku);
    }
    let a = points(ku);
    let b = points(ku + 1);
    a + frac * (b - a)
}

impl History for Segment {
    fn dim(&self) -> usize {
        self.n
    }

    fn current(&self, i: usize) -> f64 {
        self.values[i * (self.n_r + 1) + self.n_r]
    }

    fn lagged(&self, i: usize, lag: f64) -> f64 {
        let row = self.species(i);
        let n_r = self.n_r;
        interpolate(|k| row[n_r - k], n_r, self.dt, lag)
    }
}

/// Ring buffer of the last `n_r + 1` states, time-major.
#[derive(Clone, Debug)]
pub(crate) struct RingHistory {
    n: usize,
    n_r: usize,
    dt: f64,
    slots: Vec<f64>,
    head: usize,
}

impl RingHistory {
    pub fn new(n: usize, n_r: usize, dt: f64) -> Self {
        RingHistory { n, n_r, dt, slots: vec![0.0; n * (n_r + 1)], head: n_r }
    }

    pub fn cap(&self) -> usize {
        self.n_r + 1
    }

    /// Loads a sampled segment; slot order follows the segment's time order.
    pub fn load(&mut self, seg: &dyn History) {
        for k in 0..=self.n_r {
            let lag = (self.n_r - k) as f64 * self.dt;
            for i in 0..self.n {
                self.slots[k * self.n + i] = seg.lagged(i, lag);
            }
        }
        self.head = self.n_r;
    }

    /// Advances one step; the new newest slot is filled from `x`.
    pub fn push(&mut self, x: &[f64]) {
        self.head = (self.head + 1) % self.cap();
        let h = self.head * self.n;
        self.slots[h..h + self.n].copy_from_slice(x);
    }

    fn at(&self, back: usize, i: usize) -> f64 {
        let cap = self.cap();
        let slot = (self.head + cap - back) % cap;
        self.slots[slot * self.n + i]
    }

    pub fn to_segment(&self) -> Segment {
        Segment::from_fn(self.n, self.n_r, self.dt, |i, s| {
            let back = (-s / self.dt).round() as usize;
            self.at(back, i)
        })
    }
}

impl History for RingHistory {
    fn dim(&self) -> usize {
        self.n
    }

    fn current(&self, i: usize) -> f64 {
        self.slots[self.head * self.n + i]
    }

    fn lagged(&self, i: usize, lag: f64) -> f64 {
        interpolate(|k| self.at(k, i), self.n_r, self.dt, lag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_grid_and_interpolation() {
        let seg = Segment::from_fn(1, 4, 0.25, |_, s| 1.0 + s);
        assert_eq!(seg.current(0), 1.0);
        assert_eq!(seg.lagged(0, 1.0), 0.0);
        assert!((seg.lagged(0, 0.3) - 0.7).abs() < 1e-15);
        assert_eq!(seg.lagged(0, 5.0), 0.0);
    }

    #[test]
    fn ring_matches_segment_after_pushes() {
        let mut ring = RingHistory::new(2, 3, 0.5);
        ring.load(&Segment::from_fn(2, 3, 0.5, |i, s| i as f64 + s));
        ring.push(&[10.0, 20.0]);
        assert_eq!(ring.current(0), 10.0);
        assert_eq!(ring.lagged(0, 0.5), 0.0);
        assert_eq!(ring.lagged(1, 1.5), 1.0 - 1.0);
        assert!((ring.lagged(0, 0.25) - 5.0).abs() < 1e-15);
        let seg = ring.to_segment();
        assert_eq!(seg.species(0), &[-1.0, -0.5, 0.0, 10.0]);
    }
}
