use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Source of Brownian increments indexed by step.
///
/// Implementations must be deterministic in `step`: asking twice for the same
/// step yields the same vector.
pub trait NoiseSource {
    fn increments(&mut self, step: u64, dt: f64, out: &mut [f64]);
}

/// Counter-based Gaussian stream for one `(seed, replicate)` pair.
///
/// The replicate index selects a ChaCha stream, so streams never overlap.
/// Every step consumes a fixed number of words, which makes any step reachable
/// by seeking.
#[derive(Clone, Debug)]
pub struct BrownianStream {
    rng: ChaCha12Rng,
    drivers: usize,
    next_step: u64,
}

const TWO_PI: f64 = std::f64::consts::TAU;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

impl BrownianStream {
    pub fn new(seed: u64, replicate: u64, drivers: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(replicate);
        BrownianStream { rng, drivers, next_step: 0 }
    }

    pub fn drivers(&self) -> usize {
        self.drivers
    }

    fn words_per_step(&self) -> u128 {
        // two u64 per Box–Muller pair
        4 * self.drivers.div_ceil(2) as u128
    }

    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
        self.next_step = step;
    }

    /// Standard normals for the next step.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        let m = self.drivers;
        let mut k = 0;
        while k < m {
            let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * INV_2_53;
            let u2 = (self.rng.next_u64() >> 11) as f64 * INV_2_53;
            let rad = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (TWO_PI * u2).sin_cos();
            out[k] = rad * c;
            if k + 1 < m {
                out[k + 1] = rad * s;
            }
            k += 2;
        }
        self.next_step += 1;
    }
}

impl NoiseSource for BrownianStream {
    fn increments(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        if step != self.next_step {
            self.seek(step);
        }
        self.next_normals(out);
        let s = dt.sqrt();
        for v in out.iter_mut() {
            *v *= s;
        }
    }
}

/// `m` independent `N(0, dt)` draws from the next step of `stream`.
pub fn brownian_increments(stream: &mut BrownianStream, m: usize, dt: f64) -> Vec<f64> {
    assert_eq!(m, stream.drivers(), "driver count must match the stream");
    assert!(dt > 0.0, "dt must be positive");
    let step = stream.next_step;
    let mut out = vec![0.0; m];
    stream.increments(step, dt, &mut out);
    out
}

/// Coarse increments built by summing `factor` consecutive fine increments of
/// another source, so a coarse and a refined run share one Brownian path.
pub struct Coarsened<S> {
    pub inner: S,
    pub factor: u64,
    buf: Vec<f64>,
}

impl<S: NoiseSource> Coarsened<S> {
    pub fn new(inner: S, factor: u64, drivers: usize) -> Self {
        assert!(factor >= 1);
        Coarsened { inner, factor, buf: vec![0.0; drivers] }
    }
}

impl<S: NoiseSource> NoiseSource for Coarsened<S> {
    fn increments(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        out.fill(0.0);
        let fine = dt / self.factor as f64;
        for k in 0..self.factor {
            self.inner.increments(step * self.factor + k, fine, &mut self.buf);
            for (o, b) in out.iter_mut().zip(&self.buf) {
                *o += b;
            }
        }
    }
}

impl<S: NoiseSource + ?Sized> NoiseSource for &mut S {
    fn increments(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        (**self).increments(step, dt, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_one_million_draws() {
        let dt = 0.01;
        let mut s = BrownianStream::new(7, 0, 1);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = brownian_increments(&mut s, 1, dt)[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn seeking_reproduces_steps() {
        let mut a = BrownianStream::new(11, 3, 3);
        let mut first = vec![0.0; 3];
        let mut later = vec![0.0; 3];
        for step in 0..10 {
            a.increments(step, 0.5, &mut first);
        }
        a.increments(4, 0.5, &mut later);
        let mut b = BrownianStream::new(11, 3, 3);
        let mut again = vec![0.0; 3];
        b.increments(4, 0.5, &mut again);
        assert_eq!(later, again);
    }

    #[test]
    fn replicates_use_distinct_streams() {
        let mut a = BrownianStream::new(1, 0, 2);
        let mut b = BrownianStream::new(1, 1, 2);
        let x = brownian_increments(&mut a, 2, 1.0);
        let y = brownian_increments(&mut b, 2, 1.0);
        assert_ne!(x, y);
    }

    #[test]
    fn coarsened_sums_fine_pairs() {
        let fine = BrownianStream::new(5, 0, 2);
        let mut coarse = Coarsened::new(fine, 2, 2);
        let mut c = vec![0.0; 2];
        coarse.increments(3, 1.0, &mut c);
        let mut f = BrownianStream::new(5, 0, 2);
        let mut x = vec![0.0; 2];
        let mut y = vec![0.0; 2];
        f.increments(6, 0.5, &mut x);
        f.increments(7, 0.5, &mut y);
        assert_eq!(c, vec![x[0] + y[0], x[1] + y[1]]);
    }
}
