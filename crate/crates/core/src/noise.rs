//! Seeded randomness.
//!
//! Every stream is counter-based: a 64-bit key is derived from
//! `(seed, stream tag, indices…)` and the generator output is a mixing
//! function of `key + counter·φ`. Consequences:
//!
//! * the environment path `W` is a function of `(seed, dt, steps, d)` only,
//!   so populations of any size see the same `W`;
//! * sheet samples are a function of `(seed, step, cell)`, independent of
//!   query order, so solvers may skip cells;
//! * replicates use [`replicate_seed`] and never share streams.
//!
//! Stream tags are listed in [`stream`].

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Disjoint stream tags.
pub mod stream {
    pub const ENVIRONMENT: u64 = 0x57;
    pub const PRIVATE: u64 = 0x42;
    pub const SHEET: u64 = 0x5348;
    pub const INITIAL: u64 = 0x1417;
    pub const LIFETIME: u64 = 0x5A45;
    pub const SNAKE_BRANCH: u64 = 0x5342;
    pub const SNAKE_ROOT: u64 = 0x5352;
    pub const DUAL: u64 = 0xD0A1;
    pub const SYNTHETIC: u64 = 0x5359;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splitmix-style mixer used for all key and seed derivation.
#[inline]
pub fn derive_key(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(seed.wrapping_add(GOLDEN)), |k, &p| mix64(k ^ p.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Seed of replicate `index`: `mix(seed ⊕ index)`.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(GOLDEN)))
}

/// Counter-based generator: output `k` is `mix64(key + k·φ)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn for_stream(seed: u64, parts: &[u64]) -> Self {
        Self::new(derive_key(seed, parts))
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential with the given mean.
    #[inline]
    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * self.uniform().ln()
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let z = self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        mix64(z)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

/// Realized environment path: Gaussian increments with covariance `dt·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    seed: u64,
    dt: f64,
    steps: usize,
    dim: usize,
    increments: Vec<f64>,
}

/// Materializes the environment path `W` for `(seed, dt, steps, d)`.
pub fn make_noise_path(seed: u64, dt: f64, steps: usize, dim: usize) -> Result<NoisePath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 || dim == 0 {
        return Err(Error::InvalidStep("need at least one step and one dimension".into()));
    }
    let mut rng = CounterRng::for_stream(seed, &[stream::ENVIRONMENT, dim as u64]);
    let sd = dt.sqrt();
    let increments = (0..steps * dim).map(|_| sd * rng.normal()).collect();
    Ok(NoisePath {
        seed,
        dt,
        steps,
        dim,
        increments,
    })
}

impl NoisePath {
    /// A path with every increment zero (switches the environment off).
    pub fn zero(dt: f64, steps: usize, dim: usize) -> Result<Self> {
        let mut p = make_noise_path(0, dt, steps, dim)?;
        p.increments.iter_mut().for_each(|v| *v = 0.0);
        Ok(p)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Increment over `[k·dt, (k+1)·dt]`.
    #[inline]
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn forward(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator + '_ {
        self.increments.chunks_exact(self.dim)
    }

    /// Increments in reverse index order: `steps−1, …, 0`.
    pub fn backward_view(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator + '_ {
        self.forward().rev()
    }

    /// `W(k·dt)` with `W(0) = 0`.
    pub fn value_at(&self, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for inc in self.forward().take(k) {
            for (a, b) in w.iter_mut().zip(inc) {
                *a += b;
            }
        }
        w
    }

    /// Returns an error unless this path can drive `steps` steps of size `dt`.
    pub fn check_covers(&self, dt: f64, steps: usize) -> Result<()> {
        if (self.dt - dt).abs() > 1e-12 * dt.max(self.dt) {
            return Err(Error::InvalidStep(format!(
                "environment path has dt = {}, solver uses dt = {dt}",
                self.dt
            )));
        }
        if steps > self.steps {
            return Err(Error::InsufficientEnvironmentPath {
                required: steps,
                available: self.steps,
            });
        }
        Ok(())
    }
}

/// Brownian-sheet cell increments: `N(0, dt·dx)` per `(step, cell)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SheetSource {
    seed: u64,
    dt: f64,
    dx: f64,
    steps: usize,
    cells: usize,
    amplitude: f64,
}

impl SheetSource {
    pub fn new(seed: u64, dt: f64, dx: f64, steps: usize, cells: usize) -> Result<Self> {
        if !(dt > 0.0) || !(dx > 0.0) {
            return Err(Error::InvalidStep(format!("sheet needs dt, dx > 0 (dt = {dt}, dx = {dx})")));
        }
        Ok(Self {
            seed,
            dt,
            dx,
            steps,
            cells,
            amplitude: 1.0,
        })
    }

    /// Same layout, every sample zero.
    pub fn silent(self) -> Self {
        Self { amplitude: 0.0, ..self }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn is_silent(&self) -> bool {
        self.amplitude == 0.0
    }

    /// Standard normal driving cell `(step, cell)`; no range check.
    #[inline]
    pub fn standard(&self, step: usize, cell: usize) -> f64 {
        self.amplitude * self.cell_rng(step, cell).normal()
    }

    /// Generator behind cell `(step, cell)`. Its first normal is
    /// [`SheetSource::standard`] (before scaling by the amplitude).
    #[inline]
    pub fn cell_rng(&self, step: usize, cell: usize) -> CounterRng {
        CounterRng::for_stream(self.seed, &[stream::SHEET, step as u64, cell as u64])
    }

    /// Sheet increment over cell `(step, cell)`.
    pub fn sheet_sample(&self, step: usize, cell: usize) -> Result<f64> {
        if step >= self.steps || cell >= self.cells {
            return Err(Error::OutOfRange(format!(
                "sheet cell ({step}, {cell}) outside {} x {}",
                self.steps, self.cells
            )));
        }
        Ok((self.dt * self.dx).sqrt() * self.standard(step, cell))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_is_reproducible() {
        let a = make_noise_path(7, 0.01, 100, 2).unwrap();
        let b = make_noise_path(7, 0.01, 100, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_noise_path(8, 0.01, 100, 2).unwrap());
    }

    #[test]
    fn rejects_bad_step() {
        assert!(matches!(make_noise_path(1, 0.0, 10, 1), Err(Error::InvalidStep(_))));
        assert!(matches!(make_noise_path(1, -1.0, 10, 1), Err(Error::InvalidStep(_))));
    }

    #[test]
    fn increment_variance() {
        let w = make_noise_path(2024, 0.01, 10_000, 1).unwrap();
        let n = w.increments().len() as f64;
        let mean = w.increments().iter().sum::<f64>() / n;
        let var = w.increments().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0097..=0.0103).contains(&var), "variance {var}");
    }

    #[test]
    fn backward_view_properties() {
        let single = make_noise_path(3, 0.1, 1, 1).unwrap();
        assert_eq!(single.backward_view().collect::<Vec<_>>(), single.forward().collect::<Vec<_>>());

        let w = make_noise_path(3, 0.1, 50, 1).unwrap();
        let fwd: Vec<&[f64]> = w.forward().collect();
        let back: Vec<&[f64]> = w.backward_view().collect();
        let twice: Vec<&[f64]> = back.iter().rev().copied().collect();
        assert_eq!(fwd, twice);
        assert_eq!(back[0], w.increment(49));

        // constant integrand: forward (left-point) and backward (right-point) sums agree
        let g = 1.7;
        let forward: f64 = w.forward().map(|d| g * d[0]).sum();
        let backward: f64 = w.backward_view().map(|d| g * d[0]).sum();
        assert!((forward - backward).abs() < 1e-12);
        let plain_f: f64 = w.forward().map(|d| d[0]).sum();
        let plain_b: f64 = w.backward_view().map(|d| d[0]).sum();
        // exact only up to summation order
        assert!((plain_f - plain_b).abs() < 1e-13);
    }

    #[test]
    fn sheet_determinism_and_range() {
        let s = SheetSource::new(11, 1e-3, 0.01, 100, 50).unwrap();
        assert_eq!(s.sheet_sample(4, 9).unwrap(), s.sheet_sample(4, 9).unwrap());
        assert!(matches!(s.sheet_sample(100, 0), Err(Error::OutOfRange(_))));
        assert!(matches!(s.sheet_sample(0, 50), Err(Error::OutOfRange(_))));
        assert_eq!(s.silent().sheet_sample(3, 3).unwrap(), 0.0);
    }

    #[test]
    fn sheet_variance_and_independence() {
        let (dt, dx) = (1e-3, 0.02);
        let s = SheetSource::new(5, dt, dx, 10_000, 10).unwrap();
        let pooled: Vec<f64> = (0..10_000).flat_map(|k| (0..10).map(move |c| (k, c))).map(|(k, c)| s.sheet_sample(k, c).unwrap()).collect();
        let n = pooled.len() as f64;
        let var = pooled.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var / (dt * dx) - 1.0).abs() < 0.03, "variance ratio {}", var / (dt * dx));

        let steps = 10_000;
        let cov = (0..steps)
            .map(|k| s.sheet_sample(k, 2).unwrap() * s.sheet_sample(k, 7).unwrap())
            .sum::<f64>()
            / steps as f64;
        assert!(cov.abs() <= 3.0 * (dt * dx) / (steps as f64).sqrt(), "cov {cov}");
    }

    #[test]
    fn replicate_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| replicate_seed(42, i)).collect();
        assert_eq!(seeds.len(), 10_000);
    }
}
