//! Branching particle system driven by a shared environment.
//!
//! Each particle carries mass `2h`. The initial population is
//! Poisson(`μ(ℝ^d)/(2h)`) with positions drawn from `μ/μ(ℝ^d)`, so
//! `E⟨X₀,1⟩ = μ(ℝ^d)`. Lifetimes are exponential with mean `2h/γ`, where `γ`
//! is the model's branching rate; at death a particle is replaced by 0 or 2
//! children at its position with probability ½ each. With this choice the
//! total mass has quadratic variation `γ∫⟨X_s,1⟩ds`.
//!
//! Motion is Euler–Maruyama, `Δη = bΔt + σ₁ΔW + σ₂ΔB_i`, where the `ΔW`
//! of a step is the same for every particle.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::measure::AtomicMeasure;
use crate::model::Coefficients;
use crate::noise::{stream, CounterRng, NoisePath};
use crate::{Error, Result};

pub const DEFAULT_POPULATION_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    /// Branching scale `h`.
    pub h: f64,
    #[serde(default = "default_cap")]
    pub population_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_POPULATION_CAP
}

impl ParticleConfig {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            population_cap: DEFAULT_POPULATION_CAP,
        }
    }
}

/// Live particles of one replicate.
#[derive(Debug, Clone)]
pub struct ParticlePopulation {
    dim: usize,
    positions: Vec<f64>,
    residual: Vec<f64>,
    ids: Vec<u64>,
    h: f64,
    lifetime_mean: f64,
    time: f64,
    next_id: u64,
    cap: usize,
    motion: CounterRng,
    branching: CounterRng,
}

/// Draws the initial population for `μ`.
pub fn init_population(
    mu: &AtomicMeasure,
    cfg: &ParticleConfig,
    branching_rate: f64,
    seed: u64,
) -> Result<ParticlePopulation> {
    if !(cfg.h > 0.0) {
        return Err(Error::InvalidParameter(format!("h must be positive, got {}", cfg.h)));
    }
    if !(branching_rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "branching rate must be positive, got {branching_rate}"
        )));
    }
    let dim = mu.dim();
    let mut init = CounterRng::for_stream(seed, &[stream::INITIAL]);
    let mut pop = ParticlePopulation {
        dim,
        positions: Vec::new(),
        residual: Vec::new(),
        ids: Vec::new(),
        h: cfg.h,
        lifetime_mean: 2.0 * cfg.h / branching_rate,
        time: 0.0,
        next_id: 0,
        cap: cfg.population_cap,
        motion: CounterRng::for_stream(seed, &[stream::PRIVATE]),
        branching: CounterRng::for_stream(seed, &[stream::LIFETIME]),
    };
    let total = mu.total_mass();
    if total <= 0.0 || mu.is_empty() {
        return Ok(pop);
    }
    let intensity = total / (2.0 * cfg.h);
    let count = Poisson::new(intensity)
        .map_err(|e| Error::InvalidParameter(format!("Poisson intensity {intensity}: {e}")))?
        .sample(&mut init) as usize;
    if count > pop.cap {
        return Err(Error::PopulationExplosion { cap: pop.cap });
    }
    let cumulative: Vec<f64> = mu
        .masses()
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect();
    pop.positions.reserve(count * dim);
    for _ in 0..count {
        let u = init.uniform() * total;
        let k = cumulative.partition_point(|c| *c < u).min(mu.len() - 1);
        pop.positions.extend_from_slice(mu.position(k));
        let life = pop.branching.exponential(pop.lifetime_mean);
        pop.residual.push(life);
        pop.ids.push(pop.next_id);
        pop.next_id += 1;
    }
    Ok(pop)
}

impl ParticlePopulation {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn per_particle_mass(&self) -> f64 {
        2.0 * self.h
    }

    pub fn lifetime_mean(&self) -> f64 {
        self.lifetime_mean
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn residual_lifetimes(&self) -> &[f64] {
        &self.residual
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn total_mass(&self) -> f64 {
        self.per_particle_mass() * self.len() as f64
    }
}

/// Advances the population by one step using environment increment `step` of `w`.
pub fn step_population(
    pop: &mut ParticlePopulation,
    c: &Coefficients,
    w: &NoisePath,
    step: usize,
    dt: f64,
) -> Result<()> {
    let limit = pop.h / 10.0;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, limit });
    }
    if c.dim() != pop.dim || w.dim() != pop.dim {
        return Err(Error::DimensionMismatch {
            expected: pop.dim,
            got: if c.dim() != pop.dim { c.dim() } else { w.dim() },
        });
    }
    w.check_covers(dt, step + 1)?;
    let d = pop.dim;
    let dw = w.increment(step);
    let sd = dt.sqrt();

    let mut b = vec![0.0; d];
    let mut s1 = vec![0.0; d * d];
    let mut s2 = vec![0.0; d * d];
    let mut db = vec![0.0; d];
    let constant = c.is_constant();
    if constant {
        c.drift_into(&vec![0.0; d], &mut b);
        c.sigma1_into(&vec![0.0; d], &mut s1);
        c.sigma2_into(&vec![0.0; d], &mut s2);
    }
    for x in pop.positions.chunks_exact_mut(d) {
        if !constant {
            c.drift_into(x, &mut b);
            c.sigma1_into(x, &mut s1);
            c.sigma2_into(x, &mut s2);
        }
        for v in db.iter_mut() {
            *v = sd * pop.motion.normal();
        }
        euler_step(x, &b, &s1, &s2, dw, &db, dt);
    }

    // Deaths are resolved at the end of the step, children start at the
    // parent's end-of-step position.
    let n = pop.residual.len();
    let mut write = 0;
    // slots at index >= read are untouched while `read` is visited, so a
    // branching parent's position is copied out right there
    let mut parents: Vec<f64> = Vec::new();
    for read in 0..n {
        let r = pop.residual[read] - dt;
        if r > 0.0 {
            pop.residual[write] = r;
            if write != read {
                pop.ids[write] = pop.ids[read];
                pop.positions.copy_within(read * d..(read + 1) * d, write * d);
            }
            write += 1;
        } else if pop.branching.uniform() < 0.5 {
            parents.extend_from_slice(&pop.positions[read * d..(read + 1) * d]);
        }
    }
    pop.residual.truncate(write);
    pop.ids.truncate(write);
    pop.positions.truncate(write * d);
    if write + 2 * (parents.len() / d) > pop.cap {
        return Err(Error::PopulationExplosion { cap: pop.cap });
    }
    for parent in parents.chunks_exact(d) {
        for _ in 0..2 {
            pop.positions.extend_from_slice(parent);
            let life = pop.branching.exponential(pop.lifetime_mean);
            pop.residual.push(life);
            pop.ids.push(pop.next_id);
            pop.next_id += 1;
        }
    }
    pop.time += dt;
    Ok(())
}

fn euler_step(x: &mut [f64], b: &[f64], s1: &[f64], s2: &[f64], dw: &[f64], db: &[f64], dt: f64) {
    let d = x.len();
    for i in 0..d {
        let mut inc = b[i] * dt;
        for j in 0..d {
            inc += s1[i * d + j] * dw[j] + s2[i * d + j] * db[j];
        }
        x[i] += inc;
    }
}

/// `X^h = 2h Σ δ_{η_i}`.
pub fn empirical_measure(pop: &ParticlePopulation) -> AtomicMeasure {
    let mut m = AtomicMeasure::with_capacity(pop.dim, pop.len());
    let mass = pop.per_particle_mass();
    for x in pop.positions.chunks_exact(pop.dim) {
        m.push(x, mass).expect("positions have the population's dimension");
    }
    m
}

/// `⟨m, f⟩`.
pub fn integrate(m: &AtomicMeasure, f: impl Fn(&[f64]) -> f64) -> f64 {
    m.integrate(f)
}

/// Runs one replicate for `steps` steps of size `dt` and returns `X^h` at
/// each requested step index (0 is the initial state). `readout_steps` must
/// be nondecreasing.
pub fn simulate(
    c: &Coefficients,
    mu: &AtomicMeasure,
    cfg: &ParticleConfig,
    w: &NoisePath,
    dt: f64,
    readout_steps: &[usize],
    seed: u64,
) -> Result<Vec<AtomicMeasure>> {
    if readout_steps.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::InvalidParameter("readout steps must be nondecreasing".into()));
    }
    let last = readout_steps.last().copied().unwrap_or(0);
    w.check_covers(dt, last)?;
    let mut pop = init_population(mu, cfg, c.branching_rate(), seed)?;
    let mut out = Vec::with_capacity(readout_steps.len());
    let mut next = readout_steps.iter().peekable();
    for step in 0..=last {
        while next.peek().is_some_and(|&&k| k == step) {
            out.push(empirical_measure(&pop));
            next.next();
        }
        if step == last {
            break;
        }
        if pop.is_empty() {
            // absorbed: remaining readouts are the zero measure
            for _ in next.by_ref() {
                out.push(AtomicMeasure::new(pop.dim));
            }
            break;
        }
        step_population(&mut pop, c, w, step, dt)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_coefficients, CoefficientSpec};
    use crate::noise::make_noise_path;

    fn coeffs(b: f64, s1: f64, s2: f64) -> Coefficients {
        let mut spec = CoefficientSpec::constant_1d(b, s1, s2);
        if s2 == 0.0 {
            spec.delta = 1e-300;
        }
        make_coefficients(&spec).unwrap()
    }

    #[test]
    fn dirac_initial_condition() {
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let pop = init_population(&mu, &ParticleConfig::new(0.005), 1.0, 1).unwrap();
        assert!(pop.len() > 50 && pop.len() < 150);
        assert!((0..pop.len()).all(|i| pop.position(i) == [0.0]));
        let m = empirical_measure(&pop);
        assert!(m.masses().iter().all(|&w| (w - 0.01).abs() < 1e-15));
        assert!(pop.residual_lifetimes().iter().all(|&r| r > 0.0));
    }

    #[test]
    fn empty_measure_gives_empty_population() {
        let mu = AtomicMeasure::new(1);
        let pop = init_population(&mu, &ParticleConfig::new(0.01), 1.0, 1).unwrap();
        assert!(pop.is_empty());
        assert_eq!(empirical_measure(&pop).total_mass(), 0.0);
    }

    #[test]
    fn initial_count_is_poisson() {
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let cfg = ParticleConfig::new(0.01);
        let n = 1000;
        let mean = (0..n)
            .map(|i| init_population(&mu, &cfg, 1.0, i).unwrap().len() as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 50.0).abs() <= 3.0 * (50.0f64 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn empirical_measure_mass() {
        let mut mu = AtomicMeasure::new(1);
        mu.push(&[0.0], 1.0).unwrap();
        let mut pop = init_population(&mu, &ParticleConfig::new(0.5), 1.0, 3).unwrap();
        pop.positions = vec![0.0, 1.0, 2.0];
        pop.residual = vec![1.0; 3];
        pop.ids = vec![0, 1, 2];
        let m = empirical_measure(&pop);
        assert_eq!(m.total_mass(), 3.0);
        assert_eq!(m.total_mass(), pop.per_particle_mass() * pop.len() as f64);
    }

    #[test]
    fn noiseless_drift_is_deterministic() {
        let mut x = [0.25, -1.0];
        let zero = [0.0; 4];
        euler_step(&mut x, &[1.0, 1.0], &zero, &zero, &[0.3, -0.2], &[0.7, 0.1], 0.01);
        assert!((x[0] - 0.26).abs() < 1e-15 && (x[1] + 0.99).abs() < 1e-15);
    }

    #[test]
    fn lifetimes_count_down() {
        let c = coeffs(0.0, 0.0, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let mut pop = init_population(&mu, &ParticleConfig::new(0.01), 1.0, 2).unwrap();
        pop.residual.iter_mut().for_each(|r| *r = 0.5);
        let w = make_noise_path(1, 1e-3, 10, 1).unwrap();
        let n = pop.len();
        for step in 0..10 {
            step_population(&mut pop, &c, &w, step, 1e-3).unwrap();
        }
        assert_eq!(pop.len(), n);
        assert!(pop.residual_lifetimes().iter().all(|&r| (r - 0.49).abs() < 1e-12));
    }

    #[test]
    fn children_start_at_their_parent() {
        // the dying parent sits in slot 0; survivors are compacted over it
        let c = coeffs(0.0, 0.0, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let w = make_noise_path(1, 1e-6, 1, 1).unwrap();
        let mut branched = 0;
        for seed in 0..40 {
            let mut pop = init_population(&mu, &ParticleConfig::new(0.01), 1.0, seed).unwrap();
            pop.positions = vec![0.0, 10.0, 20.0, 30.0];
            pop.residual = vec![1e-9, 1.0, 1.0, 1.0];
            pop.ids = vec![0, 1, 2, 3];
            step_population(&mut pop, &c, &w, 0, 1e-6).unwrap();
            if pop.len() == 5 {
                branched += 1;
                for k in 3..5 {
                    assert!(pop.position(k)[0].abs() < 0.1, "child at {}", pop.position(k)[0]);
                }
                for (k, x) in [10.0, 20.0, 30.0].into_iter().enumerate() {
                    assert!((pop.position(k)[0] - x).abs() < 0.1);
                }
            }
        }
        assert!(branched > 0);
    }

    #[test]
    fn step_guard() {
        let c = coeffs(0.0, 0.0, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let mut pop = init_population(&mu, &ParticleConfig::new(0.01), 1.0, 1).unwrap();
        let w = make_noise_path(1, 0.002, 10, 1).unwrap();
        assert!(matches!(
            step_population(&mut pop, &c, &w, 0, 0.002),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn population_cap_is_enforced() {
        let c = coeffs(0.0, 0.0, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let cfg = ParticleConfig {
            h: 0.01,
            population_cap: 10,
        };
        let w = make_noise_path(1, 0.001, 10, 1).unwrap();
        let r = simulate(&c, &mu, &cfg, &w, 0.001, &[0, 10], 4);
        assert!(matches!(r, Err(Error::PopulationExplosion { cap: 10 })));
    }

    #[test]
    fn offspring_mean_is_one() {
        // every particle dies in the first step
        let c = coeffs(0.0, 0.0, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let cfg = ParticleConfig::new(0.001);
        let w = make_noise_path(1, 1e-4, 1, 1).unwrap();
        let (mut before, mut after) = (0usize, 0usize);
        for seed in 0..200 {
            let mut pop = init_population(&mu, &cfg, 1.0, seed).unwrap();
            pop.residual.iter_mut().for_each(|r| *r = 1e-5);
            before += pop.len();
            step_population(&mut pop, &c, &w, 0, 1e-4).unwrap();
            assert!(pop.len().is_multiple_of(2));
            after += pop.len();
        }
        let ratio = after as f64 / before as f64;
        let se = 1.0 / (before as f64).sqrt();
        assert!((ratio - 1.0).abs() < 4.0 * se, "ratio {ratio}");
    }
}
