//! The built-in cross-validation suite run by `verify-all` and by the
//! `acceptance` test target.
//!
//! Expensive simulation batches are shared between criteria and computed
//! at most once per [`Suite`].

use std::sync::OnceLock;
use std::time::Instant;

use flowproc_core::analysis::{box_occupancy, estimate_holder, fractional_field, mc_summary, Summary};
use flowproc_core::duality::{dual_moment_estimate, exact_second_moment, TensorFunction};
use flowproc_core::loglaplace::{conditional_laplace, solve_backward};
use flowproc_core::measure::normal_cdf;
use flowproc_core::model::{make_coefficients, CoefficientSpec};
use flowproc_core::noise::{derive_key, make_noise_path, replicate_seed, SheetSource};
use flowproc_core::par::{map_replicates, try_map_replicates, Execution};
use flowproc_core::particles::{simulate, ParticleConfig};
use flowproc_core::snake::{run_snake, support_diameter, SnakeConfig};
use flowproc_core::spde::{run_spde, SpdeConfig};
use flowproc_core::{AtomicMeasure, Coefficients, DensityField, Grid, Result, TestFunction};
use serde::Serialize;

pub const CRITERIA: [(u32, &str); 10] = [
    (1, "criticality"),
    (2, "variance law"),
    (3, "first-moment profile"),
    (4, "duality cross-check"),
    (5, "conditional log-Laplace coupling"),
    (6, "spde-particle agreement"),
    (7, "snake representation"),
    (8, "hoelder regularity"),
    (9, "singularity proxy"),
    (10, "determinism and noise statistics"),
];

const PARTICLE_H: f64 = 0.01;
const PARTICLE_DT: f64 = 1e-3;
/// Readout times of the shared particle batch.
const BATCH_TIMES: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
const PROFILE_BINS: usize = 50;
const PROFILE_RANGE: (f64, f64) = (-5.0, 5.0);

/// One compared quantity inside a criterion.
#[derive(Debug, Clone, Serialize)]
pub struct Measurement {
    pub quantity: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub measurements: Vec<Measurement>,
    /// Error text when the criterion could not be evaluated.
    pub error: Option<String>,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} #{} {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds
        );
        for m in &self.measurements {
            s.push_str(&format!(
                "; {} = {} vs {} tol {}{}",
                m.quantity,
                num(m.value),
                num(m.target),
                num(m.tolerance),
                if m.pass { "" } else { " !" }
            ));
        }
        if let Some(e) = &self.error {
            s.push_str(&format!("; error: {e}"));
        }
        s
    }
}

fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.5}")
    }
}

/// `|value − target| ≤ tolerance`.
fn within(quantity: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Measurement {
    Measurement {
        quantity: quantity.into(),
        value,
        target,
        tolerance,
        pass: (value - target).abs() <= tolerance,
    }
}

/// `value ≤ bound`, reported with target 0.
fn at_most(quantity: impl Into<String>, value: f64, bound: f64) -> Measurement {
    Measurement {
        quantity: quantity.into(),
        value,
        target: 0.0,
        tolerance: bound,
        pass: value <= bound,
    }
}

/// `value ∈ [lo, hi]`, reported as midpoint ± half-width.
fn inside(quantity: impl Into<String>, value: f64, lo: f64, hi: f64) -> Measurement {
    Measurement {
        quantity: quantity.into(),
        value,
        target: 0.5 * (lo + hi),
        tolerance: 0.5 * (hi - lo),
        pass: value >= lo && value <= hi,
    }
}

fn combined_se(a: &Summary, b: &Summary) -> f64 {
    (a.se * a.se + b.se * b.se).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn coefficients(sigma1: f64, sigma2: f64, rate: f64) -> Result<Coefficients> {
    make_coefficients(&CoefficientSpec::constant_1d(0.0, sigma1, sigma2).with_branching_rate(rate))
}

fn origin() -> AtomicMeasure {
    AtomicMeasure::dirac(&[0.0], 1.0).expect("valid atom")
}

fn step_of(t: f64) -> usize {
    (t / PARTICLE_DT).round() as usize
}

struct ParticleBatch {
    /// `masses[r][k]` is the total mass of replicate `r` at `BATCH_TIMES[k]`.
    masses: Vec<[f64; 4]>,
    /// Mean mass per profile bin at t = 0.5.
    profile: Vec<f64>,
    seconds: f64,
}

struct CouplingBatch {
    particle_phi: Vec<f64>,
    spde_phi: Vec<f64>,
    fields: Vec<DensityField>,
}

pub struct Suite {
    seed: u64,
    cap: Option<usize>,
    exec: Execution,
    particles: OnceLock<std::result::Result<ParticleBatch, String>>,
    coupling: OnceLock<std::result::Result<CouplingBatch, String>>,
}

impl Suite {
    /// `cap` bounds every replicate count (for smoke runs).
    pub fn new(seed: u64, cap: Option<usize>, exec: Execution) -> Self {
        Self {
            seed,
            cap,
            exec,
            particles: OnceLock::new(),
            coupling: OnceLock::new(),
        }
    }

    fn reps(&self, n: usize) -> usize {
        self.cap.map_or(n, |c| c.min(n)).max(2)
    }

    fn key(&self, parts: &[u64]) -> u64 {
        derive_key(self.seed, parts)
    }

    pub fn run_all(&self) -> Vec<CheckOutcome> {
        CRITERIA.iter().map(|&(id, _)| self.run(id)).collect()
    }

    pub fn run(&self, id: u32) -> CheckOutcome {
        let name = CRITERIA
            .iter()
            .find(|c| c.0 == id)
            .map_or("unknown", |c| c.1)
            .to_string();
        let start = Instant::now();
        let result = match id {
            1 => self.criticality(),
            2 => self.variance_law(),
            3 => self.profile(),
            4 => self.duality(),
            5 => self.log_laplace(),
            6 => self.spde_agreement(),
            7 => self.snake(),
            8 => self.holder(),
            9 => self.singularity(),
            10 => self.determinism(),
            _ => Err(format!("no criterion {id}")),
        };
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(measurements) => CheckOutcome {
                id,
                name,
                pass: !measurements.is_empty() && measurements.iter().all(|m| m.pass),
                measurements,
                error: None,
                seconds,
            },
            Err(e) => CheckOutcome {
                id,
                name,
                pass: false,
                measurements: Vec::new(),
                error: Some(e),
                seconds,
            },
        }
    }

    fn particle_batch(&self) -> std::result::Result<&ParticleBatch, String> {
        self.particles
            .get_or_init(|| self.compute_particle_batch().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// b = 0, σ₁ = σ₂ = 1, μ = δ₀, h = 0.01, dt = 1e-3, read at BATCH_TIMES.
    fn compute_particle_batch(&self) -> Result<ParticleBatch> {
        let start = Instant::now();
        let c = coefficients(1.0, 1.0, 1.0)?;
        let mu = origin();
        let cfg = ParticleConfig::new(PARTICLE_H);
        let steps: Vec<usize> = BATCH_TIMES.iter().map(|&t| step_of(t)).collect();
        let last = *steps.last().expect("nonempty");
        let base = self.key(&[1]);
        let n = self.reps(2000);
        let (lo, hi) = PROFILE_RANGE;
        let width = (hi - lo) / PROFILE_BINS as f64;
        let per_rep = try_map_replicates(n, self.exec, |r| {
            let s = replicate_seed(base, r as u64);
            let w = make_noise_path(s, PARTICLE_DT, last, 1)?;
            let ms = simulate(&c, &mu, &cfg, &w, PARTICLE_DT, &steps, s)?;
            let mut masses = [0.0; 4];
            for (slot, m) in masses.iter_mut().zip(&ms) {
                *slot = m.total_mass();
            }
            let mut bins = vec![0.0; PROFILE_BINS];
            for (x, m) in ms[2].atoms() {
                let k = ((x[0] - lo) / width).floor();
                if k >= 0.0 && (k as usize) < PROFILE_BINS {
                    bins[k as usize] += m;
                }
            }
            Ok((masses, bins))
        })?;
        let mut profile = vec![0.0; PROFILE_BINS];
        for (_, bins) in &per_rep {
            for (p, b) in profile.iter_mut().zip(bins) {
                *p += b / n as f64;
            }
        }
        Ok(ParticleBatch {
            masses: per_rep.into_iter().map(|(m, _)| m).collect(),
            profile,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn mass_summary(&self, k: usize) -> std::result::Result<Summary, String> {
        let batch = self.particle_batch()?;
        let v: Vec<f64> = batch.masses.iter().map(|m| m[k]).collect();
        mc_summary(&v).map_err(|e| e.to_string())
    }

    fn criticality(&self) -> std::result::Result<Vec<Measurement>, String> {
        let batch = self.particle_batch()?;
        let s = self.mass_summary(3)?;
        // Var⟨X_1, 1⟩ = 1 under the martingale problem
        let tol = 3.0 * (1.0 / s.n as f64).sqrt();
        Ok(vec![
            within("mean total mass at t=1", s.mean, 1.0, tol),
            at_most("batch runtime [s]", batch.seconds, 120.0),
        ])
    }

    fn variance_law(&self) -> std::result::Result<Vec<Measurement>, String> {
        let s = self.mass_summary(3)?;
        Ok(vec![within("variance of total mass at t=1", s.variance, 1.0, 0.15)])
    }

    fn profile(&self) -> std::result::Result<Vec<Measurement>, String> {
        let batch = self.particle_batch()?;
        let (lo, hi) = PROFILE_RANGE;
        let width = (hi - lo) / PROFILE_BINS as f64;
        // a = σ₁² + σ₂² = 2, t = 0.5
        let sd = (2.0f64 * 0.5).sqrt();
        let mut l1 = 0.0;
        for (k, &p) in batch.profile.iter().enumerate() {
            let a = lo + k as f64 * width;
            l1 += (p - (normal_cdf((a + width) / sd) - normal_cdf(a / sd))).abs();
        }
        // mass outside the binned window
        l1 += 2.0 * normal_cdf(lo / sd);
        Ok(vec![at_most("L1 distance to N(0, at)", l1, 0.05)])
    }

    fn duality(&self) -> std::result::Result<Vec<Measurement>, String> {
        let err = |e: flowproc_core::Error| e.to_string();
        let c = coefficients(1.0, 1.0, 1.0).map_err(err)?;
        let grid = Grid::new(-6.0, 6.0, 0.05).map_err(err)?;
        let f0 = TensorFunction::ones(grid, 2).map_err(err)?;
        let dual = dual_moment_estimate(&c, &origin(), 2, &f0, 1.0, self.reps(10_000), self.key(&[4]), self.exec)
            .map_err(err)?;
        let exact = exact_second_moment(&c, &origin(), &TestFunction::One, &TestFunction::One, 1.0).map_err(err)?;
        let batch = self.particle_batch()?;
        let squares: Vec<f64> = batch.masses.iter().map(|m| m[3] * m[3]).collect();
        let p = mc_summary(&squares).map_err(err)?;
        Ok(vec![
            within("dual E<X_1,1>^2", dual.mean, 2.0, 3.0 * dual.se),
            within("closed-form E<X_1,1>^2", exact.mp_consistent, 2.0, 1e-9),
            within(
                "particle E<X_1,1>^2",
                p.mean,
                dual.mean,
                3.0 * (p.se * p.se + dual.se * dual.se).sqrt(),
            ),
        ])
    }

    fn log_laplace(&self) -> std::result::Result<Vec<Measurement>, String> {
        let err = |e: flowproc_core::Error| e.to_string();
        let start = Instant::now();
        let t = 0.5;
        let steps = step_of(t);
        let c = coefficients(0.5, 1.0, 2.0).map_err(err)?;
        let grid = Grid::new(-5.0, 5.0, 0.02).map_err(err)?;
        let plateau = TestFunction::Plateau { lo: -0.5, hi: 0.5, height: 1.0 };
        let terminal = DensityField::from_fn(grid, |x| plateau.eval1(x));
        let mu = origin();
        let cfg = ParticleConfig::new(PARTICLE_H);
        let paths = self.reps(30);
        let inner = self.reps(500);
        let mut rel = Vec::with_capacity(paths);
        for p in 0..paths {
            let w = make_noise_path(self.key(&[5, p as u64]), PARTICLE_DT, steps, 1).map_err(err)?;
            let sol = solve_backward(&c, &terminal, t, &w, PARTICLE_DT).map_err(err)?;
            let backward = conditional_laplace(&mu, &sol).map_err(err)?;
            let base = self.key(&[5, p as u64, 1]);
            let samples = try_map_replicates(inner, self.exec, |r| {
                let s = replicate_seed(base, r as u64);
                let m = simulate(&c, &mu, &cfg, &w, PARTICLE_DT, &[steps], s)?;
                Ok((-m[0].integrate(|x| plateau.eval(x))).exp())
            })
            .map_err(err)?;
            let forward = samples.iter().sum::<f64>() / inner as f64;
            rel.push((forward - backward).abs() / backward);
        }
        let mare = rel.iter().sum::<f64>() / rel.len() as f64;

        // σ₁ = 0: y solves y' = −y² near the centre of a wide plateau
        let c0 = coefficients(0.0, 1.0, 2.0).map_err(err)?;
        let wide = Grid::new(-10.0, 10.0, 0.02).map_err(err)?;
        let height = 1.0;
        let f = DensityField::from_fn(wide, |x| if x.abs() <= 5.0 { height } else { 0.0 });
        let w = make_noise_path(self.key(&[5, 999]), PARTICLE_DT, steps, 1).map_err(err)?;
        let sol = solve_backward(&c0, &f, t, &w, PARTICLE_DT).map_err(err)?;
        let value = conditional_laplace(&mu, &sol).map_err(err)?;
        let riccati = (-height / (1.0 + height * t)).exp();
        Ok(vec![
            at_most("mean abs relative error", mare, 0.10),
            within("Riccati exp(-c/(1+ct))", value, riccati, 0.02 * riccati),
            at_most("runtime [s]", start.elapsed().as_secs_f64(), 600.0),
        ])
    }

    fn coupling_batch(&self) -> std::result::Result<&CouplingBatch, String> {
        self.coupling
            .get_or_init(|| self.compute_coupling_batch().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// b = 0, σ₁ = 0.5, σ₂ = 1, φ = N(0, 0.5²) density, t = 0.5.
    fn compute_coupling_batch(&self) -> Result<CouplingBatch> {
        let c = coefficients(0.5, 1.0, 1.0)?;
        let mu = origin();
        let phi = coupling_phi();
        let t = 0.5;
        let n = self.reps(2000);
        let pcfg = ParticleConfig::new(PARTICLE_H);
        let pbase = self.key(&[6, 0]);
        let particle_phi = try_map_replicates(n, self.exec, |r| {
            let s = replicate_seed(pbase, r as u64);
            let w = make_noise_path(s, PARTICLE_DT, step_of(t), 1)?;
            let m = simulate(&c, &mu, &pcfg, &w, PARTICLE_DT, &[step_of(t)], s)?;
            Ok(m[0].integrate(|x| phi.eval(x)))
        })?;
        let scfg = SpdeConfig {
            x_min: -5.0,
            x_max: 5.0,
            dx: 0.01,
            dt: 2.5e-5,
            t_final: t,
            snapshot_times: Vec::new(),
            record_every: usize::MAX,
            safety_width: 0.5,
        };
        let sbase = self.key(&[6, 1]);
        let runs = try_map_replicates(n, self.exec, |r| {
            let s = replicate_seed(sbase, r as u64);
            let w = make_noise_path(s, scfg.dt, scfg.steps(), 1)?;
            let run = run_spde(&c, &mu, &scfg, &w, &[phi], s)?;
            let value = *run.functionals[0].last().expect("final record");
            Ok((value, run.final_field))
        })?;
        let (spde_phi, fields) = runs.into_iter().unzip();
        Ok(CouplingBatch {
            particle_phi,
            spde_phi,
            fields,
        })
    }

    fn spde_agreement(&self) -> std::result::Result<Vec<Measurement>, String> {
        let batch = self.coupling_batch()?;
        let p = mc_summary(&batch.particle_phi).map_err(|e| e.to_string())?;
        let s = mc_summary(&batch.spde_phi).map_err(|e| e.to_string())?;
        Ok(vec![
            within("SPDE mean <X_t,phi>", s.mean, p.mean, 3.0 * combined_se(&s, &p)),
            within("SPDE/particle variance ratio", s.variance / p.variance, 1.0, 0.15),
        ])
    }

    fn snake(&self) -> std::result::Result<Vec<Measurement>, String> {
        let err = |e: flowproc_core::Error| e.to_string();
        let c = coefficients(1.0, 1.0, 1.0).map_err(err)?;
        let mu = origin();
        let n = self.reps(2000);
        let ds = 1e-4;
        let run = |ds: f64, tag: u64| {
            let cfg = SnakeConfig {
                ds,
                h: 0.05,
                levels: vec![0.0, 0.25],
                horizon: 1e3,
            };
            let base = self.key(&[7, tag]);
            try_map_replicates(n, self.exec, |r| {
                let s = replicate_seed(base, r as u64);
                let w = make_noise_path(s, PARTICLE_DT, step_of(0.25), 1)?;
                let forest = run_snake(&c, &mu, &w, &cfg, s)?;
                let out = forest.readouts();
                Ok([out[0].measure.total_mass(), out[1].measure.total_mass(), support_diameter(&out[1].measure)])
            })
        };
        let coarse = run(ds, 0).map_err(err)?;
        let fine = run(ds / 2.0, 1).map_err(err)?;
        let mut out = Vec::new();
        for (k, t) in [(0usize, 0.0), (1, 0.25)] {
            let snake = mc_summary(&coarse.iter().map(|v| v[k]).collect::<Vec<_>>()).map_err(err)?;
            let particle = self.mass_summary(k)?;
            out.push(within(
                format!("snake mass mean t={t}"),
                snake.mean,
                particle.mean,
                3.0 * combined_se(&snake, &particle),
            ));
        }
        let d1 = median(coarse.iter().map(|v| v[2]).collect());
        let d2 = median(fine.iter().map(|v| v[2]).collect());
        out.push(within("diameter median ratio under ds halving", d2 / d1, 1.0, 0.15));
        Ok(out)
    }

    fn holder(&self) -> std::result::Result<Vec<Measurement>, String> {
        let err = |e: flowproc_core::Error| e.to_string();
        let mut out = Vec::new();
        let grid = Grid::from_nodes(0.0, 1.0 / 1024.0, 1025).map_err(err)?;
        for (k, h) in [0.3, 0.5, 0.7].into_iter().enumerate() {
            let fields = map_replicates(200, self.exec, |r| {
                fractional_field(grid, h, self.key(&[8, k as u64, r as u64]))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(err)?;
            let report = estimate_holder(&fields, &[]).map_err(err)?;
            out.push(within(format!("calibration H={h}"), report.exponent, h, 0.07));
        }
        let batch = self.coupling_batch()?;
        let report = estimate_holder(&batch.fields, &[]).map_err(err)?;
        out.push(inside("SPDE density exponent t=0.5", report.exponent, 0.35, 0.60));
        Ok(out)
    }

    fn singularity(&self) -> std::result::Result<Vec<Measurement>, String> {
        let err = |e: flowproc_core::Error| e.to_string();
        let c = make_coefficients(&CoefficientSpec::isotropic(2, 0.5, 1.0)).map_err(err)?;
        let mu = AtomicMeasure::dirac(&[0.0, 0.0], 1.0).map_err(err)?;
        let t = 0.5;
        let cfg = SnakeConfig {
            ds: 1e-4,
            h: 0.01,
            levels: vec![t],
            horizon: 1e3,
        };
        let n = self.reps(200);
        let base = self.key(&[9]);
        let decreasing = try_map_replicates(n, self.exec, |r| {
            let s = replicate_seed(base, r as u64);
            let w = make_noise_path(s, PARTICLE_DT, step_of(t), 2)?;
            let forest = run_snake(&c, &mu, &w, &cfg, s)?;
            let m = &forest.readouts()[0].measure;
            let mut v = [0.0; 3];
            for (slot, eps) in v.iter_mut().zip([0.1, 0.05, 0.025]) {
                *slot = box_occupancy(m, eps)?.1;
            }
            Ok(v[0] > v[1] && v[1] > v[2])
        })
        .map_err(err)?;
        let frac = decreasing.iter().filter(|&&d| d).count() as f64 / n as f64;
        Ok(vec![Measurement {
            quantity: "fraction strictly decreasing".into(),
            value: frac,
            target: 1.0,
            tolerance: 0.1,
            pass: frac >= 0.9,
        }])
    }

    fn determinism(&self) -> std::result::Result<Vec<Measurement>, String> {
        determinism_and_noise(self.key(&[10])).map_err(|e| e.to_string())
    }
}

fn coupling_phi() -> TestFunction {
    TestFunction::Gaussian { center: 0.0, sd: 0.5 }
}

fn bits(m: &AtomicMeasure) -> Vec<u64> {
    m.atoms()
        .flat_map(|(x, w)| x.iter().copied().chain(std::iter::once(w)).collect::<Vec<_>>())
        .map(f64::to_bits)
        .collect()
}

fn flag(quantity: &str, ok: bool) -> Measurement {
    Measurement {
        quantity: quantity.into(),
        value: f64::from(u8::from(ok)),
        target: 1.0,
        tolerance: 0.0,
        pass: ok,
    }
}

/// Kolmogorov–Smirnov distance of `z` to the standard normal.
fn ks_distance(mut z: Vec<f64>) -> f64 {
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal_cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn determinism_and_noise(seed: u64) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    let c = coefficients(0.5, 1.0, 1.0)?;
    let mu = origin();

    let w = make_noise_path(seed, PARTICLE_DT, 200, 1)?;
    let cfg = ParticleConfig::new(PARTICLE_H);
    let a = simulate(&c, &mu, &cfg, &w, PARTICLE_DT, &[200], seed)?;
    let b = simulate(&c, &mu, &cfg, &w, PARTICLE_DT, &[200], seed)?;
    out.push(flag("particle rerun bit-identical", bits(&a[0]) == bits(&b[0])));

    let scfg = SnakeConfig {
        ds: 1e-4,
        h: 0.05,
        levels: vec![0.2],
        horizon: 1e3,
    };
    let a = run_snake(&c, &mu, &w, &scfg, seed)?;
    let b = run_snake(&c, &mu, &w, &scfg, seed)?;
    out.push(flag(
        "snake rerun bit-identical",
        bits(&a.readouts()[0].measure) == bits(&b.readouts()[0].measure),
    ));

    let spcfg = SpdeConfig {
        x_min: -3.0,
        x_max: 3.0,
        dx: 0.02,
        dt: 1e-4,
        t_final: 0.02,
        snapshot_times: Vec::new(),
        record_every: usize::MAX,
        safety_width: 0.5,
    };
    let ws = make_noise_path(seed, spcfg.dt, spcfg.steps(), 1)?;
    let a = run_spde(&c, &mu, &spcfg, &ws, &[], seed)?;
    let b = run_spde(&c, &mu, &spcfg, &ws, &[], seed)?;
    let same = a.final_field.values().iter().map(|v| v.to_bits()).eq(b.final_field.values().iter().map(|v| v.to_bits()));
    out.push(flag("spde rerun bit-identical", same));

    let grid = Grid::new(-6.0, 6.0, 0.1)?;
    let f0 = TensorFunction::ones(grid, 2)?;
    let seq = dual_moment_estimate(&c, &mu, 2, &f0, 0.5, 200, seed, Execution::Sequential)?;
    let par = dual_moment_estimate(&c, &mu, 2, &f0, 0.5, 200, seed, Execution::Parallel)?;
    out.push(flag("dual sequential == parallel", seq.mean.to_bits() == par.mean.to_bits()));

    // W does not depend on the population it drives
    let before = w.increments().to_vec();
    let small = AtomicMeasure::dirac(&[0.0], 0.1)?;
    let large = AtomicMeasure::dirac(&[0.0], 10.0)?;
    simulate(&c, &small, &cfg, &w, PARTICLE_DT, &[200], seed)?;
    simulate(&c, &large, &cfg, &w, PARTICLE_DT, &[200], seed)?;
    let again = make_noise_path(seed, PARTICLE_DT, 200, 1)?;
    out.push(flag("W independent of population size", before == again.increments()));

    let w = make_noise_path(seed, 0.01, 10_000, 1)?;
    let var = mc_summary(w.increments())?.variance;
    out.push(inside("increment variance dt=0.01", var, 0.0097, 0.0103));

    let involution = w.backward_view().rev().eq(w.forward());
    out.push(flag("backward view reverses forward", involution));

    let (dt, dx) = (1e-3, 0.01);
    let sheet = SheetSource::new(seed, dt, dx, 10_000, 10)?;
    let mut pooled = Vec::with_capacity(100_000);
    for step in 0..10_000 {
        for cell in 0..10 {
            pooled.push(sheet.sheet_sample(step, cell)?);
        }
    }
    let var = mc_summary(&pooled)?.variance;
    out.push(within("sheet variance / (dt dx)", var / (dt * dx), 1.0, 0.03));
    let cov = (0..10_000)
        .map(|k| pooled[10 * k + 2] * pooled[10 * k + 7])
        .sum::<f64>()
        / 10_000.0;
    out.push(at_most("|sheet cross-cell covariance|", cov.abs(), 3.0 * dt * dx / 100.0));

    // asymptotic KS critical value at level 0.01; one retry on a fresh seed
    let critical = 1.6276 / 100.0;
    let ks = |s: u64| -> Result<f64> {
        let w = make_noise_path(s, 0.01, 10_000, 1)?;
        Ok(ks_distance(w.increments().iter().map(|x| x / 0.1).collect()))
    };
    let mut d = ks(seed)?;
    if d > critical {
        d = ks(derive_key(seed, &[1]))?;
    }
    out.push(at_most("KS distance of standardized increments", d, critical));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_distance_is_small_for_normal_quantiles() {
        let n = 1000;
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let p = (i as f64 + 0.5) / n as f64;
                // bisection for Φ⁻¹(p)
                let (mut lo, mut hi) = (-10.0, 10.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if normal_cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            })
            .collect();
        assert!(ks_distance(z) <= 0.5 / n as f64 + 1e-9);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(Vec::new()).is_nan());
    }

    #[test]
    fn measurement_helpers() {
        assert!(within("x", 1.05, 1.0, 0.1).pass);
        assert!(!within("x", 1.2, 1.0, 0.1).pass);
        assert!(at_most("x", 0.1, 0.1).pass);
        let m = inside("x", 0.4, 0.35, 0.6);
        assert!(m.pass && (m.target - 0.475).abs() < 1e-12);
    }

    #[test]
    fn unknown_criterion_fails() {
        let suite = Suite::new(1, Some(2), Execution::Sequential);
        let out = suite.run(42);
        assert!(!out.pass && out.error.is_some());
        assert!(out.line().starts_with("FAIL #42"));
    }

    #[test]
    fn noise_and_determinism_criterion_passes() {
        let m = determinism_and_noise(derive_key(7, &[10])).unwrap();
        for x in &m {
            assert!(x.pass, "{x:?}");
        }
    }
}
