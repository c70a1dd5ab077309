//! Explicit finite-volume solver for the d = 1 density equation
//! `∂_t X = L*X − ∂_x(σ₁X)Ẇ + √(γX)·Ḃ` on a truncated interval.
//!
//! A step first applies the deterministic and environment terms in
//! conservative form,
//!
//! ```text
//! u_i* = u_i + (dt/dx)(J_{i+½} − J_{i−½}) − (ΔW/dx)(S_{i+½} − S_{i−½}),
//! ```
//!
//! with `J = ½∂_x(a u) − b u` and `S = σ₁u` averaged to the interfaces, so
//! the transport term is the centered difference with a single scalar `ΔW`.
//! Interface fluxes vanish at both ends. Negative `u*` is clipped.
//!
//! The branching noise then acts on the cell mass `v = u*·dx` as the Feller
//! diffusion `dv = √(γv) dB` over one step. When `2v/(γ dt)` is large this is
//! the Gaussian increment `√(γ v dt)·Z` with `Z` the sheet sample of cell
//! `(step, i)`; otherwise the exact Poisson–Gamma transition is drawn from the
//! same cell's generator. The exact transition keeps the field nonnegative
//! without the upward bias that clipping a Gaussian increment puts on small
//! values, and it lets small masses die, which keeps the support compact.
//! Zero nodes draw nothing and are skipped.

use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::grid::{DensityField, Grid};
use crate::measure::{AtomicMeasure, TestFunction};
use crate::model::Coefficients;
use crate::noise::{NoisePath, SheetSource};
use crate::{Error, Result};

/// Fraction of the mass allowed in the boundary band before a run aborts.
pub const LEAK_TOLERANCE: f64 = 1e-3;
const BOUNDARY_BAND: usize = 5;

/// Deposits each atom as a Gaussian of standard deviation `dx`, normalized
/// on the grid so that the deposited mass equals the atom's mass. Atoms
/// must lie at least `safety_width` inside the grid.
pub fn init_field(mu: &AtomicMeasure, grid: Grid, safety_width: f64) -> Result<DensityField> {
    if mu.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: mu.dim() });
    }
    let mut field = DensityField::zeros(grid);
    let dx = grid.dx();
    let reach = 8;
    let lo = grid.x_min() + safety_width.max(reach as f64 * dx);
    let hi = grid.x_max() - safety_width.max(reach as f64 * dx);
    let mut kernel = Vec::with_capacity(2 * reach + 1);
    for (x, m) in mu.atoms() {
        let p = x[0];
        if !(p >= lo && p <= hi) {
            return Err(grid.outside(p));
        }
        if m == 0.0 {
            continue;
        }
        let centre = ((p - grid.x_min()) / dx).round() as usize;
        kernel.clear();
        for i in centre - reach..=centre + reach {
            let z = (grid.x(i) - p) / dx;
            kernel.push((-0.5 * z * z).exp());
        }
        let norm: f64 = kernel.iter().sum::<f64>() * dx;
        let values = field.values_mut();
        for (k, w) in kernel.iter().enumerate() {
            values[centre - reach + k] += m * w / norm;
        }
    }
    Ok(field)
}

/// Samples an analytic density at the grid nodes.
pub fn init_field_from_density(grid: Grid, f: impl Fn(f64) -> f64) -> DensityField {
    DensityField::from_fn(grid, |x| f(x).max(0.0))
}

/// Precomputed coefficients of the scheme on one grid.
#[derive(Debug, Clone)]
pub struct SpdeScheme {
    grid: Grid,
    dt: f64,
    gamma: f64,
    a: Vec<f64>,
    s1: Vec<f64>,
    b_half: Vec<f64>,
    // scratch
    flux: Vec<f64>,
    old: Vec<f64>,
}

impl SpdeScheme {
    pub fn new(c: &Coefficients, grid: Grid, dt: f64) -> Result<Self> {
        if c.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: c.dim() });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidStep(format!("dt must be positive, got {dt}")));
        }
        let n = grid.len();
        let a: Vec<f64> = grid.nodes().map(|x| c.a1(x)).collect();
        let max_a = a.iter().copied().fold(0.0, f64::max);
        let limit = grid.dx() * grid.dx() / (2.0 * max_a);
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::StabilityViolation(format!(
                "dt = {dt} exceeds dx^2/(2 max a) = {limit}"
            )));
        }
        let s1 = grid.nodes().map(|x| c.sigma1_1(x)).collect();
        let b_half = (0..n - 1).map(|i| c.b1(grid.x(i) + 0.5 * grid.dx())).collect();
        Ok(Self {
            grid,
            dt,
            gamma: c.branching_rate(),
            a,
            s1,
            b_half,
            flux: vec![0.0; n + 1],
            old: vec![0.0; n],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `field` by one step with environment increment `dw`.
    pub fn step(&mut self, field: &mut DensityField, dw: f64, sheet: &SheetSource, step: usize) -> Result<()> {
        if *field.grid() != self.grid {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                got: field.grid().len(),
            });
        }
        let n = self.grid.len();
        let u = field.values();
        let Some(first) = u.iter().position(|&v| v != 0.0) else {
            field.set_time(field.time() + self.dt);
            return Ok(());
        };
        let last = u.iter().rposition(|&v| v != 0.0).expect("nonzero entry exists");
        let lo = first.saturating_sub(1);
        let hi = (last + 1).min(n - 1);
        self.update(field, lo, hi, dw, sheet, step)
    }

    #[allow(clippy::needless_range_loop)]
    fn update(
        &mut self,
        field: &mut DensityField,
        lo: usize,
        hi: usize,
        dw: f64,
        sheet: &SheetSource,
        step: usize,
    ) -> Result<()> {
        let n = self.grid.len();
        let dx = self.grid.dx();
        let dt = self.dt;
        let old = &mut self.old;
        old[lo..=hi].copy_from_slice(&field.values()[lo..=hi]);
        // interface k sits between nodes k-1 and k; interfaces 0 and n are walls
        let flux = &mut self.flux;
        let ratio = dt / dx;
        let transport = dw / dx;
        for k in lo.max(1)..=hi.min(n - 1) {
            let (l, r) = (k - 1, k);
            let (ul, ur) = (old[l], old[r]);
            let diffusive = 0.5 * (self.a[r] * ur - self.a[l] * ul) / dx;
            let advective = self.b_half[l] * 0.5 * (ul + ur);
            let env = 0.5 * (self.s1[l] * ul + self.s1[r] * ur);
            flux[k] = ratio * (diffusive - advective) - transport * env;
        }
        if lo == 0 {
            flux[0] = 0.0;
        }
        if hi == n - 1 {
            flux[n] = 0.0;
        }
        let gamma_dt = self.gamma * dt;
        let silent = sheet.is_silent();
        let values = field.values_mut();
        for i in lo..=hi {
            let u = old[i] + flux[i + 1] - flux[i];
            if !u.is_finite() {
                return Err(Error::NonfiniteValue { step, node: i });
            }
            values[i] = if u <= 0.0 {
                0.0
            } else if silent {
                u
            } else {
                feller_step(u * dx, gamma_dt, sheet, step, i) / dx
            };
        }
        field.set_time(field.time() + dt);
        Ok(())
    }
}

/// Above this mean count the Feller step uses the Gaussian increment.
const FELLER_GAUSSIAN_COUNT: f64 = 64.0;

/// Mass after one step of `dv = √(γv) dB`.
fn feller_step(v: f64, gamma_dt: f64, sheet: &SheetSource, step: usize, cell: usize) -> f64 {
    let lambda = 2.0 * v / gamma_dt;
    if lambda >= FELLER_GAUSSIAN_COUNT {
        return (v + (gamma_dt * v).sqrt() * sheet.standard(step, cell)).max(0.0);
    }
    let mut rng = sheet.cell_rng(step, cell);
    let n = if lambda < 10.0 {
        let u = rng.uniform();
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut n = 0u32;
        while u > cdf && p > 0.0 {
            n += 1;
            p *= lambda / n as f64;
            cdf += p;
        }
        n
    } else {
        Poisson::new(lambda).expect("finite positive mean").sample(&mut rng) as u32
    };
    if n == 0 {
        return 0.0;
    }
    let g: f64 = Gamma::new(n as f64, 1.0)
        .expect("positive shape")
        .sample(&mut rng);
    0.5 * gamma_dt * g
}

/// One step of the scheme on a copy of `field`.
pub fn spde_step(
    field: &DensityField,
    c: &Coefficients,
    w_inc: f64,
    sheet: &SheetSource,
    step_index: usize,
    dt: f64,
) -> Result<DensityField> {
    let mut scheme = SpdeScheme::new(c, *field.grid(), dt)?;
    let mut next = field.clone();
    scheme.step(&mut next, w_inc, sheet, step_index)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Functionals are recorded every this many steps (and at the end).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_safety_width")]
    pub safety_width: f64,
}

fn default_record_every() -> usize {
    1
}

fn default_safety_width() -> f64 {
    0.5
}

impl SpdeConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.x_min, self.x_max, self.dx)
    }
}

#[derive(Debug, Clone)]
pub struct SpdeRun {
    pub seed: u64,
    pub snapshots: Vec<DensityField>,
    /// Times at which functionals were recorded.
    pub record_times: Vec<f64>,
    /// `functionals[k][j]` is `⟨X, φ_k⟩` at `record_times[j]`.
    pub functionals: Vec<Vec<f64>>,
    pub final_field: DensityField,
}

fn leak_fraction(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let band = BOUNDARY_BAND.min(values.len() / 4).max(1);
    let n = values.len();
    let edge: f64 = values[..band].iter().sum::<f64>() + values[n - band..].iter().sum::<f64>();
    edge / total
}

/// Runs one trajectory from `μ` driven by `w` and the sheet keyed by `seed`.
pub fn run_spde(
    c: &Coefficients,
    mu: &AtomicMeasure,
    cfg: &SpdeConfig,
    w: &NoisePath,
    functionals: &[TestFunction],
    seed: u64,
) -> Result<SpdeRun> {
    let grid = cfg.grid()?;
    let field = init_field(mu, grid, cfg.safety_width)?;
    let sheet = SheetSource::new(seed, cfg.dt, cfg.dx, cfg.steps(), grid.len())?;
    run_spde_from(c, field, cfg, w, &sheet, functionals)
}

/// Same as [`run_spde`] from a given initial field and sheet.
pub fn run_spde_from(
    c: &Coefficients,
    mut field: DensityField,
    cfg: &SpdeConfig,
    w: &NoisePath,
    sheet: &SheetSource,
    functionals: &[TestFunction],
) -> Result<SpdeRun> {
    let steps = cfg.steps();
    if !(cfg.t_final > 0.0) {
        return Err(Error::NonpositiveTime(cfg.t_final));
    }
    if cfg.record_every == 0 {
        return Err(Error::InvalidParameter("record_every must be at least 1".into()));
    }
    if w.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: w.dim() });
    }
    w.check_covers(cfg.dt, steps)?;
    let grid = *field.grid();
    let mut scheme = SpdeScheme::new(c, grid, cfg.dt)?;
    let weights: Vec<Vec<f64>> = functionals
        .iter()
        .map(|f| grid.nodes().map(|x| f.eval1(x) * grid.dx()).collect())
        .collect();
    let mut snapshot_steps: Vec<(usize, usize)> = cfg
        .snapshot_times
        .iter()
        .enumerate()
        .map(|(k, t)| ((t / cfg.dt).round() as usize, k))
        .collect();
    if snapshot_steps.iter().any(|&(s, _)| s > steps) {
        return Err(Error::OutOfRange("snapshot time beyond t_final".into()));
    }
    snapshot_steps.sort_unstable();
    let mut snapshots = vec![None; snapshot_steps.len()];
    let mut next_snapshot = 0;
    let mut record_times = Vec::new();
    let mut series = vec![Vec::new(); functionals.len()];
    let record = |field: &DensityField, times: &mut Vec<f64>, series: &mut [Vec<f64>]| {
        times.push(field.time());
        for (s, wts) in series.iter_mut().zip(&weights) {
            s.push(field.values().iter().zip(wts).map(|(u, w)| u * w).sum());
        }
    };
    for step in 0..=steps {
        while next_snapshot < snapshot_steps.len() && snapshot_steps[next_snapshot].0 == step {
            snapshots[snapshot_steps[next_snapshot].1] = Some(field.clone());
            next_snapshot += 1;
        }
        if step % cfg.record_every == 0 || step == steps {
            record(&field, &mut record_times, &mut series);
        }
        if step == steps {
            break;
        }
        scheme.step(&mut field, w.increment(step)[0], sheet, step)?;
        let leak = leak_fraction(field.values());
        if leak > LEAK_TOLERANCE {
            return Err(Error::MassLeak { fraction: leak });
        }
    }
    Ok(SpdeRun {
        seed: sheet.seed(),
        snapshots: snapshots.into_iter().map(|s| s.expect("every snapshot step is visited")).collect(),
        record_times,
        functionals: series,
        final_field: field,
    })
}

/// The scheme with `ΔW = 0` and no branching noise: the discrete solution
/// of `∂_t m = L*m`.
pub fn deterministic_solve(c: &Coefficients, init: &DensityField, dt: f64, steps: usize) -> Result<DensityField> {
    let mut scheme = SpdeScheme::new(c, *init.grid(), dt)?;
    let sheet = SheetSource::new(0, dt, init.grid().dx(), steps, init.grid().len())?.silent();
    let mut field = init.clone();
    for step in 0..steps {
        scheme.step(&mut field, 0.0, &sheet, step)?;
    }
    Ok(field)
}
