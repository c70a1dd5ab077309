//! Backward solver for the conditional log-Laplace functional.
//!
//! Given a realized environment path `W`, `y_{s,t}` solves
//!
//! ```text
//! y_{s,t} = f + ∫_s^t (L y_{r,t} − (γ/2) y_{r,t}²) dr + ∫_s^t σ₁ ∂_x y_{r,t} d̂W_r
//! ```
//!
//! where `d̂W` is the backward Itô integral (integrand at the upper end of
//! each step). Then `E[exp(−⟨X_t, f⟩) | W] = exp(−⟨μ, y_{0,t}⟩)`.
//!
//! Time runs from `s = t` down to 0 on the environment's own step, so the
//! solver consumes the increments of the forward simulators in reverse. The
//! second-order part of `L` is implicit, everything else explicit; the ends
//! are reflecting.

use crate::grid::{DensityField, Grid};
use crate::measure::AtomicMeasure;
use crate::model::Coefficients;
use crate::noise::NoisePath;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    t: f64,
    dt: f64,
    grid: Grid,
    /// Row `k` holds `y_{k·dt, t}`.
    y: Vec<f64>,
    f: Vec<f64>,
}

impl BackwardSolution {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.y.len() / self.grid.len() - 1
    }

    pub fn terminal(&self) -> &[f64] {
        &self.f
    }

    /// `y_{k·dt, t}` on the grid.
    pub fn y_at(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.y[k * n..(k + 1) * n]
    }

    /// `y_{0,t}`.
    pub fn y0(&self) -> &[f64] {
        self.y_at(0)
    }

    pub fn y0_field(&self) -> DensityField {
        DensityField::from_values(self.grid, self.y0().to_vec()).expect("row has grid length")
    }
}

/// Solves backward from `y_{t,t} = f` using the first `t/dt` increments of `w`.
pub fn solve_backward(
    c: &Coefficients,
    f: &DensityField,
    t: f64,
    w: &NoisePath,
    dt: f64,
) -> Result<BackwardSolution> {
    if c.dim() != 1 || w.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: if c.dim() != 1 { c.dim() } else { w.dim() },
        });
    }
    if !(t > 0.0) {
        return Err(Error::NonpositiveTime(t));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    let steps = (t / dt).round() as usize;
    if ((steps as f64) * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidStep(format!("t = {t} is not a multiple of dt = {dt}")));
    }
    w.check_covers(dt, steps)?;
    if let Some((node, &value)) = f.values().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeTerminalData { node, value });
    }
    let grid = *f.grid();
    let n = grid.len();
    let dx = grid.dx();
    let gamma = c.branching_rate();
    let f_max = f.values().iter().copied().fold(0.0, f64::max);
    if 0.5 * gamma * f_max * dt > 0.5 {
        return Err(Error::StabilityViolation(format!(
            "nonlinear step (γ/2)·max f·dt = {} exceeds 1/2",
            0.5 * gamma * f_max * dt
        )));
    }
    let half_a: Vec<f64> = grid.nodes().map(|x| 0.5 * c.a1(x)).collect();
    let b: Vec<f64> = grid.nodes().map(|x| c.b1(x)).collect();
    let s1: Vec<f64> = grid.nodes().map(|x| c.sigma1_1(x)).collect();
    let max_b = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_b * dt > dx {
        return Err(Error::StabilityViolation(format!(
            "drift step max|b|·dt = {} exceeds dx = {dx}",
            max_b * dt
        )));
    }

    // (I − dt·½a∂²) with reflecting ends, factored once.
    let r = dt / (dx * dx);
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        let k = half_a[i] * r;
        diag[i] = 1.0 + 2.0 * k;
        if i == 0 {
            upper[i] = -2.0 * k;
        } else if i == n - 1 {
            lower[i] = -2.0 * k;
        } else {
            lower[i] = -k;
            upper[i] = -k;
        }
    }
    let (c_prime, denom) = thomas_factor(&lower, &diag, &upper);

    let mut y = vec![0.0; (steps + 1) * n];
    y[steps * n..].copy_from_slice(f.values());
    let mut rhs = vec![0.0; n];
    for k in (0..steps).rev() {
        let dw = w.increment(k)[0];
        let (below, above) = y.split_at_mut((k + 1) * n);
        let next = &above[..n];
        for i in 0..n {
            let grad = if i == 0 || i == n - 1 {
                0.0
            } else {
                (next[i + 1] - next[i - 1]) / (2.0 * dx)
            };
            let v = next[i];
            rhs[i] = v + dt * (b[i] * grad - 0.5 * gamma * v * v) + s1[i] * grad * dw;
        }
        let row = &mut below[k * n..];
        thomas_solve(&lower, &c_prime, &denom, &rhs, row);
        for (i, v) in row.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonfiniteValue { step: k, node: i });
            }
            *v = v.max(0.0);
        }
    }
    Ok(BackwardSolution {
        t,
        dt,
        grid,
        y,
        f: f.values().to_vec(),
    })
}

fn thomas_factor(lower: &[f64], diag: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut denom = vec![0.0; n];
    denom[0] = diag[0];
    c_prime[0] = upper[0] / denom[0];
    for i in 1..n {
        denom[i] = diag[i] - lower[i] * c_prime[i - 1];
        c_prime[i] = upper[i] / denom[i];
    }
    (c_prime, denom)
}

fn thomas_solve(lower: &[f64], c_prime: &[f64], denom: &[f64], rhs: &[f64], out: &mut [f64]) {
    let n = rhs.len();
    out[0] = rhs[0] / denom[0];
    for i in 1..n {
        out[i] = (rhs[i] - lower[i] * out[i - 1]) / denom[i];
    }
    for i in (0..n - 1).rev() {
        out[i] -= c_prime[i] * out[i + 1];
    }
}

/// `exp(−⟨μ, y_{0,t}⟩)` with `y_{0,t}` interpolated linearly at the atoms.
pub fn conditional_laplace(mu: &AtomicMeasure, sol: &BackwardSolution) -> Result<f64> {
    if mu.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: mu.dim() });
    }
    let y0 = sol.y0();
    let mut exponent = 0.0;
    for (x, m) in mu.atoms() {
        let (i, w) = sol.grid.locate(x[0]).ok_or_else(|| sol.grid.outside(x[0]))?;
        exponent += m * (y0[i] * (1.0 - w) + y0[i + 1] * w);
    }
    Ok((-exponent).exp())
}
