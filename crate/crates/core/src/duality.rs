//! Moment dual and closed-form first and second moments.
//!
//! The dual is a pure-death chain `n_t` that jumps `n → n−1` at rate
//! `γ n(n−1)/2`, merging a uniformly chosen pair `(i, j)` through `G_ij`
//! (the merged variable takes the last position). Between jumps `f` evolves
//! by the `n`-particle semigroup of the motion, where all particles share
//! the environment. Then
//!
//! ```text
//! E⟨X_t^{⊗n}, f⟩ = E[⟨μ^{⊗n_t}, f_t⟩ · exp(∫₀ᵗ γ n_s(n_s−1)/2 ds)].
//! ```
//!
//! With constant coefficients the drift and the environment act on all
//! particles as one common shift that commutes with merging and with the
//! private noise. The chain therefore runs with the private Gaussian flow
//! only, and the common shift `N(bt, σ₁²t)` is applied once at the end by
//! Gauss–Hermite quadrature.
//!
//! `f` is stored as a sum of products of grid functions, which is closed
//! under both the per-axis convolution and `G_ij`.

use crate::grid::Grid;
use crate::measure::{AtomicMeasure, TestFunction};
use crate::model::Coefficients;
use crate::noise::{stream, CounterRng};
use crate::par::{map_replicates, Execution};
use crate::quadrature::{adaptive_simpson, gauss_hermite, gaussian_expectation};
use crate::{Error, Result};

pub const N_MAX: usize = 4;
const COMMON_SHIFT_NODES: usize = 40;
const KERNEL_REACH: f64 = 10.0;

/// `f(y_1, …, y_n) = Σ_r w_r Π_k g_{r,k}(y_k)` with every `g` on one grid.
/// Off-grid arguments use the nearest end value.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFunction {
    grid: Grid,
    arity: usize,
    weights: Vec<f64>,
    // term-major: factors[r * arity + k]
    factors: Vec<Vec<f64>>,
}

impl TensorFunction {
    pub fn product(grid: Grid, factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidParameter("a product needs at least one factor".into()));
        }
        if let Some(g) = factors.iter().find(|g| g.len() != grid.len()) {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: g.len(),
            });
        }
        Ok(Self {
            grid,
            arity: factors.len(),
            weights: vec![1.0],
            factors,
        })
    }

    /// `φ_1 ⊗ … ⊗ φ_n` sampled on the grid.
    pub fn from_test_functions(grid: Grid, fs: &[TestFunction]) -> Result<Self> {
        Self::product(grid, fs.iter().map(|f| grid.nodes().map(|x| f.eval1(x)).collect()).collect())
    }

    pub fn ones(grid: Grid, n: usize) -> Result<Self> {
        Self::from_test_functions(grid, &vec![TestFunction::One; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    fn factor(&self, r: usize, k: usize) -> &[f64] {
        &self.factors[r * self.arity + k]
    }

    fn interp(&self, g: &[f64], x: f64) -> f64 {
        let (i, w) = self.grid.locate_clamped(x);
        g[i] * (1.0 - w) + g[i + 1] * w
    }

    /// Multilinear interpolation at `y`.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.arity {
            return Err(Error::DimensionMismatch {
                expected: self.arity,
                got: y.len(),
            });
        }
        Ok((0..self.rank())
            .map(|r| {
                self.weights[r] * (0..self.arity).map(|k| self.interp(self.factor(r, k), y[k])).product::<f64>()
            })
            .sum())
    }

    /// `G_ij f`: positions `i` and `j` are tied to the last variable.
    pub fn merge(&self, i: usize, j: usize) -> Result<Self> {
        if i == j || i >= self.arity || j >= self.arity {
            return Err(Error::OutOfRange(format!("merge ({i}, {j}) at arity {}", self.arity)));
        }
        if self.arity < 2 {
            return Err(Error::OutOfRange("merge needs arity at least 2".into()));
        }
        let arity = self.arity - 1;
        let mut factors = Vec::with_capacity(self.rank() * arity);
        for r in 0..self.rank() {
            for k in (0..self.arity).filter(|&k| k != i && k != j) {
                factors.push(self.factor(r, k).to_vec());
            }
            factors.push(self.factor(r, i).iter().zip(self.factor(r, j)).map(|(a, b)| a * b).collect());
        }
        Ok(Self {
            grid: self.grid,
            arity,
            weights: self.weights.clone(),
            factors,
        })
    }

    /// Convolves every factor with the Gaussian of variance `var`, using a
    /// row-normalised kernel so constants are preserved.
    pub fn smooth(&mut self, var: f64) {
        if var <= 0.0 {
            return;
        }
        let kernel = GaussianKernel::new(&self.grid, var);
        for g in self.factors.iter_mut() {
            *g = kernel.apply(g);
        }
    }

    /// `Σ_m w_m f(· + s_m·1)` as a new function of the same arity.
    fn common_shift(&self, mean: f64, var: f64) -> Self {
        if var <= 0.0 && mean == 0.0 {
            return self.clone();
        }
        let (nodes, weights) = if var > 0.0 {
            gauss_hermite(COMMON_SHIFT_NODES)
        } else {
            (vec![0.0], vec![1.0])
        };
        let sd = var.max(0.0).sqrt();
        let mut out = Self {
            grid: self.grid,
            arity: self.arity,
            weights: Vec::new(),
            factors: Vec::new(),
        };
        for (z, wz) in nodes.iter().zip(&weights) {
            let s = mean + sd * z;
            for r in 0..self.rank() {
                out.weights.push(self.weights[r] * wz);
                for k in 0..self.arity {
                    let g = self.factor(r, k);
                    out.factors.push(self.grid.nodes().map(|x| self.interp(g, x + s)).collect());
                }
            }
        }
        out
    }

    /// `⟨μ^{⊗n}, f⟩`.
    pub fn integrate_power(&self, mu: &AtomicMeasure) -> Result<f64> {
        if mu.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: mu.dim() });
        }
        Ok((0..self.rank())
            .map(|r| {
                self.weights[r]
                    * (0..self.arity)
                        .map(|k| {
                            let g = self.factor(r, k);
                            mu.atoms().map(|(x, m)| m * self.interp(g, x[0])).sum::<f64>()
                        })
                        .product::<f64>()
            })
            .sum())
    }

    /// `⟨μ^{⊗n}, f(· + s·1)⟩` averaged over `s ~ N(mean, var)`.
    fn integrate_power_shifted(&self, mu: &AtomicMeasure, mean: f64, var: f64) -> Result<f64> {
        if var <= 0.0 {
            let shifted = shift_measure(mu, mean);
            return self.integrate_power(&shifted);
        }
        let (nodes, weights) = gauss_hermite(COMMON_SHIFT_NODES);
        let sd = var.sqrt();
        let mut total = 0.0;
        for (z, w) in nodes.iter().zip(&weights) {
            total += w * self.integrate_power(&shift_measure(mu, mean + sd * z))?;
        }
        Ok(total)
    }
}

fn shift_measure(mu: &AtomicMeasure, s: f64) -> AtomicMeasure {
    let mut out = AtomicMeasure::with_capacity(1, mu.len());
    for (x, m) in mu.atoms() {
        out.push(&[x[0] + s], m).expect("one-dimensional atom");
    }
    out
}

/// Banded, row-normalised Gaussian smoothing matrix on a grid.
struct GaussianKernel {
    reach: usize,
    rows: Vec<Vec<f64>>,
}

impl GaussianKernel {
    fn new(grid: &Grid, var: f64) -> Self {
        let dx = grid.dx();
        let reach = ((KERNEL_REACH * var.sqrt() / dx).ceil() as usize).max(1);
        let n = grid.len();
        let rows = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(n - 1);
                let mut row: Vec<f64> = (lo..=hi)
                    .map(|j| {
                        let z = (j as f64 - i as f64) * dx;
                        (-0.5 * z * z / var).exp()
                    })
                    .collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        Self { reach, rows }
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let lo = i.saturating_sub(self.reach);
                row.iter().zip(&g[lo..]).map(|(k, v)| k * v).sum()
            })
            .collect()
    }
}

fn constant_1d(c: &Coefficients) -> Result<(f64, f64, f64)> {
    if !c.is_constant() {
        return Err(Error::UnsupportedCoefficients);
    }
    if c.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: c.dim() });
    }
    Ok((c.b1(0.0), c.sigma1_1(0.0), c.sigma2_1(0.0)))
}

/// Result of one dual run.
#[derive(Debug, Clone)]
pub struct DualSample {
    /// `f_t`, including the common shift.
    pub f: TensorFunction,
    pub n: usize,
    pub jump_times: Vec<f64>,
    /// `exp(∫₀ᵗ γ n_s(n_s−1)/2 ds)`.
    pub exp_factor: f64,
}

struct ChainRun {
    f: TensorFunction,
    n: usize,
    jump_times: Vec<f64>,
    exponent: f64,
}

fn run_chain(c: &Coefficients, n0: usize, f0: &TensorFunction, t: f64, seed: u64) -> Result<ChainRun> {
    let (_, _, s2) = constant_1d(c)?;
    if n0 > N_MAX {
        return Err(Error::ArityTooLarge { n: n0, max: N_MAX });
    }
    if n0 == 0 || f0.arity() != n0 {
        return Err(Error::DimensionMismatch {
            expected: n0,
            got: f0.arity(),
        });
    }
    if t < 0.0 {
        return Err(Error::NonpositiveTime(t));
    }
    let gamma = c.branching_rate();
    let mut rng = CounterRng::for_stream(seed, &[stream::DUAL]);
    let mut f = f0.clone();
    let mut n = n0;
    let mut elapsed = 0.0;
    let mut exponent = 0.0;
    let mut jump_times = Vec::new();
    loop {
        let rate = 0.5 * gamma * (n * (n - 1)) as f64;
        let hold = if rate > 0.0 { rng.exponential(1.0 / rate) } else { f64::INFINITY };
        let remaining = t - elapsed;
        let seg = hold.min(remaining);
        f.smooth(s2 * s2 * seg);
        exponent += rate * seg;
        elapsed += seg;
        if hold >= remaining {
            break;
        }
        jump_times.push(elapsed);
        let pairs = n * (n - 1) / 2;
        let mut p = ((rng.uniform() * pairs as f64) as usize).min(pairs - 1);
        let (mut i, mut j) = (0, 1);
        'find: for a in 0..n {
            for b in a + 1..n {
                if p == 0 {
                    (i, j) = (a, b);
                    break 'find;
                }
                p -= 1;
            }
        }
        f = f.merge(i, j)?;
        n -= 1;
    }
    Ok(ChainRun {
        f,
        n,
        jump_times,
        exponent,
    })
}

/// One run of the dual chain from `(n0, f0)` up to time `t`.
pub fn run_dual_sample(c: &Coefficients, n0: usize, f0: &TensorFunction, t: f64, seed: u64) -> Result<DualSample> {
    let (b, s1, _) = constant_1d(c)?;
    let run = run_chain(c, n0, f0, t, seed)?;
    Ok(DualSample {
        f: run.f.common_shift(b * t, s1 * s1 * t),
        n: run.n,
        jump_times: run.jump_times,
        exp_factor: run.exponent.exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
}

/// Monte Carlo estimate of `E⟨X_t^{⊗n0}, f0⟩` from the dual.
pub fn dual_moment_estimate(
    c: &Coefficients,
    mu: &AtomicMeasure,
    n0: usize,
    f0: &TensorFunction,
    t: f64,
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<Estimate> {
    let (b, s1, _) = constant_1d(c)?;
    if replicates < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 replicates, got {replicates}")));
    }
    let values = map_replicates(replicates, exec, |k| -> Result<f64> {
        let run = run_chain(c, n0, f0, t, crate::noise::replicate_seed(seed, k as u64))?;
        Ok(run.f.integrate_power_shifted(mu, b * t, s1 * s1 * t)? * run.exponent.exp())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        mean,
        se: (var / n).sqrt(),
        replicates,
    })
}

/// `∫∫ f(y) p₀(t, x, y) dy μ(dx)`.
pub fn exact_first_moment(c: &Coefficients, mu: &AtomicMeasure, f: &TestFunction, t: f64) -> Result<f64> {
    let (b, _, _) = constant_1d(c)?;
    if t < 0.0 {
        return Err(Error::NonpositiveTime(t));
    }
    let a = c.a1(0.0);
    Ok(mu.atoms().map(|(x, m)| m * f.smoothed(x[0] + b * t, a * t)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondMoment {
    /// Branching term weighted by `γ`, consistent with the martingale problem.
    pub mp_consistent: f64,
    /// Branching term weighted by 2.
    pub paper_literal: f64,
    /// Contribution of pairs with distinct ancestors at time 0.
    pub pair_term: f64,
    /// `∫₀ᵗ (…) ds` before the branching weight.
    pub branching_integral: f64,
}

/// `E⟨X_t, f⟩⟨X_t, g⟩` for constant coefficients in d = 1.
pub fn exact_second_moment(
    c: &Coefficients,
    mu: &AtomicMeasure,
    f: &TestFunction,
    g: &TestFunction,
    t: f64,
) -> Result<SecondMoment> {
    let (b, s1, s2) = constant_1d(c)?;
    if t < 0.0 {
        return Err(Error::NonpositiveTime(t));
    }
    let a = c.a1(0.0);
    let (v1, v2) = (s1 * s1, s2 * s2);
    let tol = 1e-10;
    // Two particles from x1, x2 with shared environment: common N(bt, σ₁²t),
    // private N(0, σ₂²t) each.
    let mut pair_term = 0.0;
    for (x1, m1) in mu.atoms() {
        for (x2, m2) in mu.atoms() {
            let (x1, x2) = (x1[0], x2[0]);
            let inner = |w: f64| f.smoothed(x1 + w, v2 * t) * g.smoothed(x2 + w, v2 * t);
            pair_term += m1 * m2 * gaussian_expectation(&inner, b * t, v1 * t, tol);
        }
    }
    // Branch at time t−s: the common position is N(x + bt, a(t−s) + σ₁²s),
    // then the two offspring diffuse privately for time s.
    let mut branching_integral = 0.0;
    if t > 0.0 {
        for (x, m) in mu.atoms() {
            let x = x[0];
            let at = |s: f64| {
                let inner = |y: f64| f.smoothed(y, v2 * s) * g.smoothed(y, v2 * s);
                gaussian_expectation(&inner, x + b * t, a * (t - s) + v1 * s, tol)
            };
            branching_integral += m * adaptive_simpson(&at, 0.0, t, 1e-9);
        }
    }
    Ok(SecondMoment {
        mp_consistent: pair_term + c.branching_rate() * branching_integral,
        paper_literal: pair_term + 2.0 * branching_integral,
        pair_term,
        branching_integral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_coefficients, CoefficientSpec};

    fn grid() -> Grid {
        Grid::new(-8.0, 8.0, 0.02).unwrap()
    }

    fn coeffs(b: f64, s1: f64, s2: f64) -> Coefficients {
        make_coefficients(&CoefficientSpec::constant_1d(b, s1, s2)).unwrap()
    }

    #[test]
    fn merge_is_diagonal_restriction() {
        let g = Grid::new(-2.0, 2.0, 0.5).unwrap();
        let f = TensorFunction::from_test_functions(
            g,
            &[
                TestFunction::Power { exponent: 1 },
                TestFunction::Power { exponent: 2 },
                TestFunction::Power { exponent: 0 },
            ],
        )
        .unwrap();
        // f(y1, y2, y3) = y1 · y2²; G_02 ties y1 and y3: (y2, z) ↦ z · y2²
        let m = f.merge(0, 2).unwrap();
        assert_eq!(m.arity(), 2);
        for (y, z) in [(1.0, 0.5), (-1.5, 2.0), (0.0, -1.0)] {
            assert_eq!(m.eval(&[y, z]).unwrap(), z * y * y);
            assert_eq!(f.eval(&[z, y, z]).unwrap(), m.eval(&[y, z]).unwrap());
        }
        assert!(f.merge(1, 1).is_err());
        assert!(f.merge(0, 3).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let mut f = TensorFunction::ones(grid(), 2).unwrap();
        f.smooth(0.7);
        assert!((f.eval(&[7.9, -7.9]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arity_limit() {
        let c = coeffs(0.0, 0.5, 1.0);
        let f = TensorFunction::ones(grid(), 5).unwrap();
        assert!(matches!(
            run_dual_sample(&c, 5, &f, 1.0, 1),
            Err(Error::ArityTooLarge { n: 5, max: 4 })
        ));
    }

    #[test]
    fn single_particle_is_the_heat_flow() {
        let c = coeffs(0.3, 0.5, 1.0);
        let phi = TestFunction::Gaussian { center: 0.5, sd: 0.4 };
        let f = TensorFunction::from_test_functions(grid(), &[phi]).unwrap();
        let s = run_dual_sample(&c, 1, &f, 0.8, 3).unwrap();
        assert_eq!(s.n, 1);
        assert!(s.jump_times.is_empty());
        assert_eq!(s.exp_factor, 1.0);
        let mu = AtomicMeasure::dirac(&[0.1], 1.0).unwrap();
        let exact = exact_first_moment(&c, &mu, &phi, 0.8).unwrap();
        let est = dual_moment_estimate(&c, &mu, 1, &f, 0.8, 2, 1, Execution::Sequential).unwrap();
        assert!((est.mean - exact).abs() < 1e-4, "{} vs {exact}", est.mean);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn zero_time_is_the_product_measure() {
        let c = coeffs(0.0, 0.5, 1.0);
        let g = Grid::new(-2.0, 2.0, 0.25).unwrap();
        let f = TensorFunction::from_test_functions(g, &[TestFunction::Power { exponent: 1 }, TestFunction::One])
            .unwrap();
        let mut mu = AtomicMeasure::new(1);
        mu.push(&[0.5], 2.0).unwrap();
        mu.push(&[1.0], 1.0).unwrap();
        let est = dual_moment_estimate(&c, &mu, 2, &f, 0.0, 4, 1, Execution::Sequential).unwrap();
        assert!((est.mean - 2.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn holding_times() {
        let c = coeffs(0.0, 0.0, 1.0);
        let g = Grid::new(-1.0, 1.0, 0.5).unwrap();
        for (n0, mean) in [(2usize, 1.0), (3, 1.0 / 3.0)] {
            let f = TensorFunction::ones(g, n0).unwrap();
            let runs = 10_000;
            let total: f64 = (0..runs)
                .map(|k| run_chain(&c, n0, &f, 100.0, k).unwrap().jump_times[0])
                .sum();
            let m = total / runs as f64;
            assert!((m / mean - 1.0).abs() < 0.03, "n0 {n0}: {m}");
        }
    }

    #[test]
    fn first_moment_oracles() {
        let c = make_coefficients(&CoefficientSpec::constant_1d(0.0, 1.0, 1.0)).unwrap();
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let sq = exact_first_moment(&c, &mu, &TestFunction::Power { exponent: 2 }, 1.0).unwrap();
        assert!((sq - 2.0).abs() < 1e-4);
        let half = exact_first_moment(&c, &mu, &TestFunction::Indicator { lo: 0.0, hi: f64::INFINITY }, 1.0).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let mut mu2 = AtomicMeasure::new(1);
        mu2.push(&[1.0], 0.3).unwrap();
        mu2.push(&[-2.0], 0.4).unwrap();
        assert!((exact_first_moment(&c, &mu2, &TestFunction::One, 2.0).unwrap() - 0.7).abs() < 1e-15);
        let smooth = make_coefficients(&CoefficientSpec {
            family: crate::model::Family::Smooth {
                drift: crate::model::Wave::sine(0.5, 1.0),
                sigma1: crate::model::Wave::constant(0.5),
                sigma2: crate::model::Wave::constant(1.0),
            },
            ..CoefficientSpec::constant_1d(0.0, 0.5, 1.0)
        })
        .unwrap();
        assert!(matches!(
            exact_first_moment(&smooth, &mu, &TestFunction::One, 1.0),
            Err(Error::UnsupportedCoefficients)
        ));
    }

    #[test]
    fn second_moment_of_total_mass() {
        let c = coeffs(0.2, 0.5, 1.0);
        let mu = AtomicMeasure::dirac(&[0.0], 1.0).unwrap();
        let one = TestFunction::One;
        let m = exact_second_moment(&c, &mu, &one, &one, 1.0).unwrap();
        assert!((m.mp_consistent - 2.0).abs() < 1e-8);
        assert!((m.paper_literal - 3.0).abs() < 1e-8);
        let z = exact_second_moment(&c, &mu, &TestFunction::Power { exponent: 1 }, &one, 0.0).unwrap();
        assert_eq!(z.mp_consistent, 0.0);
        assert_eq!(z.paper_literal, 0.0);
    }
}
