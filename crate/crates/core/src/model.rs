//! Model coefficients, generators and closed-form Gaussian kernels.
//!
//! A particle moves by `dη = b(η)dt + σ₁(η)dW + σ₂(η)dB`; `a = σ₁σ₁ᵀ + σ₂σ₂ᵀ`
//! and `L = b·∇ + ½ a:∇²`. Coefficients are validated on a probe grid
//! (boundedness by `K`, ellipticity `σ₂ᵀσ₂ ≥ 2δ`).
//!
//! The branching rate `γ` fixes the quadratic variation of the mass
//! martingale, `⟨M(φ)⟩_t = γ ∫⟨X_s, φ²⟩ds + …`. It is stored here so every
//! simulator reads the same value.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::grid::DensityField;
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Budget for `dx²·max|a''|` in [`discretize_l_star`].
pub const DEFAULT_CURVATURE_BUDGET: f64 = 0.05;

/// `offset + amplitude·sin(frequency·x + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

fn one() -> f64 {
    1.0
}

impl Wave {
    pub fn constant(c: f64) -> Self {
        Self {
            offset: c,
            amplitude: 0.0,
            frequency: 1.0,
            phase: 0.0,
        }
    }

    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        Self {
            offset: 0.0,
            amplitude,
            frequency,
            phase: 0.0,
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.offset + self.amplitude * (self.frequency * x + self.phase).sin()
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        self.amplitude * self.frequency * (self.frequency * x + self.phase).cos()
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        -self.amplitude * self.frequency * self.frequency * (self.frequency * x + self.phase).sin()
    }
}

/// Coefficient family as read from an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Constant drift vector and row-major `d×d` diffusion matrices.
    Constant {
        dim: usize,
        drift: Vec<f64>,
        sigma1: Vec<f64>,
        sigma2: Vec<f64>,
    },
    /// One-dimensional smooth coefficients.
    Smooth { drift: Wave, sigma1: Wave, sigma2: Wave },
}

/// Probe grid used to check the coefficient bounds: `points` equally spaced
/// nodes on `[lo, hi]` in every coordinate direction of the first axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            points: 2001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub family: Family,
    /// Ellipticity constant δ: `σ₂ᵀσ₂ ≥ 2δ`.
    pub delta: f64,
    /// Norm bound K.
    pub bound: f64,
    #[serde(default = "one")]
    pub branching_rate: f64,
    #[serde(default = "one")]
    pub tempered_lambda: f64,
    #[serde(default)]
    pub probe: ProbeGrid,
}

impl CoefficientSpec {
    /// Constant one-dimensional coefficients with `δ = σ₂²/2`, `K` large
    /// enough for the given values and unit branching rate.
    pub fn constant_1d(drift: f64, sigma1: f64, sigma2: f64) -> Self {
        Self {
            family: Family::Constant {
                dim: 1,
                drift: vec![drift],
                sigma1: vec![sigma1],
                sigma2: vec![sigma2],
            },
            delta: 0.5 * sigma2 * sigma2,
            bound: drift.abs().max(sigma1.abs()).max(sigma2.abs()).max(1.0),
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        }
    }

    /// Isotropic constant coefficients in `dim` dimensions.
    pub fn isotropic(dim: usize, sigma1: f64, sigma2: f64) -> Self {
        let eye = |s: f64| {
            let mut m = vec![0.0; dim * dim];
            for i in 0..dim {
                m[i * dim + i] = s;
            }
            m
        };
        Self {
            family: Family::Constant {
                dim,
                drift: vec![0.0; dim],
                sigma1: eye(sigma1),
                sigma2: eye(sigma2),
            },
            delta: 0.5 * sigma2 * sigma2,
            bound: (dim as f64).sqrt() * sigma1.abs().max(sigma2.abs()).max(1.0),
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        }
    }

    pub fn with_branching_rate(mut self, rate: f64) -> Self {
        self.branching_rate = rate;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Constant,
    ParametricSmooth,
}

#[derive(Debug, Clone)]
struct ConstantRepr {
    b: DVector<f64>,
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    a_chol: Cholesky<f64, Dyn>,
    a_logdet: f64,
    pair_chol: Cholesky<f64, Dyn>,
    pair_logdet: f64,
    a: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum Repr {
    Constant(Box<ConstantRepr>),
    Smooth { b: Wave, s1: Wave, s2: Wave },
}

/// Validated, immutable model coefficients.
#[derive(Debug, Clone)]
pub struct Coefficients {
    dim: usize,
    delta: f64,
    bound: f64,
    branching_rate: f64,
    tempered_lambda: f64,
    min_ellipticity: f64,
    spec: CoefficientSpec,
    repr: Repr,
}

fn matrix(dim: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != dim * dim {
        return Err(Error::InvalidParameter(format!(
            "{what} needs {} entries for dim {dim}, got {}",
            dim * dim,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(dim, dim, data))
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn check_bound(what: &str, value: f64, bound: f64) -> Result<()> {
    if value > bound * (1.0 + 1e-12) {
        return Err(Error::BoundViolation {
            what: what.to_string(),
            value,
            bound,
        });
    }
    Ok(())
}

/// Validates a coefficient spec on its probe grid.
pub fn make_coefficients(spec: &CoefficientSpec) -> Result<Coefficients> {
    if !(spec.delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {}", spec.delta)));
    }
    if !(spec.bound > 0.0) {
        return Err(Error::InvalidParameter(format!("bound K must be positive, got {}", spec.bound)));
    }
    if !(spec.branching_rate > 0.0) || !spec.branching_rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "branching rate must be positive, got {}",
            spec.branching_rate
        )));
    }
    if !(spec.tempered_lambda > 0.0) {
        return Err(Error::InvalidParameter("tempered lambda must be positive".into()));
    }
    let required = 2.0 * spec.delta;
    let bound = spec.bound;
    match &spec.family {
        Family::Constant {
            dim,
            drift,
            sigma1,
            sigma2,
        } => {
            let dim = *dim;
            if dim == 0 {
                return Err(Error::InvalidParameter("dimension must be positive".into()));
            }
            if drift.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: drift.len(),
                });
            }
            let b = DVector::from_column_slice(drift);
            let s1 = matrix(dim, sigma1, "sigma1")?;
            let s2 = matrix(dim, sigma2, "sigma2")?;
            let ell = min_eigenvalue(&(s2.transpose() * &s2));
            if ell < required {
                return Err(Error::EllipticityViolation {
                    at: vec![0.0; dim],
                    eigenvalue: ell,
                    required,
                });
            }
            check_bound("|b|", b.norm(), bound)?;
            check_bound("|sigma1|", s1.norm(), bound)?;
            check_bound("|sigma2|", s2.norm(), bound)?;
            let s1s1 = &s1 * s1.transpose();
            let a = &s1s1 + &s2 * s2.transpose();
            let a_chol = Cholesky::new(a.clone()).ok_or_else(|| Error::EllipticityViolation {
                at: vec![0.0; dim],
                eigenvalue: min_eigenvalue(&a),
                required: 0.0,
            })?;
            let mut pair = DMatrix::zeros(2 * dim, 2 * dim);
            pair.view_mut((0, 0), (dim, dim)).copy_from(&a);
            pair.view_mut((dim, dim), (dim, dim)).copy_from(&a);
            pair.view_mut((0, dim), (dim, dim)).copy_from(&s1s1);
            pair.view_mut((dim, 0), (dim, dim)).copy_from(&s1s1);
            let pair_chol = Cholesky::new(pair).expect("a - s1 s1^T = s2 s2^T is positive definite");
            let repr = ConstantRepr {
                a_logdet: log_det(&a_chol),
                pair_logdet: log_det(&pair_chol),
                b,
                s1,
                s2,
                a_chol,
                pair_chol,
                a,
            };
            Ok(Coefficients {
                dim,
                delta: spec.delta,
                bound,
                branching_rate: spec.branching_rate,
                tempered_lambda: spec.tempered_lambda,
                min_ellipticity: ell,
                spec: spec.clone(),
                repr: Repr::Constant(Box::new(repr)),
            })
        }
        Family::Smooth { drift, sigma1, sigma2 } => {
            let probe = spec.probe;
            if probe.points < 3 || !(probe.hi > probe.lo) {
                return Err(Error::InvalidParameter("probe grid needs >= 3 points on a nonempty interval".into()));
            }
            let h = (probe.hi - probe.lo) / (probe.points - 1) as f64;
            let xs: Vec<f64> = (0..probe.points).map(|i| probe.lo + i as f64 * h).collect();
            let mut min_ell = f64::INFINITY;
            for &x in &xs {
                let s2 = sigma2.value(x);
                let ell = s2 * s2;
                min_ell = min_ell.min(ell);
                if ell < required {
                    return Err(Error::EllipticityViolation {
                        at: vec![x],
                        eigenvalue: ell,
                        required,
                    });
                }
            }
            for (name, w) in [("b", drift), ("sigma1", sigma1), ("sigma2", sigma2)] {
                let vals: Vec<f64> = xs.iter().map(|&x| w.value(x)).collect();
                let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                check_bound(&format!("|{name}|"), sup, bound)?;
                let d1 = vals.windows(2).fold(0.0f64, |m, p| m.max(((p[1] - p[0]) / h).abs()));
                check_bound(&format!("|{name}'| (difference quotient)"), d1, bound)?;
                let d2 = vals
                    .windows(3)
                    .fold(0.0f64, |m, p| m.max(((p[2] - 2.0 * p[1] + p[0]) / (h * h)).abs()));
                check_bound(&format!("|{name}''| (difference quotient)"), d2, bound)?;
            }
            Ok(Coefficients {
                dim: 1,
                delta: spec.delta,
                bound,
                branching_rate: spec.branching_rate,
                tempered_lambda: spec.tempered_lambda,
                min_ellipticity: min_ell,
                spec: spec.clone(),
                repr: Repr::Smooth {
                    b: *drift,
                    s1: *sigma1,
                    s2: *sigma2,
                },
            })
        }
    }
}

impl Coefficients {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> Kind {
        match self.repr {
            Repr::Constant(_) => Kind::Constant,
            Repr::Smooth { .. } => Kind::ParametricSmooth,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.kind() == Kind::Constant
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn branching_rate(&self) -> f64 {
        self.branching_rate
    }

    pub fn tempered_lambda(&self) -> f64 {
        self.tempered_lambda
    }

    /// Smallest eigenvalue of `σ₂ᵀσ₂` seen on the probe grid.
    pub fn min_ellipticity(&self) -> f64 {
        self.min_ellipticity
    }

    pub fn spec(&self) -> &CoefficientSpec {
        &self.spec
    }

    /// Writes `b(x)`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Constant(c) => out.copy_from_slice(c.b.as_slice()),
            Repr::Smooth { b, .. } => out[0] = b.value(x[0]),
        }
    }

    /// Writes `σ₁(x)` row-major.
    #[inline]
    pub fn sigma1_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Constant(c) => row_major(&c.s1, out),
            Repr::Smooth { s1, .. } => out[0] = s1.value(x[0]),
        }
    }

    /// Writes `σ₂(x)` row-major.
    #[inline]
    pub fn sigma2_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Constant(c) => row_major(&c.s2, out),
            Repr::Smooth { s2, .. } => out[0] = s2.value(x[0]),
        }
    }

    /// `a(x)` row-major.
    pub fn a_matrix(&self, x: &[f64]) -> Vec<f64> {
        match &self.repr {
            Repr::Constant(c) => {
                let mut out = vec![0.0; self.dim * self.dim];
                row_major(&c.a, &mut out);
                out
            }
            Repr::Smooth { .. } => vec![self.a1(x[0])],
        }
    }

    /// One-dimensional scalar views. Panics for `dim != 1`.
    #[inline]
    pub fn b1(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(c) => {
                self.assert_1d();
                c.b[0]
            }
            Repr::Smooth { b, .. } => b.value(x),
        }
    }

    #[inline]
    pub fn b1_d(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(_) => 0.0,
            Repr::Smooth { b, .. } => b.d1(x),
        }
    }

    #[inline]
    pub fn sigma1_1(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(c) => {
                self.assert_1d();
                c.s1[(0, 0)]
            }
            Repr::Smooth { s1, .. } => s1.value(x),
        }
    }

    #[inline]
    pub fn sigma2_1(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(c) => {
                self.assert_1d();
                c.s2[(0, 0)]
            }
            Repr::Smooth { s2, .. } => s2.value(x),
        }
    }

    #[inline]
    pub fn a1(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(c) => {
                self.assert_1d();
                c.a[(0, 0)]
            }
            Repr::Smooth { s1, s2, .. } => {
                let (u, v) = (s1.value(x), s2.value(x));
                u * u + v * v
            }
        }
    }

    #[inline]
    pub fn a1_d(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(_) => 0.0,
            Repr::Smooth { s1, s2, .. } => 2.0 * (s1.value(x) * s1.d1(x) + s2.value(x) * s2.d1(x)),
        }
    }

    #[inline]
    pub fn a1_dd(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Constant(_) => 0.0,
            Repr::Smooth { s1, s2, .. } => {
                let (d1, e1) = (s1.d1(x), s2.d1(x));
                2.0 * (d1 * d1 + s1.value(x) * s1.d2(x) + e1 * e1 + s2.value(x) * s2.d2(x))
            }
        }
    }

    fn assert_1d(&self) {
        debug_assert_eq!(self.dim, 1, "scalar coefficient view needs dim = 1");
    }

    fn constant(&self) -> Result<&ConstantRepr> {
        match &self.repr {
            Repr::Constant(c) => Ok(c),
            Repr::Smooth { .. } => Err(Error::UnsupportedCoefficients),
        }
    }

    /// Constant drift vector, if the coefficients are constant.
    pub fn constant_drift(&self) -> Option<Vec<f64>> {
        self.constant().ok().map(|c| c.b.as_slice().to_vec())
    }

    /// Largest `a(x)` over the probe grid (d = 1) or the largest eigenvalue of `a`.
    pub fn max_a(&self) -> f64 {
        match &self.repr {
            Repr::Constant(c) => SymmetricEigen::new(c.a.clone())
                .eigenvalues
                .iter()
                .copied()
                .fold(0.0, f64::max),
            Repr::Smooth { .. } => self.probe_max(|x| self.a1(x)),
        }
    }

    pub fn max_abs_a_dd(&self) -> f64 {
        match &self.repr {
            Repr::Constant(_) => 0.0,
            Repr::Smooth { .. } => self.probe_max(|x| self.a1_dd(x).abs()),
        }
    }

    pub fn max_abs_b(&self) -> f64 {
        match &self.repr {
            Repr::Constant(c) => c.b.amax(),
            Repr::Smooth { .. } => self.probe_max(|x| self.b1(x).abs()),
        }
    }

    pub fn max_abs_sigma1(&self) -> f64 {
        match &self.repr {
            Repr::Constant(c) => c.s1.amax(),
            Repr::Smooth { .. } => self.probe_max(|x| self.sigma1_1(x).abs()),
        }
    }

    fn probe_max(&self, f: impl Fn(f64) -> f64) -> f64 {
        let p = self.spec.probe;
        let h = (p.hi - p.lo) / (p.points - 1) as f64;
        (0..p.points).map(|i| f(p.lo + i as f64 * h)).fold(0.0, f64::max)
    }
}

fn row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
}

/// `φ_t(x) = (2πt)^{−d/2} exp(−|x|²/(2t))`.
pub fn gaussian_kernel(t: f64, x: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonpositiveTime(t));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((TWO_PI * t).powf(-0.5 * x.len() as f64) * (-r2 / (2.0 * t)).exp())
}

fn gaussian_density(chol: &Cholesky<f64, Dyn>, logdet: f64, scale: f64, diff: DVector<f64>) -> f64 {
    let k = diff.len() as f64;
    let z = chol.l_dirty().solve_lower_triangular(&diff).expect("nonsingular factor");
    let quad = z.norm_squared() / scale;
    (-0.5 * (quad + k * (TWO_PI * scale).ln() + logdet)).exp()
}

/// Transition density `p₀(t, x, y)` of one particle (constant coefficients):
/// Gaussian with mean `x + b t` and covariance `a t`.
pub fn transition_p0(c: &Coefficients, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let cr = c.constant()?;
    if !(t > 0.0) {
        return Err(Error::NonpositiveTime(t));
    }
    check_len(c.dim, x)?;
    check_len(c.dim, y)?;
    let diff = DVector::from_iterator(c.dim, (0..c.dim).map(|i| y[i] - x[i] - cr.b[i] * t));
    Ok(gaussian_density(&cr.a_chol, cr.a_logdet, t, diff))
}

/// Joint transition density `q₀(t, (x₁,x₂), (y₁,y₂))` of two particles that
/// share the environment `W`; cross-covariance `σ₁σ₁ᵀ t`.
pub fn pair_transition_q0(
    c: &Coefficients,
    t: f64,
    from: (&[f64], &[f64]),
    to: (&[f64], &[f64]),
) -> Result<f64> {
    let cr = c.constant()?;
    if !(t > 0.0) {
        return Err(Error::NonpositiveTime(t));
    }
    for v in [from.0, from.1, to.0, to.1] {
        check_len(c.dim, v)?;
    }
    let d = c.dim;
    let diff = DVector::from_iterator(
        2 * d,
        (0..2 * d).map(|k| {
            let i = k % d;
            let (x, y) = if k < d { (from.0, to.0) } else { (from.1, to.1) };
            y[i] - x[i] - cr.b[i] * t
        }),
    );
    Ok(gaussian_density(&cr.pair_chol, cr.pair_logdet, t, diff))
}

fn check_len(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    Ok(())
}

/// First and second derivative stencils, second order everywhere
/// (one-sided at the two ends).
fn derivatives(u: &[f64], dx: f64) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 1..n - 1 {
        d1[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        d2[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
    }
    d1[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
    d1[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * dx);
    d2[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / (dx * dx);
    d2[n - 1] = (2.0 * u[n - 1] - 5.0 * u[n - 2] + 4.0 * u[n - 3] - u[n - 4]) / (dx * dx);
    (d1, d2)
}

fn check_operator_grid(c: &Coefficients, field: &DensityField, budget: f64) -> Result<()> {
    if c.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: c.dim(),
        });
    }
    if field.grid().len() < 4 {
        return Err(Error::InvalidParameter("operator stencils need at least 4 nodes".into()));
    }
    let dx = field.grid().dx();
    let value = dx * dx * c.max_abs_a_dd();
    if value > budget {
        return Err(Error::GridTooCoarse { value, budget });
    }
    Ok(())
}

/// `L*u = ½a u'' + (a' − b)u' + (½a'' − b')u` by finite differences (d = 1).
pub fn discretize_l_star(c: &Coefficients, field: &DensityField) -> Result<DensityField> {
    discretize_l_star_with_budget(c, field, DEFAULT_CURVATURE_BUDGET)
}

pub fn discretize_l_star_with_budget(c: &Coefficients, field: &DensityField, budget: f64) -> Result<DensityField> {
    check_operator_grid(c, field, budget)?;
    let g = *field.grid();
    let u = field.values();
    let (d1, d2) = derivatives(u, g.dx());
    let out = (0..g.len())
        .map(|i| {
            let x = g.x(i);
            0.5 * c.a1(x) * d2[i] + (c.a1_d(x) - c.b1(x)) * d1[i] + (0.5 * c.a1_dd(x) - c.b1_d(x)) * u[i]
        })
        .collect();
    let mut f = DensityField::from_values(g, out)?;
    f.set_time(field.time());
    Ok(f)
}

/// `Lφ = bφ' + ½aφ''` with the same stencils as [`discretize_l_star`].
pub fn discretize_l(c: &Coefficients, field: &DensityField) -> Result<DensityField> {
    check_operator_grid(c, field, f64::INFINITY)?;
    let g = *field.grid();
    let (d1, d2) = derivatives(field.values(), g.dx());
    let out = (0..g.len())
        .map(|i| {
            let x = g.x(i);
            c.b1(x) * d1[i] + 0.5 * c.a1(x) * d2[i]
        })
        .collect();
    DensityField::from_values(g, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::quadrature::adaptive_simpson;

    fn standard() -> Coefficients {
        make_coefficients(&CoefficientSpec::constant_1d(0.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn constant_case_has_a_equal_two() {
        let c = standard();
        assert_eq!(c.a1(0.3), 2.0);
        assert_eq!(c.kind(), Kind::Constant);
        assert_eq!(c.delta(), 0.5);
    }

    #[test]
    fn zero_sigma2_is_rejected() {
        let mut spec = CoefficientSpec::constant_1d(0.0, 1.0, 0.0);
        spec.delta = 0.1;
        assert!(matches!(make_coefficients(&spec), Err(Error::EllipticityViolation { .. })));
    }

    #[test]
    fn sine_drift_passes_probe_bounds() {
        let spec = CoefficientSpec {
            family: Family::Smooth {
                drift: Wave::sine(1.0, 1.0),
                sigma1: Wave::constant(1.0),
                sigma2: Wave::constant(1.0),
            },
            delta: 0.5,
            bound: 2.0,
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        };
        let c = make_coefficients(&spec).unwrap();
        assert_eq!(c.kind(), Kind::ParametricSmooth);
        // an independent probe of |b'| on the same grid stays <= 1 <= K
        let p = spec.probe;
        let h = (p.hi - p.lo) / (p.points - 1) as f64;
        let worst = (0..p.points - 1)
            .map(|i| {
                let x = p.lo + i as f64 * h;
                (((x + h).sin() - x.sin()) / h).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 && worst <= spec.bound);

        let mut tight = spec.clone();
        tight.bound = 0.9;
        assert!(matches!(make_coefficients(&tight), Err(Error::BoundViolation { .. })));
    }

    #[test]
    fn gaussian_kernel_values() {
        let v = gaussian_kernel(1.0, &[0.0]).unwrap();
        assert!((v - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(gaussian_kernel(0.7, &[1.3]).unwrap(), gaussian_kernel(0.7, &[-1.3]).unwrap());
        assert!(matches!(gaussian_kernel(0.0, &[0.0]), Err(Error::NonpositiveTime(_))));
        for t in [0.01f64, 0.5, 3.0] {
            let s = t.sqrt();
            let mass = adaptive_simpson(&|x| gaussian_kernel(t, &[x]).unwrap(), -15.0 * s, 15.0 * s, 1e-12);
            assert!((mass - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn p0_closed_form() {
        let c = standard();
        let v = transition_p0(&c, 0.5, &[0.2], &[0.2]).unwrap();
        assert!((v - 0.398_942_280_4).abs() < 1e-10);
        let mass = adaptive_simpson(&|y| transition_p0(&c, 0.5, &[0.0], &[y]).unwrap(), -12.0, 12.0, 1e-12);
        assert!((mass - 1.0).abs() < 1e-6);

        let mut spec = CoefficientSpec::constant_1d(1.0, 0.0, 1.0);
        spec.bound = 2.0;
        let drift = make_coefficients(&spec).unwrap();
        let peak = (0..=400)
            .map(|k| -2.0 + k as f64 * 0.02)
            .max_by(|a, b| {
                let pa = transition_p0(&drift, 2.0, &[0.0], &[*a]).unwrap();
                let pb = transition_p0(&drift, 2.0, &[0.0], &[*b]).unwrap();
                pa.total_cmp(&pb)
            })
            .unwrap();
        assert!((peak - 2.0).abs() < 1e-9);
    }

    #[test]
    fn p0_unsupported_for_smooth() {
        let spec = CoefficientSpec {
            family: Family::Smooth {
                drift: Wave::sine(0.5, 1.0),
                sigma1: Wave::constant(0.5),
                sigma2: Wave::constant(1.0),
            },
            delta: 0.5,
            bound: 2.0,
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        };
        let c = make_coefficients(&spec).unwrap();
        assert!(matches!(transition_p0(&c, 1.0, &[0.0], &[0.0]), Err(Error::UnsupportedCoefficients)));
        assert!(matches!(
            pair_transition_q0(&c, 1.0, (&[0.0], &[0.0]), (&[0.0], &[0.0])),
            Err(Error::UnsupportedCoefficients)
        ));
    }

    #[test]
    fn q0_closed_form_and_independence() {
        let c = standard();
        let v = pair_transition_q0(&c, 1.0, (&[0.0], &[0.0]), (&[0.0], &[0.0])).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI * 3.0f64.sqrt());
        assert!((v - expected).abs() < 1e-12);

        let indep = make_coefficients(&CoefficientSpec::constant_1d(0.0, 0.0, 1.0)).unwrap();
        for (x1, x2, y1, y2) in [(0.0, 0.5, 0.3, -0.2), (1.0, -1.0, 0.0, 2.0)] {
            let q = pair_transition_q0(&indep, 0.7, (&[x1], &[x2]), (&[y1], &[y2])).unwrap();
            let p = transition_p0(&indep, 0.7, &[x1], &[y1]).unwrap() * transition_p0(&indep, 0.7, &[x2], &[y2]).unwrap();
            assert!((q - p).abs() <= 1e-15 * p.max(1e-300) * 10.0);
        }
    }

    #[test]
    fn q0_normalization_and_marginal() {
        let c = standard();
        let t = 0.8;
        let marginal = |y1: f64| {
            adaptive_simpson(
                &|y2| pair_transition_q0(&c, t, (&[0.1], &[-0.4]), (&[y1], &[y2])).unwrap(),
                -14.0,
                14.0,
                1e-11,
            )
        };
        for y1 in [-1.0, 0.0, 0.7] {
            let p = transition_p0(&c, t, &[0.1], &[y1]).unwrap();
            assert!((marginal(y1) - p).abs() < 1e-5);
        }
        let total = adaptive_simpson(&marginal, -14.0, 14.0, 1e-8);
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn chapman_kolmogorov() {
        let c = standard();
        let (s, t, x, y) = (0.3, 0.6, 0.2, -0.5);
        let lhs = adaptive_simpson(
            &|z| transition_p0(&c, s, &[x], &[z]).unwrap() * transition_p0(&c, t, &[z], &[y]).unwrap(),
            -15.0,
            15.0,
            1e-12,
        );
        let rhs = transition_p0(&c, s + t, &[x], &[y]).unwrap();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn l_star_annihilates_constants() {
        let c = standard();
        let g = Grid::new(-1.0, 1.0, 0.01).unwrap();
        let u = DensityField::from_fn(g, |_| 3.0);
        let out = discretize_l_star(&c, &u).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn l_star_matches_heat_kernel_time_derivative() {
        let spec = CoefficientSpec::constant_1d(0.0, 0.0, 1.0);
        let c = make_coefficients(&spec).unwrap();
        let g = Grid::new(-4.0, 4.0, 0.005).unwrap();
        let (t, dt) = (0.5, 1e-6);
        let phi = |s: f64| DensityField::from_fn(g, move |x| gaussian_kernel(s, &[x]).unwrap());
        let lstar = discretize_l_star(&c, &phi(t)).unwrap();
        let (a, b) = (phi(t + dt), phi(t));
        let worst = (0..g.len())
            .map(|i| (lstar.values()[i] - (a.values()[i] - b.values()[i]) / dt).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "max deviation {worst}");
    }

    #[test]
    fn discrete_adjointness() {
        let spec = CoefficientSpec {
            family: Family::Smooth {
                drift: Wave::sine(0.5, 1.0),
                sigma1: Wave {
                    offset: 0.5,
                    amplitude: 0.2,
                    frequency: 2.0,
                    phase: 0.3,
                },
                sigma2: Wave::constant(1.0),
            },
            delta: 0.4,
            bound: 2.0,
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        };
        let c = make_coefficients(&spec).unwrap();
        let g = Grid::new(-3.0, 3.0, 1e-3).unwrap();
        let bump = |x: f64, c0: f64| (-(x - c0) * (x - c0) / 0.1).exp();
        let phi = DensityField::from_fn(g, |x| bump(x, 0.2));
        let u = DensityField::from_fn(g, |x| bump(x, -0.1) * (1.0 + 0.3 * x));
        let lphi = discretize_l(&c, &phi).unwrap();
        let lstar = discretize_l_star(&c, &u).unwrap();
        let lhs = lphi.values().iter().zip(u.values()).map(|(a, b)| a * b).sum::<f64>() * g.dx();
        let rhs = phi.values().iter().zip(lstar.values()).map(|(a, b)| a * b).sum::<f64>() * g.dx();
        assert!(((lhs - rhs) / lhs.abs()).abs() <= 1e-3, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn coarse_grid_rejected() {
        let spec = CoefficientSpec {
            family: Family::Smooth {
                drift: Wave::constant(0.0),
                sigma1: Wave::sine(1.0, 1.0),
                sigma2: Wave::constant(1.0),
            },
            delta: 0.5,
            bound: 2.0,
            branching_rate: 1.0,
            tempered_lambda: 1.0,
            probe: ProbeGrid::default(),
        };
        let c = make_coefficients(&spec).unwrap();
        let g = Grid::new(-1.0, 1.0, 0.5).unwrap();
        let u = DensityField::from_fn(g, |_| 1.0);
        assert!(matches!(discretize_l_star(&c, &u), Err(Error::GridTooCoarse { .. })));
    }
}
