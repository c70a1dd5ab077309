//! Finite atomic measures and the test functions integrated against them.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Finite weighted point measure `Σ m_k δ_{x_k}` on ℝ^d.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    dim: usize,
    positions: Vec<f64>,
    masses: Vec<f64>,
    total_mass: f64,
}

impl AtomicMeasure {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            dim,
            positions: Vec::new(),
            masses: Vec::new(),
            total_mass: 0.0,
        }
    }

    pub fn dirac(position: &[f64], mass: f64) -> Result<Self> {
        let mut m = Self::new(position.len());
        m.push(position, mass)?;
        Ok(m)
    }

    pub fn with_capacity(dim: usize, atoms: usize) -> Self {
        let mut m = Self::new(dim);
        m.positions.reserve(atoms * dim);
        m.masses.reserve(atoms);
        m
    }

    pub fn push(&mut self, position: &[f64], mass: f64) -> Result<()> {
        if position.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: position.len(),
            });
        }
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(Error::InvalidParameter(format!("atom mass must be finite and >= 0, got {mass}")));
        }
        self.positions.extend_from_slice(position);
        self.masses.push(mass);
        self.total_mass += mass;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Cached sum of atom masses.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn mass(&self, k: usize) -> f64 {
        self.masses[k]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.positions
            .chunks_exact(self.dim)
            .zip(self.masses.iter().copied())
    }

    /// `⟨m, f⟩ = Σ mass·f(position)`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms().map(|(x, m)| m * f(x)).sum()
    }

    /// `Σ mass·exp(−λ|x|)`, the weight defining tempered measures.
    pub fn tempered_weight(&self, lambda: f64) -> f64 {
        self.integrate(|x| (-lambda * norm(x)).exp())
    }

    pub fn is_tempered(&self, lambda: f64) -> bool {
        lambda > 0.0 && self.tempered_weight(lambda).is_finite()
    }

    /// Largest absolute coordinate over all atoms (0 for the zero measure).
    pub fn max_abs_coordinate(&self) -> f64 {
        self.positions.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Test functions used for readouts. Scalar families act on the first
/// coordinate; `Gaussian` is radial in ℝ^d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    One,
    Power { exponent: i32 },
    Gaussian { center: f64, sd: f64 },
    Indicator { lo: f64, hi: f64 },
    Plateau { lo: f64, hi: f64, height: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::One => 1.0,
            TestFunction::Gaussian { center, sd } => {
                let d = x.len() as i32;
                let r2: f64 = x.iter().map(|v| (v - center) * (v - center)).sum();
                (-(r2) / (2.0 * sd * sd)).exp() / (2.0 * std::f64::consts::PI * sd * sd).powf(0.5 * d as f64)
            }
            _ => self.eval1(x[0]),
        }
    }

    pub fn eval1(&self, x: f64) -> f64 {
        match *self {
            TestFunction::One => 1.0,
            TestFunction::Power { exponent } => x.powi(exponent),
            TestFunction::Gaussian { center, sd } => {
                let z = (x - center) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            TestFunction::Indicator { lo, hi } => f64::from(u8::from(x >= lo && x <= hi)),
            TestFunction::Plateau { lo, hi, height } => {
                if x >= lo && x <= hi {
                    height
                } else {
                    0.0
                }
            }
        }
    }

    /// `E f(y + √var·Z)` for standard normal `Z`, in closed form.
    pub fn smoothed(&self, y: f64, var: f64) -> f64 {
        if var <= 0.0 {
            return self.eval1(y);
        }
        let sd = var.sqrt();
        match *self {
            TestFunction::One => 1.0,
            TestFunction::Power { exponent } if exponent >= 0 => {
                // Σ_j C(k, j) y^{k-j} sd^j E Z^j, odd moments vanish
                let k = exponent as u32;
                let mut total = 0.0;
                let mut binom = 1.0;
                let mut moment = 1.0;
                for j in 0..=k {
                    if j > 0 {
                        binom *= (k - j + 1) as f64 / j as f64;
                    }
                    if j % 2 == 0 {
                        if j >= 2 {
                            moment *= (j - 1) as f64;
                        }
                        total += binom * y.powi((k - j) as i32) * sd.powi(j as i32) * moment;
                    }
                }
                total
            }
            TestFunction::Power { .. } => {
                crate::quadrature::gaussian_expectation(&|x| self.eval1(x), y, var, 1e-10)
            }
            TestFunction::Gaussian { center, sd: s } => {
                TestFunction::Gaussian {
                    center,
                    sd: (s * s + var).sqrt(),
                }
                .eval1(y)
            }
            TestFunction::Indicator { lo, hi } => normal_cdf((hi - y) / sd) - normal_cdf((lo - y) / sd),
            TestFunction::Plateau { lo, hi, height } => {
                height * (normal_cdf((hi - y) / sd) - normal_cdf((lo - y) / sd))
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TestFunction::One => "one".into(),
            TestFunction::Power { exponent } => format!("x^{exponent}"),
            TestFunction::Gaussian { center, sd } => format!("gauss({center},{sd})"),
            TestFunction::Indicator { lo, hi } => format!("ind[{lo},{hi}]"),
            TestFunction::Plateau { lo, hi, height } => format!("plateau[{lo},{hi}]x{height}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smoothing_matches_quadrature() {
        let fs = [
            TestFunction::One,
            TestFunction::Power { exponent: 2 },
            TestFunction::Power { exponent: 3 },
            TestFunction::Gaussian { center: 0.3, sd: 0.5 },
            TestFunction::Indicator { lo: -0.5, hi: 1.0 },
            TestFunction::Plateau { lo: 0.0, hi: 2.0, height: 3.0 },
        ];
        for f in fs {
            for (y, v) in [(0.0, 1.0), (0.7, 0.3), (-1.2, 2.0)] {
                let q = crate::quadrature::gaussian_expectation(&|x| f.eval1(x), y, v, 1e-11);
                assert!((f.smoothed(y, v) - q).abs() < 1e-7, "{} {y} {v}", f.label());
            }
            assert_eq!(f.smoothed(0.4, 0.0), f.eval1(0.4));
        }
        assert!((TestFunction::Power { exponent: 2 }.smoothed(0.0, 2.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn integrate_basics() {
        let m = AtomicMeasure::dirac(&[0.0], 2.0).unwrap();
        assert_eq!(m.integrate(|x| x[0] * x[0]), 0.0);
        assert_eq!(m.integrate(|_| 1.0), m.total_mass());

        let mut two = AtomicMeasure::new(1);
        two.push(&[1.0], 1.0).unwrap();
        two.push(&[-1.0], 1.0).unwrap();
        assert_eq!(two.integrate(|x| x[0]), 0.0);
    }

    #[test]
    fn rejects_negative_mass_and_wrong_dim() {
        let mut m = AtomicMeasure::new(2);
        assert!(m.push(&[0.0, 0.0], -1.0).is_err());
        assert!(m.push(&[0.0], 1.0).is_err());
    }

    #[test]
    fn tempered_check() {
        let m = AtomicMeasure::dirac(&[3.0], 1.0).unwrap();
        assert!(m.is_tempered(0.5));
        assert!((m.tempered_weight(1.0) - (-3.0f64).exp()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn total_mass_is_order_invariant(
            atoms in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 0..64),
            seed in any::<u64>(),
        ) {
            let mut fwd = AtomicMeasure::new(1);
            for (x, m) in &atoms {
                fwd.push(&[*x], *m).unwrap();
            }
            let mut shuffled = atoms.clone();
            // deterministic Fisher-Yates driven by the proptest seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let mut rev = AtomicMeasure::new(1);
            for (x, m) in &shuffled {
                rev.push(&[*x], *m).unwrap();
            }
            let sum: f64 = atoms.iter().map(|a| a.1).sum();
            let tol = 1e-12 * sum.max(1.0);
            prop_assert!((fwd.total_mass() - rev.total_mass()).abs() <= tol);
            prop_assert!((fwd.total_mass() - fwd.masses().iter().sum::<f64>()).abs() <= tol);
        }
    }
}
