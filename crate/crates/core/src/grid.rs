//! Uniform one-dimensional grids and grid-sampled densities.

use crate::{Error, Result};

/// Uniform node set `x_i = x_min + i·dx`, `i = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    x_min: f64,
    dx: f64,
    len: usize,
}

impl Grid {
    /// Grid covering `[x_min, x_max]`; the upper end is rounded to the
    /// nearest node.
    pub fn new(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::InvalidParameter(format!("grid spacing must be positive, got {dx}")));
        }
        if !(x_max > x_min) {
            return Err(Error::InvalidParameter(format!(
                "grid bounds must satisfy x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        let cells = ((x_max - x_min) / dx).round() as usize;
        Self::from_nodes(x_min, dx, cells + 1)
    }

    pub fn from_nodes(x_min: f64, dx: f64, len: usize) -> Result<Self> {
        if !(dx > 0.0) || len < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs dx > 0 and at least two nodes (dx = {dx}, len = {len})"
            )));
        }
        Ok(Self { x_min, dx, len })
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.x(i))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max()
    }

    /// Cell index and fractional offset for linear interpolation, or `None`
    /// outside the grid.
    #[inline]
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !self.contains(x) {
            return None;
        }
        let s = (x - self.x_min) / self.dx;
        let i = (s.floor() as usize).min(self.len - 2);
        Some((i, s - i as f64))
    }

    /// Like [`Grid::locate`] but clamps to the end cells.
    #[inline]
    pub fn locate_clamped(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.x_min) / self.dx).clamp(0.0, (self.len - 1) as f64);
        let i = (s.floor() as usize).min(self.len - 2);
        (i, s - i as f64)
    }

    pub(crate) fn outside(&self, x: f64) -> Error {
        Error::SupportOutsideGrid {
            position: x,
            lo: self.x_min,
            hi: self.x_max(),
        }
    }
}

/// Nonnegative density per unit length sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
    time: f64,
}

impl DensityField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            time: 0.0,
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().map(f).collect(),
            time: 0.0,
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self {
            grid,
            values,
            time: 0.0,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    /// `Σ values·dx`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    /// Riemann sum of `f·values`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * f(self.grid.x(i)))
            .sum::<f64>()
            * self.grid.dx()
    }

    /// Linear interpolation; `None` outside the grid.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        let (i, w) = self.grid.locate(x)?;
        Some(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                got: other.grid.len(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.dx())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rounds_upper_end_to_a_node() {
        let g = Grid::new(-1.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 21);
        assert!((g.x_max() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locate_and_interpolate() {
        let g = Grid::new(0.0, 1.0, 0.25).unwrap();
        let f = DensityField::from_fn(g, |x| 2.0 * x + 1.0);
        assert!((f.interpolate(0.6).unwrap() - 2.2).abs() < 1e-12);
        assert!((f.interpolate(1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(f.interpolate(1.01).is_none());
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(Grid::new(0.0, 1.0, 0.0).is_err());
        assert!(Grid::new(1.0, 0.0, 0.1).is_err());
    }
}
