//! Post-processing: Hölder-exponent regression, box counting and Monte
//! Carlo summaries, plus synthetic fields of known regularity used to
//! calibrate the exponent estimator.

use std::collections::HashSet;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::grid::{DensityField, Grid};
use crate::measure::AtomicMeasure;
use crate::noise::{stream, CounterRng};
use crate::{Error, Result};

pub const MIN_FIELDS: usize = 100;
pub const MIN_LAG: usize = 4;
/// Lags in grid cells used when none are given: 4 to 64 cells.
pub const DEFAULT_LAGS: [usize; 9] = [4, 6, 8, 12, 16, 24, 32, 48, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub scales: Vec<f64>,
    /// `log S(δ)` with `S(δ)` the pooled mean of `|u(x+δ) − u(x)|²`.
    pub log_moments: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval of the slope.
    pub slope_ci: (f64, f64),
    /// `slope/2` clipped to `[0, 1]`.
    pub exponent: f64,
    pub exponent_ci: (f64, f64),
    pub fields: usize,
}

/// Structure-function regression over at least [`MIN_FIELDS`] fields.
pub fn estimate_holder(fields: &[DensityField], lags: &[usize]) -> Result<RegressionReport> {
    estimate_holder_with(fields, lags, MIN_FIELDS)
}

pub fn estimate_holder_with(fields: &[DensityField], lags: &[usize], min_fields: usize) -> Result<RegressionReport> {
    if fields.len() < min_fields.max(1) {
        return Err(Error::InsufficientData(format!(
            "{} fields, need at least {}",
            fields.len(),
            min_fields
        )));
    }
    let grid = *fields[0].grid();
    if fields.iter().any(|f| *f.grid() != grid) {
        return Err(Error::InvalidParameter("fields must share one grid".into()));
    }
    let lags: Vec<usize> = if lags.is_empty() { DEFAULT_LAGS.to_vec() } else { lags.to_vec() };
    if lags.len() < 4 {
        return Err(Error::InsufficientData(format!("{} scales, need at least 4", lags.len())));
    }
    if let Some(&k) = lags.iter().find(|&&k| k < MIN_LAG) {
        return Err(Error::InvalidParameter(format!("lag {k} is below {MIN_LAG} grid cells")));
    }
    let (lo, hi) = lags.iter().fold((usize::MAX, 0), |(lo, hi), &k| (lo.min(k), hi.max(k)));
    if hi < 10 * lo {
        return Err(Error::InsufficientData(format!(
            "scales {lo}..{hi} cells span less than a decade"
        )));
    }
    if hi >= grid.len() {
        return Err(Error::InvalidParameter(format!("lag {hi} exceeds the grid")));
    }
    let mut log_moments = Vec::with_capacity(lags.len());
    for &k in &lags {
        let (mut sum, mut count) = (0.0, 0usize);
        for f in fields {
            let v = f.values();
            for i in 0..v.len() - k {
                let d = v[i + k] - v[i];
                sum += d * d;
                count += 1;
            }
        }
        let s = sum / count as f64;
        if !(s > 0.0) {
            return Err(Error::InsufficientData(format!("structure function vanishes at lag {k}")));
        }
        log_moments.push(s.ln());
    }
    let scales: Vec<f64> = lags.iter().map(|&k| k as f64 * grid.dx()).collect();
    let xs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let fit = least_squares(&xs, &log_moments)?;
    let clip = |v: f64| (v / 2.0).clamp(0.0, 1.0);
    Ok(RegressionReport {
        scales,
        log_moments,
        slope: fit.slope,
        intercept: fit.intercept,
        slope_ci: fit.slope_ci,
        exponent: clip(fit.slope),
        exponent_ci: (clip(fit.slope_ci.0), clip(fit.slope_ci.1)),
        fields: fields.len(),
    })
}

struct Fit {
    slope: f64,
    intercept: f64,
    slope_ci: (f64, f64),
}

fn least_squares(x: &[f64], y: &[f64]) -> Result<Fit> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let df = n - 2.0;
    let se = (rss / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(Fit {
        slope,
        intercept,
        slope_ci: (slope - t * se, slope + t * se),
    })
}

/// Number of distinct `eps`-cells holding at least one atom, and their
/// total volume `count·eps^d`.
pub fn box_occupancy(m: &AtomicMeasure, eps: f64) -> Result<(usize, f64)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let cells: HashSet<Vec<i64>> = m
        .atoms()
        .map(|(x, _)| x.iter().map(|v| (v / eps).floor() as i64).collect())
        .collect();
    let count = cells.len();
    Ok((count, count as f64 * eps.powi(m.dim() as i32)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub se: f64,
    pub ci99: (f64, f64),
}

const Z99: f64 = 2.575_829_303_548_901;

/// Mean, unbiased variance, standard error and a normal 99% interval.
pub fn mc_summary(samples: &[f64]) -> Result<Summary> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("{} samples, need at least 2", samples.len())));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se = (variance / n).sqrt();
    Ok(Summary {
        n: samples.len(),
        mean,
        variance,
        se,
        ci99: (mean - Z99 * se, mean + Z99 * se),
    })
}

/// Fractional Brownian motion with Hurst index `h` on `grid`, pinned to 0
/// at the left end, by circulant embedding of fractional Gaussian noise.
pub fn fractional_field(grid: Grid, hurst: f64, seed: u64) -> Result<DensityField> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidParameter(format!("Hurst index must lie in (0, 1), got {hurst}")));
    }
    let n = grid.len() - 1;
    let m = 2 * n.next_power_of_two();
    let gamma = |k: usize| {
        let k = k as f64;
        0.5 * ((k + 1.0).powf(2.0 * hurst) - 2.0 * k.powf(2.0 * hurst) + (k - 1.0).abs().powf(2.0 * hurst))
    };
    let half = m / 2;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|k| Complex::new(gamma(if k <= half { k } else { m - k }), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);
    if let Some(neg) = row.iter().find(|c| c.re < -1e-9) {
        return Err(Error::InvalidParameter(format!(
            "circulant embedding is not nonnegative (eigenvalue {})",
            neg.re
        )));
    }
    let mut rng = CounterRng::for_stream(seed, &[stream::SYNTHETIC, hurst.to_bits()]);
    let mut w: Vec<Complex<f64>> = row
        .iter()
        .map(|c| {
            let s = (c.re.max(0.0) / m as f64).sqrt();
            Complex::new(s * rng.normal(), s * rng.normal())
        })
        .collect();
    fft.process(&mut w);
    // fGn with unit step variance; rescale to the grid spacing
    let scale = grid.dx().powf(hurst);
    let mut values = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    values.push(0.0);
    for z in w.iter().take(n) {
        acc += scale * z.re;
        values.push(acc);
    }
    DensityField::from_values(grid, values)
}

/// Standard Brownian path on `grid`, 0 at the left end.
pub fn brownian_field(grid: Grid, seed: u64) -> DensityField {
    let mut rng = CounterRng::for_stream(seed, &[stream::SYNTHETIC, 0]);
    let sd = grid.dx().sqrt();
    let mut acc = 0.0;
    let values = (0..grid.len())
        .map(|i| {
            if i > 0 {
                acc += sd * rng.normal();
            }
            acc
        })
        .collect();
    DensityField::from_values(grid, values).expect("one value per node")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::from_nodes(0.0, 1.0 / 1024.0, 1025).unwrap()
    }

    #[test]
    fn summary_examples() {
        let s = mc_summary(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.se), (1.0, 0.0, 0.0));
        let s = mc_summary(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 2.0));
        assert!(s.ci99.0 < 1.0 && s.ci99.1 > 1.0);
        assert!(matches!(mc_summary(&[1.0]), Err(Error::InsufficientData(_))));
        let mut rng = CounterRng::new(4);
        let z: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        assert!(mc_summary(&z).unwrap().mean.abs() < 0.03);
    }

    #[test]
    fn occupancy() {
        let single = AtomicMeasure::dirac(&[0.3, 0.7], 1.0).unwrap();
        for eps in [1.0, 0.1, 0.01] {
            assert_eq!(box_occupancy(&single, eps).unwrap().0, 1);
        }
        let mut line = AtomicMeasure::new(1);
        for k in 0..100 {
            line.push(&[(k as f64 + 0.5) / 100.0], 1.0).unwrap();
        }
        let (count, vol) = box_occupancy(&line, 0.01).unwrap();
        assert_eq!(count, 100);
        assert!((vol - 1.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let v = box_occupancy(&line, 0.5f64.powi(k)).unwrap().1;
            assert!(v <= prev);
            prev = v;
        }
        assert!(box_occupancy(&line, 0.0).is_err());
    }

    #[test]
    fn smooth_field_is_lipschitz() {
        let g = Grid::new(-5.0, 5.0, 0.01).unwrap();
        let fields: Vec<DensityField> = (0..100)
            .map(|k| {
                let c = -1.0 + 0.02 * k as f64;
                DensityField::from_fn(g, |x| (-(x - c) * (x - c)).exp())
            })
            .collect();
        let r = estimate_holder(&fields, &[]).unwrap();
        assert!(r.exponent >= 0.95, "{r:?}");
    }

    #[test]
    fn brownian_paths_have_exponent_one_half() {
        let fields: Vec<DensityField> = (0..500).map(|k| brownian_field(grid(), k)).collect();
        let r = estimate_holder(&fields, &[]).unwrap();
        assert!((0.45..=0.55).contains(&r.exponent), "{r:?}");
    }

    #[test]
    fn calibration_on_fractional_fields() {
        for h in [0.3, 0.5, 0.7] {
            let fields: Vec<DensityField> = (0..200).map(|k| fractional_field(grid(), h, k).unwrap()).collect();
            let r = estimate_holder(&fields, &[]).unwrap();
            assert!((r.exponent - h).abs() <= 0.07, "H = {h}: {r:?}");
        }
    }

    #[test]
    fn preconditions() {
        let g = grid();
        let few: Vec<DensityField> = (0..10).map(|k| brownian_field(g, k)).collect();
        assert!(matches!(estimate_holder(&few, &[]), Err(Error::InsufficientData(_))));
        let many: Vec<DensityField> = (0..100).map(|k| brownian_field(g, k)).collect();
        assert!(estimate_holder(&many, &[4, 8, 16]).is_err());
        assert!(estimate_holder(&many, &[2, 8, 16, 32]).is_err());
        assert!(estimate_holder(&many, &[4, 5, 6, 7]).is_err());
    }
}
