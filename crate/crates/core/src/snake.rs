//! Snake representation of the superprocess.
//!
//! The lifetime process `ζ` is a reflected Gaussian random walk. Its local
//! time at 0 is the discrete Tanaka term of the reflection, normalized as an
//! occupation density so that excursions of height above `h` arrive at rate
//! `1/(2h)` per unit of `ℓ⁰`. The walk stops at `τ = inf{ℓ⁰ ≥ μ(ℝ^d)}`.
//!
//! The tip path is a stack of spatial positions indexed by lifetime level.
//! Level cells have width `κ·dt`, where `dt` is the environment step and
//! `κ = γ/4`, so superprocess time `t` is read at level `κt` and each cell
//! advances the motion by one environment step. Raising `ζ` pushes cells,
//! lowering it pops them, which makes two tips agree exactly up to the
//! running minimum of `ζ` between them.
//!
//! `X^h_t` puts mass `2h` at the tip position at level `κt` for every
//! excursion of `ζ` above that level whose height exceeds `h`.

use serde::{Deserialize, Serialize};

use crate::measure::AtomicMeasure;
use crate::model::Coefficients;
use crate::noise::{stream, CounterRng, NoisePath};
use crate::{Error, Result};

/// Shift of the maximum of a discretely sampled Brownian path, in units of `√ds`.
const MONITORING_SHIFT: f64 = 0.5826;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeConfig {
    pub ds: f64,
    /// Longest simulated lifetime time.
    pub horizon: f64,
    /// Value of `ℓ⁰` that defines `τ`.
    pub target: f64,
    /// Optional upper reflection level.
    pub cap: Option<f64>,
}

impl LifetimeConfig {
    pub fn new(ds: f64, horizon: f64) -> Self {
        Self {
            ds,
            horizon,
            target: 1.0,
            cap: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LifetimePath {
    ds: f64,
    zeta: Vec<f64>,
    local_time_zero: Vec<f64>,
    tau_index: Option<usize>,
}

impl LifetimePath {
    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn local_time_zero(&self) -> &[f64] {
        &self.local_time_zero
    }

    /// First index with `ℓ⁰ ≥ target`, `None` if the horizon came first.
    pub fn tau_index(&self) -> Option<usize> {
        self.tau_index
    }

    pub fn horizon_reached(&self) -> bool {
        self.tau_index.is_none()
    }

    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.zeta.iter().copied().fold(0.0, f64::max)
    }

    /// Whether the walk reflected at 0 on the step into `k`.
    pub fn reflected_at(&self, k: usize) -> bool {
        k > 0 && self.local_time_zero[k] > self.local_time_zero[k - 1]
    }
}

pub fn simulate_lifetime(seed: u64, ds: f64, horizon: f64) -> Result<LifetimePath> {
    simulate_lifetime_with(seed, &LifetimeConfig::new(ds, horizon))
}

pub fn simulate_lifetime_with(seed: u64, cfg: &LifetimeConfig) -> Result<LifetimePath> {
    if !(cfg.ds > 0.0) || !cfg.ds.is_finite() {
        return Err(Error::InvalidStep(format!("ds must be positive, got {}", cfg.ds)));
    }
    if !(cfg.horizon > 0.0) || !(cfg.target > 0.0) {
        return Err(Error::InvalidParameter("horizon and target must be positive".into()));
    }
    if let Some(cap) = cfg.cap {
        if !(cap > 0.0) {
            return Err(Error::InvalidParameter(format!("cap must be positive, got {cap}")));
        }
    }
    let max_steps = (cfg.horizon / cfg.ds).ceil() as usize;
    let sd = cfg.ds.sqrt();
    let mut rng = CounterRng::for_stream(seed, &[stream::LIFETIME, 1]);
    let mut zeta = vec![0.0];
    let mut ell = vec![0.0];
    let (mut z, mut l) = (0.0f64, 0.0f64);
    let mut tau_index = None;
    for k in 1..=max_steps {
        let y = z + sd * rng.normal();
        if y < 0.0 {
            l += 4.0 * (-y);
            z = -y;
        } else {
            z = y;
        }
        if let Some(cap) = cfg.cap {
            if z > cap {
                z = (2.0 * cap - z).max(0.0);
            }
        }
        zeta.push(z);
        ell.push(l);
        if l >= cfg.target {
            tau_index = Some(k);
            break;
        }
    }
    Ok(LifetimePath {
        ds: cfg.ds,
        zeta,
        local_time_zero: ell,
        tau_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub start: usize,
    pub end: usize,
    /// `max ζ − level` over the excursion.
    pub height: f64,
}

/// Height threshold applied to discretely sampled maxima.
fn height_threshold(h: f64, ds: f64) -> f64 {
    (h - 2.0 * MONITORING_SHIFT * ds.sqrt()).max(0.5 * h)
}

/// Tracks excursions above one level while the path is scanned.
#[derive(Debug, Clone)]
struct LevelScan {
    level: f64,
    threshold: f64,
    open: Option<(usize, f64)>,
}

impl LevelScan {
    fn new(level: f64, h: f64, ds: f64) -> Self {
        Self {
            level,
            threshold: height_threshold(h, ds),
            open: None,
        }
    }

    /// Feeds sample `k`. Returns `Some(excursion)` when a qualifying excursion
    /// closes and `started = true` when a new one opens at `k`.
    fn feed(&mut self, k: usize, z: f64, reflected: bool) -> (Option<Excursion>, bool) {
        let mut closed = None;
        let inside = z > self.level;
        if reflected || !inside {
            if let Some((start, max)) = self.open.take() {
                let height = max - self.level;
                if height >= self.threshold {
                    closed = Some(Excursion { start, end: k, height });
                }
            }
        }
        let mut started = false;
        if inside {
            match &mut self.open {
                Some((_, max)) => *max = max.max(z),
                None => {
                    self.open = Some((k, z));
                    started = true;
                }
            }
        }
        (closed, started)
    }

    fn finish(&mut self, end: usize) -> Option<Excursion> {
        let (start, max) = self.open.take()?;
        let height = max - self.level;
        (height >= self.threshold).then_some(Excursion { start, end, height })
    }
}

/// Maximal excursions of `ζ` above `level` with height greater than `h`,
/// up to `τ` (or the end of the path).
pub fn excursions_above(path: &LifetimePath, level: f64, h: f64) -> Vec<Excursion> {
    let mut scan = LevelScan::new(level, h, path.ds);
    let mut out = Vec::new();
    for (k, &z) in path.zeta.iter().enumerate() {
        if let (Some(e), _) = scan.feed(k, z, path.reflected_at(k)) {
            out.push(e);
        }
    }
    out.extend(scan.finish(path.len().saturating_sub(1)));
    out
}

/// `2h` times the number of excursions above `level` of height greater than `h`.
pub fn level_local_time(path: &LifetimePath, level: f64, h: f64) -> f64 {
    2.0 * h * excursions_above(path, level, h).len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnakeConfig {
    pub ds: f64,
    pub h: f64,
    /// Superprocess times to read out.
    pub levels: Vec<f64>,
    /// Longest simulated lifetime time per replicate.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0e3
}

#[derive(Debug, Clone)]
pub struct SnakeReadout {
    pub time: f64,
    pub level: f64,
    pub excursions: Vec<Excursion>,
    pub measure: AtomicMeasure,
}

#[derive(Debug, Clone)]
pub struct SnakeForest {
    h: f64,
    level_scale: f64,
    cell: f64,
    nodes: u64,
    readouts: Vec<SnakeReadout>,
    horizon_reached: bool,
}

impl SnakeForest {
    pub fn h(&self) -> f64 {
        self.h
    }

    /// `κ`: lifetime level per unit of superprocess time.
    pub fn level_scale(&self) -> f64 {
        self.level_scale
    }

    /// Width of one level cell.
    pub fn cell(&self) -> f64 {
        self.cell
    }

    /// Number of path segments created while building the forest.
    pub fn nodes(&self) -> u64 {
        self.nodes
    }

    pub fn readouts(&self) -> &[SnakeReadout] {
        &self.readouts
    }

    pub fn horizon_reached(&self) -> bool {
        self.horizon_reached
    }

    pub fn into_readouts(self) -> Vec<SnakeReadout> {
        self.readouts
    }
}

/// Lifetime level scale `κ = γ/4`.
pub fn level_scale(c: &Coefficients) -> f64 {
    c.branching_rate() / 4.0
}

/// Stack of tip-path positions indexed by level cell.
struct TipStack<'a> {
    c: &'a Coefficients,
    w: &'a NoisePath,
    mu: &'a AtomicMeasure,
    cumulative: Vec<f64>,
    seed: u64,
    dim: usize,
    positions: Vec<f64>,
    depth: usize,
    max_depth: usize,
    next_node: u64,
    roots: CounterRng,
    scratch: [Vec<f64>; 4],
}

impl<'a> TipStack<'a> {
    fn new(c: &'a Coefficients, w: &'a NoisePath, mu: &'a AtomicMeasure, max_depth: usize, seed: u64) -> Self {
        let dim = mu.dim();
        let cumulative = mu
            .masses()
            .iter()
            .scan(0.0, |acc, m| {
                *acc += m;
                Some(*acc)
            })
            .collect();
        let mut s = Self {
            c,
            w,
            mu,
            cumulative,
            seed,
            dim,
            positions: Vec::with_capacity((max_depth + 1) * dim),
            depth: 0,
            max_depth,
            next_node: 0,
            roots: CounterRng::for_stream(seed, &[stream::SNAKE_ROOT]),
            scratch: [vec![0.0; dim], vec![0.0; dim * dim], vec![0.0; dim * dim], vec![0.0; dim]],
        };
        s.new_root();
        s
    }

    fn new_root(&mut self) {
        let total = self.mu.total_mass();
        let k = if self.mu.len() == 1 {
            0
        } else {
            let u = self.roots.uniform() * total;
            self.cumulative.partition_point(|c| *c < u).min(self.mu.len() - 1)
        };
        self.positions.clear();
        self.positions.extend_from_slice(self.mu.position(k));
        self.depth = 0;
    }

    fn resize(&mut self, depth: usize) {
        let depth = depth.min(self.max_depth);
        if depth <= self.depth {
            self.positions.truncate((depth + 1) * self.dim);
            self.depth = depth;
            return;
        }
        let d = self.dim;
        let dt = self.w.dt();
        let sd = dt.sqrt();
        let [b, s1, s2, db] = &mut self.scratch;
        while self.depth < depth {
            let parent_at = self.depth * d;
            let parent = &self.positions[parent_at..parent_at + d];
            self.c.drift_into(parent, b);
            self.c.sigma1_into(parent, s1);
            self.c.sigma2_into(parent, s2);
            let mut rng = CounterRng::for_stream(self.seed, &[stream::SNAKE_BRANCH, self.next_node]);
            self.next_node += 1;
            for v in db.iter_mut() {
                *v = sd * rng.normal();
            }
            let dw = self.w.increment(self.depth);
            for i in 0..d {
                let mut x = self.positions[parent_at + i] + b[i] * dt;
                for j in 0..d {
                    x += s1[i * d + j] * dw[j] + s2[i * d + j] * db[j];
                }
                self.positions.push(x);
            }
            self.depth += 1;
        }
    }

    fn at(&self, cell: usize) -> &[f64] {
        &self.positions[cell * self.dim..(cell + 1) * self.dim]
    }
}

fn check_inputs(c: &Coefficients, mu: &AtomicMeasure, w: &NoisePath, h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("h must be positive, got {h}")));
    }
    if c.dim() != mu.dim() || w.dim() != mu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: if c.dim() != mu.dim() { c.dim() } else { w.dim() },
        });
    }
    if mu.total_mass() <= 0.0 {
        return Err(Error::InvalidParameter("initial measure has no mass".into()));
    }
    Ok(())
}

fn cell_of(z: f64, cell: f64) -> usize {
    (z / cell).floor() as usize
}

/// Walks the lifetime path, maintaining the tip stack, and reads out
/// `X^h_t` for each requested superprocess time.
pub fn build_forest(
    path: &LifetimePath,
    c: &Coefficients,
    mu: &AtomicMeasure,
    w: &NoisePath,
    times: &[f64],
    h: f64,
    seed: u64,
) -> Result<SnakeForest> {
    check_inputs(c, mu, w, h)?;
    if times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::NonpositiveTime(times.iter().copied().fold(0.0, f64::min)));
    }
    let kappa = level_scale(c);
    let cell = kappa * w.dt();
    let cells: Vec<usize> = times.iter().map(|t| (t / w.dt()).round() as usize).collect();
    let max_depth = cells.iter().copied().max().unwrap_or(0);
    if max_depth > w.steps() {
        return Err(Error::InsufficientEnvironmentPath {
            required: max_depth,
            available: w.steps(),
        });
    }
    let levels: Vec<f64> = cells.iter().map(|&j| j as f64 * cell).collect();
    let mut scans: Vec<LevelScan> = levels.iter().map(|&l| LevelScan::new(l, h, path.ds)).collect();
    let mut pending: Vec<Vec<f64>> = vec![Vec::new(); times.len()];
    let mut readouts: Vec<SnakeReadout> = times
        .iter()
        .zip(&levels)
        .map(|(&time, &level)| SnakeReadout {
            time,
            level,
            excursions: Vec::new(),
            measure: AtomicMeasure::new(mu.dim()),
        })
        .collect();
    let mass = 2.0 * h;
    let mut stack = TipStack::new(c, w, mu, max_depth, seed);
    for (k, &z) in path.zeta.iter().enumerate() {
        let reflected = path.reflected_at(k);
        if reflected {
            stack.new_root();
        }
        stack.resize(cell_of(z, cell));
        for (r, scan) in scans.iter_mut().enumerate() {
            let (closed, started) = scan.feed(k, z, reflected);
            if let Some(e) = closed {
                readouts[r].excursions.push(e);
                readouts[r].measure.push(&pending[r], mass)?;
            }
            if started {
                if stack.depth < cells[r] {
                    stack.resize(cells[r]);
                }
                pending[r].clear();
                pending[r].extend_from_slice(stack.at(cells[r]));
            }
        }
    }
    let end = path.len().saturating_sub(1);
    for (r, scan) in scans.iter_mut().enumerate() {
        if let Some(e) = scan.finish(end) {
            readouts[r].excursions.push(e);
            readouts[r].measure.push(&pending[r], mass)?;
        }
    }
    Ok(SnakeForest {
        h,
        level_scale: kappa,
        cell,
        nodes: stack.next_node,
        readouts,
        horizon_reached: path.horizon_reached(),
    })
}

/// Tip paths (positions at levels `0, cell, 2·cell, …` up to `ζ_k`) at the
/// requested path indices, built exactly as in [`build_forest`].
pub fn tip_paths_at(
    path: &LifetimePath,
    c: &Coefficients,
    mu: &AtomicMeasure,
    w: &NoisePath,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(c, mu, w, 1.0)?;
    let cell = level_scale(c) * w.dt();
    let max_depth = cell_of(path.max(), cell);
    if max_depth > w.steps() {
        return Err(Error::InsufficientEnvironmentPath {
            required: max_depth,
            available: w.steps(),
        });
    }
    let mut stack = TipStack::new(c, w, mu, max_depth, seed);
    let mut out = vec![Vec::new(); indices.len()];
    for (k, &z) in path.zeta.iter().enumerate() {
        if path.reflected_at(k) {
            stack.new_root();
        }
        stack.resize(cell_of(z, cell));
        for (slot, &i) in indices.iter().enumerate() {
            if i == k {
                out[slot] = stack.positions.clone();
            }
        }
    }
    Ok(out)
}

/// `X^h_t` for a single time on an already simulated lifetime path.
pub fn snake_measure(
    path: &LifetimePath,
    c: &Coefficients,
    mu: &AtomicMeasure,
    w: &NoisePath,
    t: f64,
    h: f64,
    seed: u64,
) -> Result<AtomicMeasure> {
    let forest = build_forest(path, c, mu, w, &[t], h, seed)?;
    Ok(forest.into_readouts().pop().expect("one readout").measure)
}

/// Lifetime settings for reading out `times`: `τ` at `ℓ⁰ = μ(ℝ^d)` and an
/// upper reflection just above the highest level any readout can see.
pub fn lifetime_config(c: &Coefficients, mu: &AtomicMeasure, cfg: &SnakeConfig) -> LifetimeConfig {
    let top = cfg.levels.iter().copied().fold(0.0, f64::max) * level_scale(c);
    LifetimeConfig {
        ds: cfg.ds,
        horizon: cfg.horizon,
        target: mu.total_mass(),
        cap: Some(top + cfg.h + 4.0 * cfg.ds.sqrt()),
    }
}

/// One snake replicate: simulate `ζ` and build the forest.
pub fn run_snake(
    c: &Coefficients,
    mu: &AtomicMeasure,
    w: &NoisePath,
    cfg: &SnakeConfig,
    seed: u64,
) -> Result<SnakeForest> {
    let path = simulate_lifetime_with(seed, &lifetime_config(c, mu, cfg))?;
    build_forest(&path, c, mu, w, &cfg.levels, cfg.h, seed)
}

/// Largest pairwise distance between atoms.
pub fn support_diameter(m: &AtomicMeasure) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    if m.dim() == 1 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
            let x = m.position(k)[0];
            (lo.min(x), hi.max(x))
        });
        return hi - lo;
    }
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = m
                .position(i)
                .iter()
                .zip(m.position(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}
