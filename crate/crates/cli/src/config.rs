//! Experiment configuration: one JSON document, every block optional.

use std::path::PathBuf;

use flowproc_core::model::{make_coefficients, CoefficientSpec};
use flowproc_core::{AtomicMeasure, Coefficients, Grid, TestFunction};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const COMMANDS: [&str; 6] = ["particles", "snake", "spde", "loglaplace", "duality", "verify-all"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Particles,
    Snake,
    Spde,
    Loglaplace,
    Duality,
    VerifyAll,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "particles" => Self::Particles,
            "snake" => Self::Snake,
            "spde" => Self::Spde,
            "loglaplace" => Self::Loglaplace,
            "duality" => Self::Duality,
            "verify-all" => Self::VerifyAll,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown command `{s}` (expected one of {})",
                    COMMANDS.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub position: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the command line when present.
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default = "default_model")]
    pub model: CoefficientSpec,
    /// Initial measure μ.
    #[serde(default = "default_initial")]
    pub initial: Vec<Atom>,
    /// Functionals ⟨X, φ⟩ reported per replicate.
    #[serde(default = "default_functions")]
    pub test_functions: Vec<TestFunction>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub mc: MonteCarlo,
    #[serde(default)]
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub t_final: f64,
    /// Extra readout times in `[0, t_final]`; `t_final` is always read.
    pub readout_times: Vec<f64>,
    /// Environment and particle time step.
    pub dt: f64,
    pub h: f64,
    pub population_cap: usize,
    pub snake_ds: f64,
    pub snake_h: f64,
    pub snake_horizon: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub spde_dt: f64,
    /// Terminal function of the backward solver.
    pub terminal: TestFunction,
    /// Particle replicates per environment path in `loglaplace`.
    pub inner_replicates: usize,
    pub dual_arity: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            t_final: 0.5,
            readout_times: Vec::new(),
            dt: 1e-3,
            h: 0.01,
            population_cap: flowproc_core::particles::DEFAULT_POPULATION_CAP,
            snake_ds: 1e-4,
            snake_h: 0.05,
            snake_horizon: 1e3,
            x_min: -5.0,
            x_max: 5.0,
            dx: 0.01,
            spde_dt: 2.5e-5,
            terminal: TestFunction::Plateau { lo: -0.5, hi: 0.5, height: 1.0 },
            inner_replicates: 500,
            dual_arity: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarlo {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self { replicates: 200, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn default_model() -> CoefficientSpec {
    CoefficientSpec::constant_1d(0.0, 0.5, 1.0)
}

fn default_initial() -> Vec<Atom> {
    vec![Atom {
        position: vec![0.0],
        mass: 1.0,
    }]
}

fn default_functions() -> Vec<TestFunction> {
    vec![TestFunction::One, TestFunction::Gaussian { center: 0.0, sd: 0.5 }]
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub command: Command,
    pub config: ExperimentConfig,
    pub coefficients: Coefficients,
    pub mu: AtomicMeasure,
    /// Sorted readout times, ending at `t_final`.
    pub times: Vec<f64>,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn resolve(command: Command, mut config: ExperimentConfig, o: &Overrides) -> Result<Resolved, CliError> {
    if let Some(c) = config.command {
        if c != command {
            return Err(CliError::Config(format!(
                "config is for `{c:?}` but the command line asks for `{command:?}`"
            )));
        }
    }
    config.command = Some(command);
    if let Some(s) = o.seed {
        config.mc.seed = s;
    }
    if let Some(r) = o.replicates {
        config.mc.replicates = r;
    }
    if let Some(d) = &o.out {
        config.output.dir = d.clone();
    }
    let config_err = |e: flowproc_core::Error| CliError::Config(e.to_string());
    let coefficients = make_coefficients(&config.model).map_err(config_err)?;
    let n = &config.numerics;
    for (name, v) in [
        ("t_final", n.t_final),
        ("dt", n.dt),
        ("h", n.h),
        ("snake_ds", n.snake_ds),
        ("snake_h", n.snake_h),
        ("snake_horizon", n.snake_horizon),
        ("dx", n.dx),
        ("spde_dt", n.spde_dt),
    ] {
        positive(name, v)?;
    }
    if n.dt > n.h / 10.0 {
        return Err(CliError::Config(format!("dt = {} exceeds h/10", n.dt)));
    }
    Grid::new(n.x_min, n.x_max, n.dx).map_err(config_err)?;
    if command != Command::VerifyAll && config.mc.replicates < 2 {
        return Err(CliError::Config("mc.replicates must be at least 2".into()));
    }
    if n.inner_replicates < 2 {
        return Err(CliError::Config("inner_replicates must be at least 2".into()));
    }
    if !(1..=flowproc_core::duality::N_MAX).contains(&n.dual_arity) {
        return Err(CliError::Config(format!(
            "dual_arity must lie in 1..={}",
            flowproc_core::duality::N_MAX
        )));
    }
    let mut mu = AtomicMeasure::new(coefficients.dim());
    for a in &config.initial {
        mu.push(&a.position, a.mass).map_err(config_err)?;
    }
    let mut times: Vec<f64> = n.readout_times.clone();
    if times.iter().any(|&t| !(0.0..=n.t_final).contains(&t)) {
        return Err(CliError::Config("readout_times must lie in [0, t_final]".into()));
    }
    times.push(n.t_final);
    times.sort_by(f64::total_cmp);
    times.dedup();
    if config.test_functions.is_empty() {
        return Err(CliError::Config("at least one test function is required".into()));
    }
    Ok(Resolved {
        command,
        config,
        coefficients,
        mu,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c.mc.replicates, 200);
        assert_eq!(c.numerics.dx, 0.01);
        let r = resolve(Command::Particles, c, &Overrides::default()).unwrap();
        assert_eq!(r.times, vec![0.5]);
        assert_eq!(r.mu.total_mass(), 1.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(parse(r#"{"numerics": {"dtt": 0.1}}"#).is_err());
        assert!(parse(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn overrides_and_validation() {
        let c = parse(r#"{"numerics": {"readout_times": [0.25, 0.0]}}"#).unwrap();
        let o = Overrides {
            seed: Some(9),
            replicates: Some(3),
            out: Some("x".into()),
        };
        let r = resolve(Command::Snake, c, &o).unwrap();
        assert_eq!((r.config.mc.seed, r.config.mc.replicates), (9, 3));
        assert_eq!(r.times, vec![0.0, 0.25, 0.5]);
        assert_eq!(r.config.command, Some(Command::Snake));

        let bad = parse(r#"{"numerics": {"dt": 0.01}}"#).unwrap();
        assert!(resolve(Command::Particles, bad, &Overrides::default()).is_err());
        let mismatch = parse(r#"{"command": "spde"}"#).unwrap();
        assert!(resolve(Command::Snake, mismatch, &Overrides::default()).is_err());
        assert!(Command::parse("nope").is_err());
        assert_eq!(Command::parse("verify-all").unwrap(), Command::VerifyAll);
    }
}
