use thiserror::Error;

/// Errors raised by the simulators, solvers and oracles.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("ellipticity violated at x = {at:?}: min eigenvalue of sigma2^T sigma2 is {eigenvalue}, need >= {required}")]
    EllipticityViolation {
        at: Vec<f64>,
        eigenvalue: f64,
        required: f64,
    },
    #[error("bound violated: {what} = {value} exceeds K = {bound}")]
    BoundViolation {
        what: String,
        value: f64,
        bound: f64,
    },
    #[error("time must be positive, got {0}")]
    NonpositiveTime(f64),
    #[error("operation requires constant coefficients")]
    UnsupportedCoefficients,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("grid too coarse: dx^2 * max|a''| = {value} exceeds budget {budget}")]
    GridTooCoarse { value: f64, budget: f64 },
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("step dt = {dt} exceeds h/10 = {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("population exceeded cap of {cap} particles")]
    PopulationExplosion { cap: usize },
    #[error("environment path covers {available} steps, {required} needed")]
    InsufficientEnvironmentPath { required: usize, available: usize },
    #[error("support outside grid: position {position} not in [{lo}, {hi}]")]
    SupportOutsideGrid { position: f64, lo: f64, hi: f64 },
    #[error("stability violated: {0}")]
    StabilityViolation(String),
    #[error("non-finite value at node {node} (step {step})")]
    NonfiniteValue { step: usize, node: usize },
    #[error("mass leak: boundary cells hold {fraction} of the total mass")]
    MassLeak { fraction: f64 },
    #[error("terminal data must be nonnegative (node {node} = {value})")]
    NegativeTerminalData { node: usize, value: f64 },
    #[error("arity {n} exceeds the maximum of {max}")]
    ArityTooLarge { n: usize, max: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
