//! Simulation and verification toolkit for a superprocess carried by a
//! stochastic flow.
//!
//! Particles move by `dη = b dt + σ₁ dW + σ₂ dB_i` with one environment
//! Brownian motion `W` shared by the whole population and private `B_i`.
//! The crate provides four independent routes to the same process and the
//! analytic oracles used to cross-check them:
//!
//! * [`particles`]: critical binary branching particle system,
//! * [`snake`]: Brownian-snake excursion representation,
//! * [`spde`]: finite-difference solver for the d = 1 density equation,
//! * [`loglaplace`]: backward solver for the conditional log-Laplace functional,
//! * [`duality`]: pure-death moment dual and closed-form first/second moments,
//! * [`analysis`]: Hölder-exponent regression, box counting and Monte Carlo summaries.
//!
//! Every random quantity is a pure function of `(seed, stream, indices)`; see
//! [`noise`].

pub mod analysis;
pub mod duality;
mod error;
pub mod grid;
pub mod loglaplace;
pub mod measure;
pub mod model;
pub mod noise;
pub mod par;
pub mod particles;
pub mod quadrature;
pub mod snake;
pub mod spde;

pub use error::{Error, Result};
pub use grid::{DensityField, Grid};
pub use measure::{AtomicMeasure, TestFunction};
pub use model::{CoefficientSpec, Coefficients};
pub use noise::{NoisePath, SheetSource};
