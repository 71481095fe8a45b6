//! Price impact of electricity storage: linear-quadratic storage control,
//! deterministic and stochastic market equilibria, and revenue metrics.

pub mod det_equilibrium;
pub mod error;
pub mod fbsde;
pub mod grid;
pub mod lq_control;
pub mod metrics;
pub mod regression;
pub mod rng;
pub mod scenarios;
pub mod stochastics;

pub use error::{Error, Result};
pub use grid::{PiecewiseLinear, TimeFunction, TimeGrid};
pub use lq_control::{AgentParams, ControlCoefficients, PriceTrajectory};
pub use stochastics::{OUModel, PathSet, SeasonalProfile};
