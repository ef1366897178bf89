//! Continuous-time crowd-flow forecasting with dual neural controlled
//! differential equations over flow and POI control paths, corrected by a
//! counterfactual causal-effect estimator during integration.

pub mod causal;
pub mod cli;
pub mod cdesolve;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod seed;
pub mod spline;
pub mod train;

pub use error::{Error, Result};
