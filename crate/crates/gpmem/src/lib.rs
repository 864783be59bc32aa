//! Gaussian-process memoization: exact GP regression, kernel algebra with
//! symbolic simplification, scoped Metropolis–Hastings and gradient
//! inference, grammar-based structure discovery, and Thompson-sampling
//! Bayesian optimization.

pub mod bayesopt;
pub mod cli;
pub mod data;
pub mod error;
pub mod gp;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod memo;
pub mod prior;
pub mod structure;

pub use error::{Error, Result};
