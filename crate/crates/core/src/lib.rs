//! Fair mixture-model clustering.
//!
//! Fits finite mixtures (isotropic or diagonal Gaussian, multinoulli, or a
//! mix of both) while penalizing the gap between sensitive groups' average
//! cluster responsibilities.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod mixture;
pub mod objective;
pub mod optim;
pub mod rng;

pub use error::{FmcError, Result};
