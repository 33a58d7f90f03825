//! Debiased estimation of linear regression functionals with Riesz-regression
//! balancing weights.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod features;
pub mod model;
pub mod outcome;
pub mod riesz;
pub mod sum;

pub use error::{Error, Result};
