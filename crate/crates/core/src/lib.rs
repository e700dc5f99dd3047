//! Transporting an outcome mean from a source sample to a target population
//! that is known only through covariate summaries.

pub mod basis;
pub mod cli;
pub mod data;
pub mod eb;
pub mod error;
pub mod flex;
pub mod model_check;
pub mod numerics;
mod scaling;
pub mod simulation;
mod tilt;

pub use error::{Error, Result};
