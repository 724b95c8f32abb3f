//! Tabular preference-alignment laboratory.
//!
//! Ranking and rating losses over softmax policies, a synthetic
//! Bradley-Terry environment, an exact oracle for the regularized optimum,
//! a deterministic trainer, and a sweep harness.

pub mod commands;
pub mod env;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod math;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
