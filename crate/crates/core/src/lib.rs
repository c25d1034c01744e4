//! Estimators of the average treatment effect on the treated (ATT) and a
//! Monte Carlo harness that benchmarks them on simulated external-control
//! studies.

pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod glm;
pub mod harness;
pub mod linalg;
pub mod matching;
pub mod propensity;
pub mod report;
pub mod rng;
pub mod stats;
pub mod superlearner;
pub mod tmle;
pub mod weighting;

pub use error::{Error, Result};
