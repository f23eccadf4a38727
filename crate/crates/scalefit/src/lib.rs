//! Scaling-law fitting, bootstrap uncertainty, and compute-optimal
//! allocation from digitized training-run figures.

pub mod bootstrap;
pub mod error;
pub mod extract;
pub mod fitter;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod reference;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
