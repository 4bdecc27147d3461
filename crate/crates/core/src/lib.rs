//! Concept-bottleneck retrieval models with a fusion head, two-stage
//! training, test-time concept interventions and retrieval evaluation.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod intervention;
pub mod model;
pub mod retrieval;
pub mod service;
pub mod training;
pub mod util;

pub use error::{Error, Result};
