//! Multi-level fusion of pathology feature bags and radiology inputs for
//! binary MSI/MSS prediction, with synthetic cohorts, cross-validated
//! experiments and a small hand-written neural network stack.

pub mod aggregation;
pub mod bayes;
pub mod checkpoint;
pub mod cli;
pub mod domain;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod nn;
pub mod synthdata;

pub use error::{Error, ErrorCategory, Result};
