//! Robust purified-output-based (POB) control synthesis for finite-horizon Markov
//! jump linear systems with ellitopic and Gaussian disturbances.
//!
//! The pipeline: describe an [`model::MjlsModel`] and a set of quadratic
//! specifications, assemble the policy-dependent moment maps with the path
//! recursions in [`expectation`], and solve the resulting semidefinite program
//! in [`synthesis`]. [`simulator`] evaluates policies exactly and by Monte Carlo,
//! [`equivalence`] converts between purified-output and output-feedback tables.

extern crate openblas_src;

pub mod equivalence;
pub mod error;
pub mod expectation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod portfolio;
pub mod oracle;
pub mod random;
pub mod simulator;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};
