//! Gaussian-process priors with adaptive variable selection and linear
//! projection for regression, binary classification, density estimation and
//! density regression.

pub mod error;
pub mod gp;
pub mod harness;
pub mod hyperprior;
pub mod inference;
pub mod io;
pub mod likelihoods;
pub mod metrics;
pub mod quadrature;

pub use error::{Error, Result};
