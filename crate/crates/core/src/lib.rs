//! Fractional imputation for complex survey data.

pub mod calib;
pub mod dataset;
pub mod error;
pub mod estimating;
pub mod fhdi;
pub mod linalg;
pub mod mi;
pub mod models;
pub mod pfi;
pub mod rng;
pub mod semiparam;
pub mod sim;
pub mod variance;

pub use error::{Error, Result};
