//! Reduced-rank spatio-temporal kriging for land-use-regression exposure
//! models.

pub mod basis;
pub mod bench;
pub mod covariance;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod optimize;
pub mod predict;
pub mod simulate;
pub mod temporal;

pub use error::{Error, Result};
