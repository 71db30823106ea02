//! Isotropy metrics and calibration methods for embedding matrices, plus a
//! desk-scale attention model and an experiment harness for evaluating them.
//!
//! Modules:
//! - [`numkit`]: dense matrices, thin Jacobi SVD, seeded RNG, finite differences
//! - [`isotropy`]: the I1/I2 partition-function measures
//! - [`calibration`]: cosine regularization and spectrum control
//! - [`flow`]: invertible affine coupling flows trained by maximum likelihood
//! - [`toymodel`]: a tiny attention model, synthetic data, and the training loop
//! - [`harness`]: statistics, file formats, experiment orchestration, reports

pub mod calibration;
pub mod error;
pub mod flow;
pub mod harness;
pub mod isotropy;
pub mod numkit;
mod par;
pub mod toymodel;

pub use error::{Error, Result};
