//! Federated root cause analysis over coupled nonlinear state-space systems.
//!
//! Each client runs a proprietary EKF on its own observations plus a small
//! learned correction; a server network learns the joint transition from
//! exchanged states and feeds gradients back. At inference time residual
//! Mahalanobis flags from both chains are mapped to root-cause and
//! propagated-effect labels.

pub mod client;
pub mod config;
pub mod dims;
pub mod ekf;
pub mod error;
pub mod federation;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod neural;
pub mod pipeline;
pub mod privacy;
pub mod seeds;
pub mod server;
pub mod synthetic;

pub use error::{Error, Result};
