//! Generative local metrics for nearest-neighbour methods.
//!
//! Class-conditional Gaussians give, at every point, a bias matrix Φ whose
//! trace against the inverse metric measures the finite-sample bias of the
//! nearest-neighbour error. The local metric zeroes that trace. Local metrics
//! are then averaged into global metrics, used as base kernels for multiple
//! kernel learning, or fed into k-means and Isomap.

pub mod classify;
pub mod dataset;
pub mod error;
pub mod generative;
pub mod global_metric;
pub mod kernel_mkl;
pub mod linalg;
pub mod local_metric;
mod par;
pub mod unsupervised;

pub use error::{Error, Result};
pub use local_metric::{MetricMatrix, Provenance};
