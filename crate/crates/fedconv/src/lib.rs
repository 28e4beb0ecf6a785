//! Federated learning with heterogeneous sub-models produced by trainable
//! convolutions over model parameters.
//!
//! The server compresses a global model into per-device sub-models with
//! learned convolution kernels, clients train the sub-models as-is, and the
//! server dilates the results back to the global size with transposed
//! convolutions before a learned, weighted aggregation. See the `book/`
//! directory for a guided tour.

pub mod data;
pub mod aggregate;
pub mod compress;
pub mod diagnostics;
pub mod dilate;
pub mod error;
pub mod federation;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use report::RoundReport;
pub use tensor::{GradientMap, Graph, Tensor, Var};
