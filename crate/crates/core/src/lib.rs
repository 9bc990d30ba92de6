//! Multi-label knowledge distillation: a small reverse-mode tensor engine,
//! a query-based label-wise embedding classifier, logits and label-wise
//! embedding distillation losses, multi-label metrics, a synthetic scene
//! generator and the training harness that ties them together.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, TensorError};
