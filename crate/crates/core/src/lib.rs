//! Deformable state space models for image classification.

pub mod autodiff;
pub mod deform;
pub mod error;
pub mod harness;
pub mod init;
pub mod model;
pub mod ops;
pub mod scan_order;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
