//! Pixel-wise feature similarity (PFS) knowledge distillation for semantic
//! segmentation, from synthetic data to evaluation, on the CPU.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pfs;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
