//! Vision transformer with learned per-token halting.
//!
//! Tokens stop being processed once their cumulative halting score crosses
//! a threshold; training keeps them in place behind masks, inference removes
//! them from the computation entirely.

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod flops;
pub mod halting;
pub mod infer;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
