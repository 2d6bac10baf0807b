//! Post-training 1-bit weight quantization built on alternating refined
//! binarization (ARB), its calibration-aware (ARB-X) and row-column (ARB-RC)
//! variants, column-group bitmap partitioning and block-wise error
//! compensation.

pub mod bench;
pub mod binarize;
pub mod calib;
pub mod cli;
pub mod compensate;
pub mod config;
pub mod error;
pub mod format;
pub mod manifest;
pub mod partition;
pub mod pipeline;
pub mod report;
pub mod rowcol;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{BitMask, Matrix, SignPlane, WeightMatrix};
