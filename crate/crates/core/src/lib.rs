//! Two-stage RGB+IR crack segmentation.
//!
//! Stage 1 ([`sr`]) super-resolves the low-resolution IR channels to the RGB
//! grid with a self-supervised detail-injection network and fuses the six
//! channels. Stage 2 ([`model`]) segments the fused image with a selective
//! state-space encoder ([`ssm`], [`cross_scan`]) and a pyramid-pooling
//! decoder.

pub mod cross_scan;
pub mod data;
pub mod error;
pub mod grad_suite;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod scale;
pub mod scan_bench;
pub mod sr;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
