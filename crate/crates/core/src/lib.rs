//! Brain tumor segmentation with an ensemble of configurable 3D U-Nets, and
//! overall-survival regression on radiomic features of the segmentation.
//!
//! The crate covers the whole chain: NIfTI I/O, intensity preprocessing,
//! weighted patch sampling, network training, sliding-window inference with
//! flip averaging, ensembling, evaluation metrics and the survival model.
//! [`pipeline`] wires the stages together over an on-disk dataset and
//! [`phantom`] generates synthetic subjects for testing.

pub mod ensemble;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod radiomics;
pub mod sampler;
pub mod unet;
mod util;
pub mod volume;

pub use error::{Error, Result};
