//! Small-lesion segmentation with a selective-scan U-Net.
//!
//! * [`backbone`]: patch embedding, four-directional selective scan, enhanced
//!   state-space blocks with channel attention, the U-shaped network and loss.
//! * [`tcma`]: cross-feature multi-scale tensor attention on decoder stages.
//! * [`curriculum`]: loss-rank sample weighting and the plateau scheduler.
//! * [`data`]: synthetic lesion generation, PNG ingestion, augmentation and
//!   size stratification.
//! * [`metrics`]: confusion counts and size-stratified reports.
//! * [`harness`]: experiment configuration, training, evaluation and reports.

pub mod backbone;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tcma;

pub use backbone::{FeatureMap, ModelConfig, S3Mamba};
pub use error::{Error, Result};
