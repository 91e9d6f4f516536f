//! Block-level mound counting: tiling, labels, augmentation, detection
//! backends, a ridge-regression count corrector, metrics and a simulator.

pub mod annotations;
pub mod augment;
pub mod detect;
pub mod error;
pub mod estimator;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod sim;
pub mod stats;
pub mod tables;
pub mod validation;

pub use error::{Error, Result};
