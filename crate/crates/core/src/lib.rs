//! Grape bunch detection with a Swin-augmented YOLOv5 detector.
//!
//! The crate covers the whole pipeline: box geometry, dataset handling and
//! augmentation, the detector graph, training and evaluation against field
//! counts.

mod error;
pub mod data;
pub mod evaluate;
pub mod geometry;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use grapedet_tensor as tensor;
