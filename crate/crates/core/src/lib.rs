//! Building blocks for whole-slide segmentation: tile pyramids, tissue
//! detection, tile planning, pluggable segmentation backends, mask stitching
//! and contour extraction, annotation documents, and segmentation metrics.

pub mod annotations;
pub mod backend;
pub mod components;
pub mod error;
pub mod fabric;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod pyramid;
pub mod synthetic;
pub mod tissue;

pub use error::{Error, Result};
