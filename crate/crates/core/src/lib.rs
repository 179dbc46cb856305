//! Weakly supervised dual-branch region model: images are tiled into
//! overlapping regions, each region is classified (normal / benign / malignant)
//! and, per abnormality class, a detection branch weighs the top-scoring
//! regions into an image-level posterior. Only image-level labels are needed for
//! training; region scores double as localization maps.

pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
