//! Tiled object detection toolkit for very large images.
//!
//! The crate covers the full path from a COCO-format dataset of
//! high-resolution images to a COCO-style evaluation report: stratified
//! splitting, overlapping patch slicing, augmentation, pluggable patch-level
//! detection, reprojection with non-maximum merging, and evaluation.

pub mod augment;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod postprocess;
pub mod render;
pub mod seed;
pub mod slicer;
pub mod splitter;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{intersection_area, iou, union_box, BBox};
