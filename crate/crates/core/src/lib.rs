//! Top-down human keypoint estimation on a feature pyramid.
//!
//! Person boxes are enlarged, mapped to one pyramid level, cropped with
//! RoIAlign, and decoded into 17 COCO keypoints by a keypoint head.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod keypoints;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
