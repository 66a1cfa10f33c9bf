//! One-stage line segment detection with center/offset/length/angle maps.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod postprocess;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
