//! Implicit self-questioning for a miniature vision-language model.

pub mod error;
pub mod evalharness;
pub mod inference;
pub mod model;
pub mod objective;
pub mod seed;
pub mod segment;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use segment::Segment;
