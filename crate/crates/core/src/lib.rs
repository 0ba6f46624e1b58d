pub mod cli;
pub mod dynamics;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::BBox;
