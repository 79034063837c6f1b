//! Point cloud transformer built around collect-and-distribute attention.

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
