pub mod attack;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod raster;
pub mod scene;

pub use error::{Error, Result};
