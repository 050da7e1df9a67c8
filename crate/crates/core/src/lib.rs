pub mod augment;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod pngio;
pub mod pnp;
pub mod predictor;
pub mod render;

pub use error::{Error, Result};
