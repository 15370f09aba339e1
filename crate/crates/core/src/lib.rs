pub mod assets;
pub mod augment;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod pamr;
pub mod pipeline;
pub mod raster;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod volume;
pub mod weights;

pub use error::{Error, Result};
