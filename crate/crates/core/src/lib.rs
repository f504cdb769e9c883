pub mod backbone;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod infer;
pub mod matching;
pub mod model;
pub mod pointcloud;
pub mod smq;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
