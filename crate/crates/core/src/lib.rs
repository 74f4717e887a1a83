pub mod backbone;
pub mod boxes;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod feature;
pub mod fft;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod neck;
pub mod nn;
pub mod ops;
pub mod sqr;

pub use error::{Error, Result};
pub use model::{Detector, ModelConfig};
