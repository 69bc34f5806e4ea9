pub mod attention;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use model::{DecoderVariant, Model, ModelConfig};
pub use numerics::{Matrix, Scalar};
