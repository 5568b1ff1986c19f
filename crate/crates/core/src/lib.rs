pub mod cache;
pub mod digest;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod image;
pub mod kmeans;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod tensor_file;

mod binio;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, Matrix, Scalar};
