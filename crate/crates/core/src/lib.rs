pub mod autograd;
pub mod binio;
pub mod complex;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod manifest;
pub mod mhs;
pub mod pipeline;
pub mod qa;
pub mod questions;
pub mod synth;
pub mod tkg;
pub mod training;

pub use error::{Error, Result};
