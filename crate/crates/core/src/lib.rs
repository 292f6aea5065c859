pub mod artifacts;
pub mod cli;
pub mod combiners;
pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fgsm;
pub mod net;
pub mod pipeline;
pub mod scoring;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
