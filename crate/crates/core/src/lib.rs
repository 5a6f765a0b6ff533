pub mod autograd;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod expand;
pub mod infer;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
