//! Train a desk-scale encoder-decoder translator on synthetic parallel data,
//! score its outputs for hallucination with model-internal and similarity
//! signals, and rewrite flagged translations by reranking alternative
//! hypotheses.

pub mod attribution;
pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
