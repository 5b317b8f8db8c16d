//! Small-scale generative VQA over synthetic remote-sensing scenes: a tape
//! autodiff engine, a patch-encoder plus causal-decoder model, two-stage
//! training, beam-search decoding and evaluation.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
