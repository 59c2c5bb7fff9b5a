//! Desk-scale multimodal speech-language modeling sandbox.
//!
//! The crate wires a small frozen audio encoder with learnable layer fusion
//! into a small frozen text LM through a trainable 1-D convolution
//! downsampler, trains LoRA adapters under a staged curriculum over synthetic
//! multi-task speech corpora, and decodes with greedy, trie-constrained, and
//! joint (transcript + task answer) strategies. Everything runs on a plain
//! CPU in double precision.

pub mod brq;
pub mod checkpoint;
pub mod decode;
pub mod downsample;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod joint;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
