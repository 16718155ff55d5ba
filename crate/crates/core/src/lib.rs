//! Desk-scale single-transformer multimodal language model.
//!
//! Raw image patches and byte-level text share one decoder-only transformer
//! with mixed attention (causal text, bidirectional within an image) and
//! two-axis rotary positions. The crate covers the autodiff engine, sequence
//! assembly and packing, the model, the training loop, and the probing and
//! retrieval instruments used to study it.

pub mod analysis;
pub mod config;
pub mod error;
pub mod image;
pub mod manifest;
pub mod model;
pub mod mrope;
pub mod patch;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
