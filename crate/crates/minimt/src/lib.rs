//! # minimt
//!
//! A desk-scale multilingual neural machine translation framework: two
//! trainable architectures (a bidirectional-GRU encoder-decoder with
//! additive attention, and a transformer), joint byte-pair-encoded
//! vocabularies with target-language forcing flags, beam-search decoding,
//! pivot translation, corpus BLEU, and an iterative train-infer-train
//! self-learning loop that teaches a multilingual model its zero-shot
//! directions from monolingual text alone.
//!
//! Everything runs on the built-in tensor engine — no BLAS, no bindings —
//! and every stochastic choice flows from explicit seeds, so runs are
//! reproducible to the byte. Synthetic language triangles (a pivot language
//! and two satellites related by invertible transforms) stand in for real
//! corpora, making every qualitative claim testable in minutes on a CPU.
//!
//! The guide under `book/` walks through each concept; start with
//! [`tensor`] for the autodiff substrate, [`subword`] and [`corpus`] for
//! data, [`model`] for the architectures, and [`selftrain`] for the
//! zero-shot loop.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selftrain;
pub mod subword;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lang::LangId;
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};
