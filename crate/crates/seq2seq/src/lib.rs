//! A small sequence-to-sequence backend for CPU experiments.
//!
//! [`TinySeq2Seq`] is a transformer encoder-decoder with a pointer-generator
//! head, sized at roughly 1.5M parameters by default. Copying lets a model
//! trained on label-denoising records reproduce label words it has never
//! generated before, which is what the few-shot protocol exercises.

pub mod backend;
pub mod model;
pub mod tokenizer;
pub mod vocab;

pub use backend::{TinyHandle, TinySeq2Seq};
pub use model::TinyConfig;
pub use tokenizer::CasedWordTokenizer;
