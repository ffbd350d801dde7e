//! Label-semantic-aware pre-training toolkit.
//!
//! Builds utterance/intent corpora from labeled and unlabeled conversational
//! text, renders them into sequence-to-sequence training records, and runs the
//! few-shot fine-tuning and evaluation protocol through pluggable model
//! backends.
//!
//! The pipeline, in order:
//!
//! 1. [`corpus`]: ingest raw dumps, dedupe against evaluation data, persist.
//! 2. [`dialogue_filter`]: keep intentful utterances using a binary classifier.
//! 3. [`intent_generator`]: pseudo-label the filtered utterances (bronze tier).
//! 4. [`formats`]: render pre-training and fine-tuning records.
//! 5. [`splits`]: nested few-shot splits per seed.
//! 6. [`runner`]: pre-train, fine-tune, predict, evaluate and aggregate.
//!
//! [`ablations`] holds the label-semantics manipulations and the overlap
//! analyses between pre-training and evaluation data.

pub mod ablations;
pub mod backend;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod dialogue_filter;
pub mod error;
pub mod exec;
pub mod formats;
pub mod intent_generator;
pub mod intent_text;
pub mod rng;
pub mod runner;
pub mod splits;
pub mod tokenizer;

pub use error::{Error, Result};
