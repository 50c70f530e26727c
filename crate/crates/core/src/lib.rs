//! Multilingual domain-adaptive pretraining at desk scale.
//!
//! The crate covers the whole pipeline: corpus ingestion and budgeted
//! composition with smoothed language sampling, a subword tokenizer, a small
//! transformer encoder (full-model or adapter-based continued pretraining
//! with masked language modeling), fine-tuning for tagging and sentence
//! classification, and the evaluation analyses (span F1, retrieval
//! precision@k, continued-word fractions).
//!
//! Model math is generic over [`Scalar`]; training uses `f32` and gradient
//! checking `f64`, see the aliases below.

pub mod compose;
pub mod config;
pub mod encoder;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use encoder::{Encoder32, Encoder64};
