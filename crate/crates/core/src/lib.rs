//! Gendered pronoun resolution toolkit.
//!
//! Three formulations of resolving an ambiguous pronoun to candidate A, B or
//! neither (N), all sharing one token encoder:
//!
//! * [`qa`]: extractive question answering with the pronoun's word window as
//!   the question, plus span-wise max pooling and a logistic-regression head
//!   that turns start/end logits into class probabilities,
//! * [`mc`]: multiple choice over the continuations A, B and "neither",
//! * [`seq`]: sequence classification over span embeddings of A, B and the
//!   pronoun.
//!
//! [`train`] runs gender-stratified k-fold training and averages fold
//! predictions; [`metrics`] scores predictions per gender.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod mc;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qa;
pub mod seed;
pub mod seq;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{DataError, EncoderError, MetricsError, ModelError, TokenizerError, TrainError};
