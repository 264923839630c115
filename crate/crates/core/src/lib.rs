//! Variational multilingual source separation for sentence embeddings:
//! model, training objectives, synthetic corpora, training loop and
//! evaluation metrics.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod objectives;
pub mod seeding;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
