//! Expressive speech retrieval.
//!
//! Speech and text encoders are trained into a shared style-embedding space
//! with a symmetric contrastive objective, an adversarial modality
//! discriminator behind a gradient-reversal node, and an auxiliary style
//! classifier. Retrieval is an exact cosine scan over a persisted index of
//! cached speech embeddings.

pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod gradsuite;
pub mod index;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod prompts;
pub mod styles;
pub mod trainer;

pub use error::{Error, Result};
pub use styles::{StyleId, StyleRegistry};

/// Sample rate every utterance is normalized to.
pub const SAMPLE_RATE: u32 = 16_000;
