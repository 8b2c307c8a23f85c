//! Out-of-context image/caption misinformation detection with label-aware
//! alignment, semantic domain vectors and domain-conditioned prompt tuning.

pub mod alignment;
pub mod corpus;
pub mod domain_vectors;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod model_io;
pub mod params;
pub mod prompt_classifier;
pub mod tape;
pub mod tensor;

pub use error::{DpodError, Result};
