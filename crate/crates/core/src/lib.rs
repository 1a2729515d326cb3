//! Novelty assessment pipeline: claim extraction, literature retrieval,
//! taxonomy-based comparison with quote verification, and report rendering.

pub mod analysis;
pub mod error;
pub mod extraction;
pub mod llm;
pub mod paper;
pub mod pool;
pub mod pipeline;
pub mod prompts;
pub mod render;
pub mod retrieval;
pub mod structured;
pub mod taxonomy;
pub mod text;
pub mod verification;

pub use error::{Error, Phase, Result};
