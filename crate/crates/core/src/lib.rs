//! Iterative conversational query reformulation.
//!
//! A reformulation model is bootstrapped on LLM (or file-provided) rewrites
//! and then improved over iterations using retrieval rewards: the previous
//! model generates candidate rewrites, candidates are scored by cosine
//! similarity to the gold passage under a frozen encoder, and the next model
//! is trained with minimum Bayes risk (early iterations) or on the top-1
//! candidate (later iterations).

pub mod analysis;
pub mod bootstrap;
pub mod data;
pub mod embedding;
pub mod evaluation;
pub mod error;
pub mod generator;
pub mod orchestrator;
pub mod retrieval;
pub mod text;
pub mod training;

pub use error::{Error, Result};
