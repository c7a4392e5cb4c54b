//! Knowledge-base memorization lab.
//!
//! Builds deduplicated triplet stores, trains a small causal transformer to
//! recall objects from `(subject, relation)` prompts with loss-proportional
//! importance sampling, and measures fixed-form recall, question-form recall
//! and inverse/compositional inference with exact-match and token-F1 scores.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kb;
pub mod memorizer;
pub mod probes;
pub mod seed;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use kb::{Dataset, KnowledgeBase, Triplet};
