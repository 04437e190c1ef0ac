//! Claim-level factuality evaluation and factuality-aware preference
//! alignment: scoring, labeling, the KTO-style losses and a toy trainer.

pub mod align;
pub mod dataset;
pub mod evaluator;
pub mod jsonl;
pub mod metrics;
pub mod trainer;
pub mod types;

pub use types::{Granularity, Label, Source};
