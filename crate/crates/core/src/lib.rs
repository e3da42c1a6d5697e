//! Miscitation detection on text-rich citation graphs: evidence-chain
//! reasoning over a pluggable LLM backend, layer-wise contrastive
//! distillation into a GNN student, and an entropy-gated collaborative
//! training loop, with metrics and benchmark tooling.

pub mod autodiff;
pub mod chain;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod reasoner;
pub mod student;
pub mod trainer;

pub use error::{Error, Result};
