//! Asymmetric token compression for multimodal decoders.
//!
//! Vision tokens are pruned before prefill using a learned, output-aware
//! importance scorer and a per-sample keep ratio driven by the spread of the
//! scores. Text tokens are left alone until the generated-token count exceeds
//! a budget, then evicted by final-layer attention.
//!
//! Everything runs on a small seeded decoder ([`model::ToyVLM`]) so every
//! formula can be checked against brute-force oracles.

pub mod budget;
pub mod error;
pub mod eviction;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod scorer;

pub use error::{Error, Result};
