//! Deterministic decoder-only transformer standing in for a frozen VLM.

pub(crate) mod backward;
mod config;
mod forward;
mod sequence;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    embed, forward_decode_step, forward_prefill, forward_trace, text_hidden, text_hidden_states, DecodeOutput,
    ForwardTrace, MaskAddends,
};
pub(crate) use forward::run_tape;
pub use sequence::{Modality, Payload, Phase, Token, TokenSequence};
pub use weights::{LayerWeights, Precision, ToyVLM, Weights};
