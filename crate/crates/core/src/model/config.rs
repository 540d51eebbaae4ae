use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Shape and initialization parameters of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_seed: u64,
    pub init_std: f32,
    /// Correlation between each layer's key and query projections, in
    /// `[0, 1]`. Zero draws them independently; one makes the attention
    /// logits a similarity in the projected space.
    #[serde(default)]
    pub qk_tie: f32,
    /// Multiplier applied to query and key matrices after drawing.
    #[serde(default = "unit_gain")]
    pub qk_gain: f32,
    /// Number of input coordinates whose pre-attention norm gain is set to
    /// `muted_gain` in every layer, making attention nearly blind to them.
    #[serde(default)]
    pub muted_dims: usize,
    #[serde(default = "default_muted_gain")]
    pub muted_gain: f32,
}

fn default_muted_gain() -> f32 {
    0.05
}

fn unit_gain() -> f32 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            vocab_size: 256,
            max_positions: 512,
            init_seed: 7,
            init_std: 0.02,
            qk_tie: 0.0,
            qk_gain: 1.0,
            muted_dims: 0,
            muted_gain: default_muted_gain(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            ensure!(v >= 1, Config, "{name} must be at least 1");
        }
        ensure!(
            self.hidden_dim.is_multiple_of(self.num_heads),
            Config,
            "hidden_dim {} is not divisible by num_heads {}",
            self.hidden_dim,
            self.num_heads
        );
        ensure!(
            self.init_std.is_finite() && self.init_std > 0.0,
            Config,
            "init_std must be positive and finite"
        );
        ensure!(
            (0.0..=1.0).contains(&self.qk_tie),
            Config,
            "qk_tie {} outside [0, 1]",
            self.qk_tie
        );
        ensure!(
            self.qk_gain.is_finite() && self.qk_gain > 0.0,
            Config,
            "qk_gain must be positive and finite"
        );
        ensure!(
            self.muted_dims < self.hidden_dim,
            Config,
            "muted_dims {} must be below hidden_dim {}",
            self.muted_dims,
            self.hidden_dim
        );
        ensure!(
            self.muted_gain.is_finite() && self.muted_gain >= 0.0,
            Config,
            "muted_gain must be non-negative and finite"
        );
        Ok(())
    }
}
