//! Analytic compute and memory accounting.
//!
//! Per-layer FLOPs for a length-`n` prefill are `4nd² + 2n²d + 3ndm`:
//! four `d x d` projections, the score and value products, and a three-matrix
//! FFN. All counts are exact integers.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::eviction::Census;
use crate::model::{Modality, ModelConfig, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub d: u64,
    pub m: u64,
    pub num_layers: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
}

impl CostModel {
    /// Dimensions of a 3.8B-parameter class decoder (assumed, not published
    /// alongside the savings figures it is compared against).
    pub fn reference() -> Self {
        Self { d: 3072, m: 8192, num_layers: 32, num_heads: 32, head_dim: 96, bytes_per_element: 2 }
    }

    pub fn from_config(cfg: &ModelConfig, bytes_per_element: u64) -> Self {
        Self {
            d: cfg.hidden_dim as u64,
            m: cfg.ffn_dim as u64,
            num_layers: cfg.num_layers as u64,
            num_heads: cfg.num_heads as u64,
            head_dim: cfg.head_dim() as u64,
            bytes_per_element,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d > 0 && self.m > 0 && self.num_layers > 0 && self.num_heads > 0 && self.bytes_per_element > 0,
            Config,
            "cost model dimensions must be positive"
        );
        ensure!(
            self.head_dim * self.num_heads == self.d,
            Config,
            "head_dim {} x heads {} != d {}",
            self.head_dim,
            self.num_heads,
            self.d
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub projections: u128,
    pub attention: u128,
    pub ffn: u128,
}

impl FlopsBreakdown {
    pub fn per_layer(&self) -> u128 {
        self.projections + self.attention + self.ffn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub per_layer: u128,
    pub total: u128,
    pub breakdown: FlopsBreakdown,
}

pub fn flops_breakdown(n: u64, model: &CostModel) -> FlopsBreakdown {
    let (n, d, m) = (n as u128, model.d as u128, model.m as u128);
    FlopsBreakdown { projections: 4 * n * d * d, attention: 2 * n * n * d, ffn: 3 * n * d * m }
}

pub fn flops(n: u64, model: &CostModel) -> FlopCount {
    let breakdown = flops_breakdown(n, model);
    let per_layer = breakdown.per_layer();
    FlopCount { per_layer, total: per_layer * model.num_layers as u128, breakdown }
}

/// `1 - flops(n_kept) / flops(n_full)`.
pub fn flops_saved(n_full: u64, n_kept: u64, model: &CostModel) -> Result<f64> {
    ensure!(
        1 <= n_kept && n_kept <= n_full,
        Input,
        "need 1 <= n_kept <= n_full, got n_kept={n_kept}, n_full={n_full}"
    );
    let full = flops(n_full, model).per_layer;
    let kept = flops(n_kept, model).per_layer;
    Ok((full - kept) as f64 / full as f64)
}

/// `n x layers x 2 x d x bytes`.
pub fn kv_bytes(n: u64, model: &CostModel) -> u128 {
    n as u128 * model.num_layers as u128 * 2 * model.d as u128 * model.bytes_per_element as u128
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub modality: Modality,
    pub phase: Phase,
    pub turn_id: u32,
    pub count: usize,
}

pub fn census_entries(census: &Census) -> Vec<CensusEntry> {
    census
        .counts
        .iter()
        .map(|(&(modality, phase, turn_id), &count)| CensusEntry { modality, phase, turn_id, count })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub flops_full: u128,
    pub flops_pruned: u128,
    pub flops_saved: f64,
    pub kv_bytes_full: u128,
    pub kv_bytes_pruned: u128,
    pub peak_token_count: usize,
    pub census: Vec<CensusEntry>,
}

impl UsageReport {
    pub fn new(model: &CostModel, n_full: u64, n_kept: u64, peak_token_count: usize, census: &Census) -> Result<Self> {
        Ok(Self {
            flops_full: flops(n_full, model).total,
            flops_pruned: flops(n_kept, model).total,
            flops_saved: flops_saved(n_full, n_kept, model)?,
            kv_bytes_full: kv_bytes(n_full, model),
            kv_bytes_pruned: kv_bytes(n_kept, model),
            peak_token_count,
            census: census_entries(census),
        })
    }
}

/// Savings at one vision keep ratio under both token-count conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub keep_ratio: f64,
    pub n_full: u64,
    pub n_kept: u64,
    /// Text tokens counted in `n`.
    pub saved_with_text: f64,
    /// Only vision tokens counted in `n`.
    pub saved_vision_only: f64,
}

/// Uniform-budget savings for a `num_vision + num_text` prompt at each ratio.
pub fn flops_parity(model: &CostModel, num_vision: u64, num_text: u64, ratios: &[f64]) -> Result<Vec<ParityRow>> {
    ratios
        .iter()
        .map(|&r| {
            ensure!(r > 0.0 && r <= 1.0, Input, "keep ratio {r} outside (0, 1]");
            let kept_vision = crate::scorer::keep_count(num_vision as usize, r) as u64;
            let n_full = num_vision + num_text;
            let n_kept = kept_vision + num_text;
            Ok(ParityRow {
                keep_ratio: r,
                n_full,
                n_kept,
                saved_with_text: flops_saved(n_full, n_kept, model)?,
                saved_vision_only: flops_saved(num_vision, kept_vision, model)?,
            })
        })
        .collect()
}
