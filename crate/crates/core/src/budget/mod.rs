//! Per-sample keep-ratio policies driven by the importance gap, their
//! calibration, and physical vision-token pruning.

mod calibrate;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::TokenSequence;
use crate::scorer::{select_top_k, ImportanceScores};

pub use calibrate::{
    calibrate_linear, calibrate_threshold, CalibrationEntry, CalibrationSet, Calibrated, GridPoint, AVERAGE_TOLERANCE,
    RATIO_GRID,
};

fn valid_ratio(r: f64) -> bool {
    r > 0.0 && r <= 1.0
}

/// Three difficulty tiers split at `g_lo` and `g_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSweepPolicy {
    pub g_lo: f64,
    pub g_hi: f64,
    pub r_conservative: f64,
    pub r_moderate: f64,
    pub r_aggressive: f64,
}

impl ThresholdSweepPolicy {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.g_lo < self.g_hi, Config, "g_lo {} must be below g_hi {}", self.g_lo, self.g_hi);
        for r in [self.r_conservative, self.r_moderate, self.r_aggressive] {
            ensure!(valid_ratio(r), Config, "keep ratio {r} outside (0, 1]");
        }
        ensure!(
            self.r_conservative > self.r_moderate && self.r_moderate > self.r_aggressive,
            Config,
            "ratios must be strictly decreasing: {} > {} > {}",
            self.r_conservative,
            self.r_moderate,
            self.r_aggressive
        );
        Ok(())
    }
}

/// `clamp(r_target + a (g - g_bar), r_min, r_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearMapPolicy {
    pub r_target: f64,
    pub a: f64,
    pub g_bar: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl LinearMapPolicy {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            valid_ratio(self.r_min) && valid_ratio(self.r_max),
            Config,
            "clamp bounds [{}, {}] outside (0, 1]",
            self.r_min,
            self.r_max
        );
        ensure!(
            self.r_min <= self.r_target && self.r_target <= self.r_max,
            Config,
            "r_target {} outside [{}, {}]",
            self.r_target,
            self.r_min,
            self.r_max
        );
        ensure!(self.a.is_finite() && self.g_bar.is_finite(), Config, "slope and mean gap must be finite");
        Ok(())
    }
}

pub fn keep_ratio_threshold(g: f64, policy: &ThresholdSweepPolicy) -> f64 {
    if g < policy.g_lo {
        policy.r_conservative
    } else if g < policy.g_hi {
        policy.r_moderate
    } else {
        policy.r_aggressive
    }
}

pub fn keep_ratio_linear(g: f64, policy: &LinearMapPolicy) -> f64 {
    (policy.r_target + policy.a * (g - policy.g_bar)).clamp(policy.r_min, policy.r_max)
}

/// Any keep-ratio rule the harness can apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BudgetPolicy {
    Uniform { ratio: f64 },
    Threshold(ThresholdSweepPolicy),
    Linear(LinearMapPolicy),
}

impl BudgetPolicy {
    pub fn keep_ratio(&self, g: f64) -> f64 {
        match self {
            BudgetPolicy::Uniform { ratio } => *ratio,
            BudgetPolicy::Threshold(p) => keep_ratio_threshold(g, p),
            BudgetPolicy::Linear(p) => keep_ratio_linear(g, p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BudgetPolicy::Uniform { ratio } => {
                ensure!(valid_ratio(*ratio), Config, "keep ratio {ratio} outside (0, 1]");
                Ok(())
            }
            BudgetPolicy::Threshold(p) => p.validate(),
            BudgetPolicy::Linear(p) => p.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BudgetPolicy::Uniform { .. } => "uniform",
            BudgetPolicy::Threshold(_) => "threshold",
            BudgetPolicy::Linear(_) => "linear",
        }
    }
}

/// Physically drops vision tokens outside the top `max(1, floor(N r))`.
/// Survivors keep their position ids and order; text is untouched.
pub fn prune_vision(seq: &TokenSequence, scores: &ImportanceScores, r: f64) -> Result<TokenSequence> {
    ensure!(
        scores.len() == seq.num_vision(),
        Input,
        "{} scores for {} vision tokens",
        scores.len(),
        seq.num_vision()
    );
    let keep = select_top_k(scores, r)?;
    Ok(seq.retain_vision(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::Provenance;

    fn sweep() -> ThresholdSweepPolicy {
        ThresholdSweepPolicy { g_lo: 0.2, g_hi: 0.3, r_conservative: 0.9, r_moderate: 0.65, r_aggressive: 0.4 }
    }

    #[test]
    fn threshold_tiers_and_boundaries() {
        let p = sweep();
        assert_eq!(keep_ratio_threshold(0.1, &p), 0.9);
        assert_eq!(keep_ratio_threshold(0.2, &p), 0.65);
        assert_eq!(keep_ratio_threshold(0.25, &p), 0.65);
        assert_eq!(keep_ratio_threshold(0.3, &p), 0.4);
    }

    #[test]
    fn threshold_policy_validation() {
        assert!(sweep().validate().is_ok());
        assert!(ThresholdSweepPolicy { g_hi: 0.2, ..sweep() }.validate().is_err());
        assert!(ThresholdSweepPolicy { r_moderate: 0.9, ..sweep() }.validate().is_err());
        assert!(ThresholdSweepPolicy { r_conservative: 1.2, ..sweep() }.validate().is_err());
    }

    #[test]
    fn linear_examples() {
        let p = LinearMapPolicy { r_target: 0.65, a: -2.0, g_bar: 0.218, r_min: 0.4, r_max: 0.9 };
        assert!(p.validate().is_ok());
        assert_eq!(keep_ratio_linear(0.218, &p), 0.65);
        assert!((keep_ratio_linear(0.30, &p) - 0.486).abs() < 1e-12);
        assert_eq!(keep_ratio_linear(5.0, &p), 0.4);
        assert_eq!(keep_ratio_linear(-5.0, &p), 0.9);
        assert!(LinearMapPolicy { r_target: 0.95, ..p }.validate().is_err());
    }

    #[test]
    fn policy_serializes_with_kind_tag() {
        let p = BudgetPolicy::Threshold(sweep());
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"kind\":\"threshold\""));
        assert_eq!(serde_json::from_str::<BudgetPolicy>(&json).unwrap(), p);
    }

    #[test]
    fn prune_keeps_positions_and_text() {
        let v: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32 + 1.0, 1.0]).collect();
        let seq = TokenSequence::single_turn(&v, &[3, 4]).unwrap();
        let s = ImportanceScores { values: vec![0.1, 0.9, 0.3, 0.8], provenance: Provenance::Cosine };
        let out = prune_vision(&seq, &s, 0.5).unwrap();
        let pos: Vec<usize> = out.tokens.iter().map(|t| t.position_id).collect();
        assert_eq!(pos, vec![1, 3, 4, 5]);
        assert_eq!(out.text_ids(), vec![3, 4]);
        assert_eq!(prune_vision(&seq, &s, 1.0).unwrap(), seq);
        let short = ImportanceScores { values: vec![0.1], provenance: Provenance::Cosine };
        assert!(prune_vision(&seq, &short, 0.5).is_err());
    }
}
