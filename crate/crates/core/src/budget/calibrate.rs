//! Grid-search calibration of the gap-to-keep-ratio policies.
//!
//! Every sample's pruned-vs-baseline output MSE is precomputed for each
//! possible keep count, so evaluating a candidate policy is a table lookup.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BudgetPolicy, LinearMapPolicy, ThresholdSweepPolicy};
use crate::error::{ensure, Error, Result};
use crate::model::{text_hidden, TokenSequence, ToyVLM};
use crate::numeric::mean_sq_diff;
use crate::scorer::{gap_of, keep_count, rank_descending, ImportanceScores};

/// Candidate keep ratios for the three tiers.
pub const RATIO_GRID: [f64; 6] = [0.9, 0.8, 0.75, 0.65, 0.5, 0.4];

/// Allowed distance between a policy's realized average keep ratio and the target.
pub const AVERAGE_TOLERANCE: f64 = 0.02;

const GAP_QUANTILES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub gap: f64,
    /// `mse_by_keep[k - 1]` is the output MSE when the top `k` vision tokens are kept.
    pub mse_by_keep: Vec<f64>,
}

impl CalibrationEntry {
    pub fn num_vision(&self) -> usize {
        self.mse_by_keep.len()
    }

    pub fn mse_at_ratio(&self, r: f64) -> f64 {
        self.mse_by_keep[keep_count(self.num_vision(), r) - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationSet {
    pub fn new(entries: Vec<CalibrationEntry>) -> Result<Self> {
        ensure!(!entries.is_empty(), Input, "calibration set is empty");
        ensure!(
            entries.iter().all(|e| !e.mse_by_keep.is_empty() && e.gap.is_finite()),
            Input,
            "calibration entries need a finite gap and at least one vision token"
        );
        Ok(Self { entries })
    }

    /// Runs the pruned forward pass at every keep count for every sample.
    pub fn build(model: &ToyVLM, samples: &[(TokenSequence, ImportanceScores)]) -> Result<Self> {
        let entries = samples
            .par_iter()
            .map(|(seq, scores)| calibration_entry(model, seq, scores))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gap).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Realized average keep ratio (mean of the applied ratios) and mean MSE.
    pub fn evaluate(&self, policy: &BudgetPolicy) -> (f64, f64) {
        let n = self.entries.len() as f64;
        let (mut ratio_sum, mut mse_sum) = (0.0, 0.0);
        for e in &self.entries {
            let r = policy.keep_ratio(e.gap);
            ratio_sum += r;
            mse_sum += e.mse_at_ratio(r);
        }
        (ratio_sum / n, mse_sum / n)
    }
}

fn calibration_entry(model: &ToyVLM, seq: &TokenSequence, scores: &ImportanceScores) -> Result<CalibrationEntry> {
    let n = seq.num_vision();
    ensure!(scores.len() == n, Input, "{} scores for {n} vision tokens", scores.len());
    ensure!(n >= 1, Input, "calibration sample has no vision tokens");
    let baseline = text_hidden::<f32>(model, seq, None)?;
    let order = rank_descending(&scores.values);
    let mut mse_by_keep = Vec::with_capacity(n);
    for k in 1..=n {
        let mut keep = order[..k].to_vec();
        keep.sort_unstable();
        let pruned = text_hidden::<f32>(model, &seq.retain_vision(&keep), None)?;
        mse_by_keep.push(mean_sq_diff(&pruned, &baseline));
    }
    Ok(CalibrationEntry { gap: gap_of(&scores.values), mse_by_keep })
}

/// One evaluated candidate of a calibration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint<P> {
    pub index: usize,
    pub policy: P,
    pub avg_keep_ratio: f64,
    pub mean_mse: f64,
    pub feasible: bool,
}

/// Selected policy plus the full grid log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrated<P> {
    pub policy: P,
    pub avg_keep_ratio: f64,
    pub mean_mse: f64,
    pub log: Vec<GridPoint<P>>,
}

/// Linear-interpolation quantile of sorted data (the usual "type 7").
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_target(target: f64) -> Result<()> {
    ensure!(target > 0.0 && target <= 1.0, Input, "target average keep ratio {target} outside (0, 1]");
    Ok(())
}

fn select<P: Copy>(
    candidates: Vec<P>,
    set: &CalibrationSet,
    target: f64,
    wrap: impl Fn(&P) -> BudgetPolicy,
) -> Result<Calibrated<P>> {
    let mut log: Vec<GridPoint<P>> = Vec::with_capacity(candidates.len());
    let mut best: Option<usize> = None;
    for (index, policy) in candidates.into_iter().enumerate() {
        let (avg, mse) = set.evaluate(&wrap(&policy));
        let feasible = (avg - target).abs() <= AVERAGE_TOLERANCE + 1e-12;
        if feasible && best.is_none_or(|b: usize| mse < log[b].mean_mse) {
            best = Some(index);
        }
        log.push(GridPoint { index, policy, avg_keep_ratio: avg, mean_mse: mse, feasible });
    }
    let b = best.ok_or_else(|| {
        Error::Infeasible(format!("no grid point reaches average keep ratio {target} within ±{AVERAGE_TOLERANCE}"))
    })?;
    Ok(Calibrated { policy: log[b].policy, avg_keep_ratio: log[b].avg_keep_ratio, mean_mse: log[b].mean_mse, log })
}

/// Strictly decreasing ratio triples from [`RATIO_GRID`], in lexicographic grid order.
fn ratio_triples() -> Vec<[f64; 3]> {
    let g = RATIO_GRID;
    let mut out = Vec::new();
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            for k in j + 1..g.len() {
                out.push([g[i], g[j], g[k]]);
            }
        }
    }
    out
}

/// Grid search over gap-quantile thresholds and tier ratios.
///
/// When two quantiles coincide, `g_hi` is nudged to the next representable
/// value above `g_lo`, so every sample at that gap falls in the middle tier.
pub fn calibrate_threshold(set: &CalibrationSet, target_avg: f64) -> Result<Calibrated<ThresholdSweepPolicy>> {
    ensure!(!set.is_empty(), Input, "calibration set is empty");
    check_target(target_avg)?;
    let mut sorted = set.gaps();
    sorted.sort_by(f64::total_cmp);
    let q: Vec<f64> = GAP_QUANTILES.iter().map(|&p| quantile(&sorted, p)).collect();
    let mut candidates = Vec::new();
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            let g_lo = q[a];
            let g_hi = if q[b] > g_lo { q[b] } else { g_lo.next_up() };
            for [rc, rm, ra] in ratio_triples() {
                candidates.push(ThresholdSweepPolicy {
                    g_lo,
                    g_hi,
                    r_conservative: rc,
                    r_moderate: rm,
                    r_aggressive: ra,
                });
            }
        }
    }
    select(candidates, set, target_avg, |p| BudgetPolicy::Threshold(*p))
}

/// Grid search over the slope `a`, from 0 down to -5 in steps of 0.1, with
/// `r_target = target_avg` and `g_bar` the mean calibration gap.
pub fn calibrate_linear(
    set: &CalibrationSet,
    target_avg: f64,
    r_min: f64,
    r_max: f64,
) -> Result<Calibrated<LinearMapPolicy>> {
    ensure!(!set.is_empty(), Input, "calibration set is empty");
    check_target(target_avg)?;
    let g_bar = set.gaps().iter().sum::<f64>() / set.len() as f64;
    let template = LinearMapPolicy { r_target: target_avg, a: 0.0, g_bar, r_min, r_max };
    template.validate()?;
    let candidates: Vec<LinearMapPolicy> =
        (0..=50).map(|k| LinearMapPolicy { a: -(k as f64) / 10.0, ..template }).collect();
    select(candidates, set, target_avg, |p| BudgetPolicy::Linear(*p))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// MSE falls linearly in the kept fraction, scaled by `difficulty`.
    fn entry(gap: f64, n: usize, difficulty: f64) -> CalibrationEntry {
        CalibrationEntry {
            gap,
            mse_by_keep: (1..=n).map(|k| difficulty * (1.0 - k as f64 / n as f64)).collect(),
        }
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert!((quantile(&s, 0.2) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn triples_are_strictly_decreasing() {
        let t = ratio_triples();
        assert_eq!(t.len(), 20);
        assert!(t.iter().all(|r| r[0] > r[1] && r[1] > r[2]));
    }

    #[test]
    fn empty_set_is_input_error() {
        assert!(CalibrationSet::new(vec![]).is_err());
    }

    #[test]
    fn identical_gaps_use_middle_tier_only() {
        let set = CalibrationSet::new((0..10).map(|_| entry(0.2, 20, 1.0)).collect()).unwrap();
        let c = calibrate_threshold(&set, 0.65).unwrap();
        assert_eq!(c.policy.r_moderate, 0.65);
        assert!((c.avg_keep_ratio - 0.65).abs() <= AVERAGE_TOLERANCE);
        assert_eq!(c.log.len(), 120);
    }

    #[test]
    fn bimodal_gaps_are_separated() {
        // Low-gap samples are hurt far more by pruning than high-gap ones.
        let mut entries = Vec::new();
        for _ in 0..20 {
            entries.push(entry(0.1, 20, 10.0));
            entries.push(entry(0.5, 20, 0.1));
        }
        let set = CalibrationSet::new(entries).unwrap();
        let c = calibrate_threshold(&set, 0.65).unwrap();
        let tier = |g: f64| super::super::keep_ratio_threshold(g, &c.policy);
        assert!(tier(0.1) > tier(0.5));
        let (avg, mse) = set.evaluate(&BudgetPolicy::Threshold(c.policy));
        assert!((avg - 0.65).abs() <= AVERAGE_TOLERANCE);
        let (_, uniform) = set.evaluate(&BudgetPolicy::Uniform { ratio: avg });
        assert!(mse < uniform);
    }

    #[test]
    fn infeasible_target() {
        let set = CalibrationSet::new(vec![entry(0.2, 10, 1.0)]).unwrap();
        let err = calibrate_threshold(&set, 0.1).unwrap_err();
        assert_eq!(err.kind(), "infeasible");
    }

    #[test]
    fn linear_zero_slope_is_uniform() {
        let set = CalibrationSet::new((0..10).map(|i| entry(0.1 * i as f64, 20, 1.0)).collect()).unwrap();
        let c = calibrate_linear(&set, 0.65, 0.4, 0.9).unwrap();
        assert_eq!(c.log[0].policy.a, 0.0);
        let uniform = set.evaluate(&BudgetPolicy::Uniform { ratio: 0.65 });
        assert_eq!((c.log[0].avg_keep_ratio, c.log[0].mean_mse), uniform);
        assert!(c.policy.a <= 0.0);
        assert_eq!(c.log.len(), 51);
        assert_eq!(c.log[50].policy.a, -5.0);
        assert!((c.avg_keep_ratio - 0.65).abs() <= AVERAGE_TOLERANCE);
    }

    #[test]
    fn linear_rejects_target_outside_clamp() {
        let set = CalibrationSet::new(vec![entry(0.2, 10, 1.0)]).unwrap();
        assert!(calibrate_linear(&set, 0.95, 0.4, 0.9).is_err());
    }
}
