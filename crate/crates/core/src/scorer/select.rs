//! Threshold, top-k and soft score mask.

use super::scores::ImportanceScores;
use crate::error::{ensure, Result};
use crate::model::{MaskAddends, TokenSequence};
use crate::numeric::sigmoid;

fn check_ratio(r: f64) -> Result<()> {
    ensure!(r > 0.0 && r <= 1.0 && r.is_finite(), Input, "keep ratio {r} outside (0, 1]");
    Ok(())
}

/// `max(1, floor(n * r))`. A small tolerance absorbs representation error in
/// products like `100 * 0.29`.
pub fn keep_count(n: usize, r: f64) -> usize {
    ((n as f64 * r + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Score of the `max(1, floor(N r))`-th highest token.
pub fn compute_threshold(scores: &ImportanceScores, r: f64) -> Result<f64> {
    check_ratio(r)?;
    ensure!(!scores.is_empty(), Input, "cannot threshold an empty score vector");
    let k = keep_count(scores.len(), r);
    Ok(scores.values[rank_descending(&scores.values)[k - 1]])
}

/// Indices of the `max(1, floor(N r))` highest scores, ascending.
pub fn select_top_k(scores: &ImportanceScores, r: f64) -> Result<Vec<usize>> {
    check_ratio(r)?;
    ensure!(!scores.is_empty(), Input, "cannot select from an empty score vector");
    let k = keep_count(scores.len(), r);
    let mut keep = rank_descending(&scores.values)[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// `-C * sigmoid((theta - s_i) / tau)` for each vision token.
pub fn soft_penalties(scores: &[f64], theta: f64, strength: f64, sharpness: f64) -> Result<Vec<f64>> {
    ensure!(sharpness > 0.0, Input, "mask sharpness tau must be positive, got {sharpness}");
    ensure!(strength >= 0.0, Input, "mask strength C must be non-negative, got {strength}");
    Ok(scores.iter().map(|&s| -strength * sigmoid((theta - s) / sharpness)).collect())
}

/// Full-length soft mask: penalties at vision positions, zero at text.
pub fn soft_mask(
    seq: &TokenSequence,
    scores: &ImportanceScores,
    theta: f64,
    strength: f64,
    sharpness: f64,
) -> Result<MaskAddends> {
    let vision = seq.vision_indices();
    ensure!(
        vision.len() == scores.len(),
        Input,
        "{} scores for {} vision tokens",
        scores.len(),
        vision.len()
    );
    let penalties = soft_penalties(&scores.values, theta, strength, sharpness)?;
    let mut values = vec![0.0; seq.len()];
    for (&pos, p) in vision.iter().zip(penalties) {
        values[pos] = p;
    }
    Ok(MaskAddends::from_values(values))
}

/// Hard mask over every vision token not in `keep` (vision-local indices).
pub fn hard_mask_complement(seq: &TokenSequence, keep: &[usize]) -> MaskAddends {
    let masked: Vec<usize> = seq
        .vision_indices()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.binary_search(i).is_err())
        .map(|(_, pos)| pos)
        .collect();
    MaskAddends::hard(seq.len(), &masked)
}
