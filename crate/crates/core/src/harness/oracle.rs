//! Brute-force leave-one-out importance and rank correlation.

use crate::error::{ensure, Result};
use crate::model::{text_hidden, MaskAddends, TokenSequence, ToyVLM};
use crate::numeric::{mean_sq_diff, HARD_MASK};

/// Importance of each vision token: mean squared change of the text hidden
/// states when that token alone is hard-masked. One baseline plus `N` masked
/// passes, in `f64`.
pub fn loo_oracle(model: &ToyVLM, seq: &TokenSequence) -> Result<Vec<f64>> {
    loo_oracle_masked(model, seq, &MaskAddends::zeros(seq.len()))
}

/// As [`loo_oracle`], on top of an existing mask shared by every pass.
pub fn loo_oracle_masked(model: &ToyVLM, seq: &TokenSequence, base: &MaskAddends) -> Result<Vec<f64>> {
    ensure!(seq.num_vision() >= 1 && seq.num_text() >= 1, Input, "oracle needs vision and text tokens");
    let baseline = text_hidden::<f64>(model, seq, Some(base))?;
    seq.vision_indices()
        .into_iter()
        .map(|pos| {
            let mut values = base.values().to_vec();
            values[pos] += HARD_MASK;
            let masked = text_hidden::<f64>(model, seq, Some(&MaskAddends::from_values(values)))?;
            Ok(mean_sq_diff(&masked, &baseline))
        })
        .collect()
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson on average ranks). `None` when either side
/// has no rank variance or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
