use super::scores::ImportanceScores;

/// Spread between the k-th highest and k-th lowest score, `k = max(1, floor(N/4))`.
///
/// Returns 0 for an empty score vector.
pub fn importance_gap(scores: &ImportanceScores) -> f64 {
    gap_of(&scores.values)
}

pub fn gap_of(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let k = (n / 4).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[n - k] - sorted[k - 1]
}
