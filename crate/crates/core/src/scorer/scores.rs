//! Vision-token importance scores: the learned weighted cosine, its
//! unweighted special case, and a position-only spiral baseline.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Learned,
    Cosine,
    Spiral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Intermediate quantities of the weighted-cosine score, kept for the
/// gradient with respect to the weights.
#[derive(Debug, Clone)]
pub(crate) struct ScoreDetail {
    pub scores: Vec<f64>,
    /// `vision_unit` rows are the l2-normalized vision embeddings.
    pub vision_unit: Array2<f64>,
    pub text_unit: Array2<f64>,
    /// For each vision token, the text row attaining the max (lowest index on ties).
    pub argmax: Vec<usize>,
}

fn normalize_rows(m: ArrayView2<f32>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.mapv(|v| v as f64);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(norm > 0.0 && norm.is_finite(), Input, "{what} row {i} has zero or non-finite norm");
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

pub(crate) fn score_detail(weights: &[f64], vision: ArrayView2<f32>, text: ArrayView2<f32>) -> Result<ScoreDetail> {
    ensure!(vision.nrows() >= 1, Input, "scoring needs at least one vision token");
    ensure!(text.nrows() >= 1, Input, "scoring needs at least one text token");
    let d = vision.ncols();
    ensure!(text.ncols() == d, Input, "vision dim {d} != text dim {}", text.ncols());
    ensure!(weights.len() == d, Input, "weight vector has length {}, expected {d}", weights.len());
    let vision_unit = normalize_rows(vision, "vision")?;
    let text_unit = normalize_rows(text, "text")?;
    let mut weighted = vision_unit.clone();
    for mut row in weighted.rows_mut() {
        row.iter_mut().zip(weights).for_each(|(v, w)| *v *= w);
    }
    let sim = weighted.dot(&text_unit.t());
    let mut scores = Vec::with_capacity(sim.nrows());
    let mut argmax = Vec::with_capacity(sim.nrows());
    for row in sim.rows() {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        scores.push(row[best]);
        argmax.push(best);
    }
    Ok(ScoreDetail { scores, vision_unit, text_unit, argmax })
}

/// `s_i = max_j ((v̂_i ⊙ w) · t̂_j)` with both sides l2-normalized.
pub fn score_tokens(weights: &[f64], vision: ArrayView2<f32>, text: ArrayView2<f32>) -> Result<ImportanceScores> {
    let detail = score_detail(weights, vision, text)?;
    Ok(ImportanceScores { values: detail.scores, provenance: Provenance::Learned })
}

/// Raw cross-modal cosine similarity: `score_tokens` with unit weights.
pub fn cosine_scores(vision: ArrayView2<f32>, text: ArrayView2<f32>) -> Result<ImportanceScores> {
    let ones = vec![1.0; vision.ncols()];
    let detail = score_detail(&ones, vision, text)?;
    Ok(ImportanceScores { values: detail.scores, provenance: Provenance::Cosine })
}

/// Clockwise inward spiral over a `height x width` grid, starting at the
/// top-left cell. Returns row-major cell indices in visiting order.
pub fn spiral_order(height: usize, width: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(height * width);
    if height == 0 || width == 0 {
        return order;
    }
    let (mut top, mut left) = (0isize, 0isize);
    let (mut bottom, mut right) = (height as isize - 1, width as isize - 1);
    let idx = |r: isize, c: isize| r as usize * width + c as usize;
    while top <= bottom && left <= right {
        for c in left..=right {
            order.push(idx(top, c));
        }
        for r in top + 1..=bottom {
            order.push(idx(r, right));
        }
        if top < bottom {
            for c in (left..right).rev() {
                order.push(idx(bottom, c));
            }
        }
        if left < right {
            for r in (top + 1..bottom).rev() {
                order.push(idx(r, left));
            }
        }
        top += 1;
        left += 1;
        bottom -= 1;
        right -= 1;
    }
    order
}

/// Position-only scores: deeper rings outrank outer rings, then cells closer
/// to the grid center, then cells visited later by the inward spiral.
///
/// Scores are `(N - rank) / N`, so the most central cell scores 1.
pub fn spiral_scores(height: usize, width: usize, num_tokens: usize) -> Result<ImportanceScores> {
    ensure!(
        height * width == num_tokens && num_tokens > 0,
        Input,
        "grid {height}x{width} does not cover {num_tokens} tokens"
    );
    let mut visit = vec![0usize; num_tokens];
    for (step, cell) in spiral_order(height, width).into_iter().enumerate() {
        visit[cell] = step;
    }
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let key = |cell: usize| {
        let (r, c) = (cell / width, cell % width);
        let ring = r.min(c).min(height - 1 - r).min(width - 1 - c);
        let dist2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
        (ring, dist2, visit[cell])
    };
    let mut cells: Vec<usize> = (0..num_tokens).collect();
    // most important first
    cells.sort_by(|&a, &b| {
        let (ra, da, va) = key(a);
        let (rb, db, vb) = key(b);
        rb.cmp(&ra).then(da.total_cmp(&db)).then(vb.cmp(&va))
    });
    let mut values = vec![0.0; num_tokens];
    for (rank, cell) in cells.into_iter().enumerate() {
        values[cell] = (num_tokens - rank) as f64 / num_tokens as f64;
    }
    Ok(ImportanceScores { values, provenance: Provenance::Spiral })
}

/// Most square `height x width` factorization of `n` with `height <= width`.
pub fn default_grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_vectors_score_one() {
        let v = array![[0.3f32, -0.4, 1.2]];
        let t = array![[0.5f32, 0.5, 0.5], [0.3, -0.4, 1.2]];
        let s = score_tokens(&[1.0, 1.0, 1.0], v.view(), t.view()).unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let v = array![[1.0f32, 0.0, 0.0]];
        let t = array![[0.0f32, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let s = score_tokens(&[1.0, 1.0, 1.0], v.view(), t.view()).unwrap();
        assert_eq!(s.values[0], 0.0);
    }

    #[test]
    fn weighted_hand_example() {
        let v = array![[1.0f32, 0.0]];
        let t = array![[0.6f32, 0.8]];
        let s = score_tokens(&[2.0, 0.5], v.view(), t.view()).unwrap();
        assert!((s.values[0] - 1.2).abs() < 1e-7);
    }

    #[test]
    fn cosine_antipodal_is_minus_one() {
        let v = array![[1.0f32, 2.0]];
        let t = array![[-2.0f32, -4.0]];
        let s = cosine_scores(v.view(), t.view()).unwrap();
        assert!((s.values[0] + 1.0).abs() < 1e-12);
        assert_eq!(s.provenance, Provenance::Cosine);
    }

    #[test]
    fn zero_norm_row_is_input_error() {
        let v = array![[0.0f32, 0.0]];
        let t = array![[1.0f32, 0.0]];
        assert!(cosine_scores(v.view(), t.view()).is_err());
    }

    #[test]
    fn spiral_order_3x3() {
        assert_eq!(spiral_order(3, 3), vec![0, 1, 2, 5, 8, 7, 6, 3, 4]);
        assert_eq!(spiral_order(2, 3), vec![0, 1, 2, 5, 4, 3]);
        assert_eq!(spiral_order(1, 4), vec![0, 1, 2, 3]);
        assert_eq!(spiral_order(3, 1), vec![0, 1, 2]);
    }

    #[test]
    fn spiral_scores_3x3_center_first_corners_last() {
        let s = spiral_scores(3, 3, 9).unwrap().values;
        let mut idx: Vec<usize> = (0..9).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        assert_eq!(idx[0], 4);
        let mut last4 = idx[5..].to_vec();
        last4.sort();
        assert_eq!(last4, vec![0, 2, 6, 8]);
    }

    #[test]
    fn spiral_scores_line_interior_first() {
        let s = spiral_scores(1, 4, 4).unwrap().values;
        for interior in [1, 2] {
            for end in [0, 3] {
                assert!(s[interior] > s[end]);
            }
        }
    }

    #[test]
    fn spiral_single_cell_and_mismatch() {
        assert_eq!(spiral_scores(1, 1, 1).unwrap().values, vec![1.0]);
        assert!(spiral_scores(2, 2, 5).is_err());
    }

    #[test]
    fn default_grid_factorizes() {
        assert_eq!(default_grid(32), (4, 8));
        assert_eq!(default_grid(36), (6, 6));
        assert_eq!(default_grid(7), (1, 7));
    }
}
