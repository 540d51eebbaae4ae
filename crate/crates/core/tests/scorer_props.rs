//! Scoring, selection and soft-mask invariants.

use asymtok::model::{text_hidden, ModelConfig, TokenSequence, ToyVLM};
use asymtok::scorer::{
    compute_threshold, cosine_scores, gap_of, hard_mask_complement, keep_count, score_tokens, select_top_k,
    soft_mask, soft_penalties, ImportanceScores, Provenance,
};
use ndarray::Array2;
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(prop::collection::vec(-2.0f32..2.0, d), n).prop_filter_map("zero row", move |v| {
        if v.iter().any(|r| r.iter().all(|x| x.abs() < 1e-3)) {
            return None;
        }
        Some(Array2::from_shape_vec((n, d), v.concat()).unwrap())
    })
}

fn problem() -> impl Strategy<Value = (Array2<f32>, Array2<f32>, Vec<f64>)> {
    (1usize..12, 1usize..5, 1usize..10)
        .prop_flat_map(|(n, l, d)| (rows(n, d), rows(l, d), prop::collection::vec(0.0f64..3.0, d)))
}

fn scores(values: Vec<f64>) -> ImportanceScores {
    ImportanceScores { values, provenance: Provenance::Learned }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn unit_weights_reproduce_cosine_exactly((v, t, w) in problem()) {
        let ones = vec![1.0; w.len()];
        prop_assert_eq!(score_tokens(&ones, v.view(), t.view()).unwrap().values, cosine_scores(v.view(), t.view()).unwrap().values);
    }

    #[test]
    fn scores_bounded_by_max_weight((v, t, w) in problem()) {
        let bound = w.iter().cloned().fold(0.0, f64::max);
        for s in score_tokens(&w, v.view(), t.view()).unwrap().values {
            prop_assert!(s.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn positive_rescaling_keeps_scores((v, t, w) in problem(), exp in -6i32..6, c in 0.01f32..100.0) {
        let base = score_tokens(&w, v.view(), t.view()).unwrap();
        // powers of two scale exactly, so the scores must match bit for bit
        let p2 = v.mapv(|x| x * 2f32.powi(exp));
        prop_assert_eq!(&score_tokens(&w, p2.view(), t.view()).unwrap().values, &base.values);
        let scaled = score_tokens(&w, v.mapv(|x| x * c).view(), t.view()).unwrap();
        for (a, b) in scaled.values.iter().zip(&base.values) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn permuting_vision_permutes_scores((v, t, w) in problem(), seed in any::<u64>()) {
        let n = v.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pv = v.select(ndarray::Axis(0), &perm);
        let base = score_tokens(&w, v.view(), t.view()).unwrap().values;
        let permuted = score_tokens(&w, pv.view(), t.view()).unwrap().values;
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(permuted[i], base[p]);
        }
    }

    #[test]
    fn top_k_matches_sort_and_slice(values in prop::collection::vec(-1.0f64..1.0, 1..40), r in 0.01f64..=1.0) {
        let k = keep_count(values.len(), r);
        prop_assert_eq!(k, ((values.len() as f64 * r + 1e-9).floor() as usize).max(1));
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        let mut expect = idx[..k].to_vec();
        expect.sort_unstable();
        let sc = scores(values.clone());
        prop_assert_eq!(select_top_k(&sc, r).unwrap(), expect);
        prop_assert_eq!(compute_threshold(&sc, r).unwrap(), values[idx[k - 1]]);
    }

    #[test]
    fn quantized_ties_go_to_lower_index(values in prop::collection::vec(0u8..4, 1..30), r in 0.01f64..=1.0) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let keep = select_top_k(&scores(values.clone()), r).unwrap();
        let kept_min = keep.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        for i in 0..values.len() {
            if !keep.contains(&i) {
                prop_assert!(values[i] <= kept_min);
                if values[i] == kept_min {
                    prop_assert!(keep.iter().filter(|&&j| values[j] == kept_min).all(|&j| j < i));
                }
            }
        }
    }

    #[test]
    fn soft_mask_is_monotone_and_bounded(
        values in prop::collection::vec(-1.0f64..1.0, 1..30),
        theta in -1.0f64..1.0,
        c in 0.1f64..10.0,
        tau in 0.1f64..2.0,
    ) {
        let m = soft_penalties(&values, theta, c, tau).unwrap();
        for i in 0..values.len() {
            prop_assert!(m[i] > -c && m[i] < 0.0);
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(m[i] <= m[j]);
                }
            }
        }
    }

    #[test]
    fn gap_matches_sorted_quartiles(values in prop::collection::vec(-1.0f64..1.0, 1..50)) {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n = sorted.len();
        let k = (n / 4).max(1);
        prop_assert_eq!(gap_of(&values), sorted[k - 1] - sorted[n - k]);
    }
}

/// With a large strength and a sharp transition the soft mask behaves like
/// the hard mask of the top-k keep set.
#[test]
fn sharp_soft_mask_approaches_hard_mask() {
    let model = ToyVLM::init(ModelConfig {
        num_layers: 4,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 32,
        max_positions: 64,
        init_std: 0.1,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut state = 17u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    };
    for case in 0..20 {
        let n = 4 + case % 9;
        let vision: Vec<Vec<f32>> = (0..n).map(|_| (0..16).map(|_| next()).collect()).collect();
        let seq = TokenSequence::single_turn(&vision, &[3, 9, 27]).unwrap();
        // distinct, well separated scores so the threshold is unambiguous at tau = 1e-3
        let values: Vec<f64> = (0..n).map(|i| ((i + case) % n) as f64 * 0.1).collect();
        let sc = scores(values);
        for r in [0.25, 0.5, 0.75] {
            let keep = select_top_k(&sc, r).unwrap();
            let theta = compute_threshold(&sc, r).unwrap();
            // the threshold token itself sits at sigmoid(0); place theta just below it
            let soft = soft_mask(&seq, &sc, theta - 0.05, 1e4, 1e-3).unwrap();
            let a = text_hidden::<f64>(&model, &seq, Some(&soft)).unwrap();
            let b = text_hidden::<f64>(&model, &seq, Some(&hard_mask_complement(&seq, &keep))).unwrap();
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-3, "case {case} r {r}: {err}");
        }
    }
}
