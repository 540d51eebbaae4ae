//! Output-discrepancy training of the per-dimension scorer weights.
//!
//! Each step runs the frozen model twice: once unmasked and once with the
//! soft score mask. The loss is the mean squared distance between the two
//! runs' final hidden states at text positions plus `lambda * ||w - 1||^2`.
//! The threshold is treated as a constant; gradients reach `w` through the
//! sigmoid penalties, the attention logits of every layer, and the score
//! formula.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scores::{score_detail, ImportanceScores, Provenance, ScoreDetail};
use super::select::{compute_threshold, soft_penalties};
use super::modality_embeddings;
use crate::error::{ensure, Result};
use crate::model::backward::mask_gradient;
use crate::model::{embed, run_tape, text_hidden, Payload, Precision, TokenSequence, ToyVLM};
use crate::numeric::{sigmoid, Real};

pub const SCORER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerHyperParams {
    /// Mask strength `C`.
    pub mask_strength: f64,
    /// Transition sharpness `tau`.
    pub mask_sharpness: f64,
    /// Weight `lambda` of the pull toward the all-ones vector.
    pub regularization: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Keep ratios sampled uniformly, one per step.
    pub train_ratios: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub seed: u64,
}

impl Default for ScorerHyperParams {
    fn default() -> Self {
        Self {
            mask_strength: 5.0,
            mask_sharpness: 1.0,
            regularization: 0.001,
            learning_rate: 1e-3,
            epochs: 3,
            train_ratios: vec![0.5, 0.65, 0.75],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clamp_min: 0.0,
            clamp_max: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

/// Learnable weights plus everything needed to resume or audit training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerState {
    pub schema_version: u32,
    pub weights: Vec<f64>,
    pub hyper: ScorerHyperParams,
    pub moments: AdamMoments,
    /// Mean training loss of each completed epoch.
    pub loss_log: Vec<f64>,
    pub corpus_fingerprint: Option<String>,
    pub model_checksum: Option<String>,
}

impl ScorerState {
    pub fn new(hidden_dim: usize, hyper: ScorerHyperParams) -> Self {
        Self {
            schema_version: SCORER_SCHEMA_VERSION,
            weights: vec![1.0; hidden_dim],
            hyper,
            moments: AdamMoments {
                first: vec![0.0; hidden_dim],
                second: vec![0.0; hidden_dim],
                step: 0,
            },
            loss_log: Vec::new(),
            corpus_fingerprint: None,
            model_checksum: None,
        }
    }

    pub fn scores(&self, model: &ToyVLM, seq: &TokenSequence) -> Result<ImportanceScores> {
        let (v, t) = modality_embeddings(model, seq)?;
        let detail = score_detail(&self.weights, v.view(), t.view())?;
        Ok(ImportanceScores { values: detail.scores, provenance: Provenance::Learned })
    }

    /// One Adam update followed by clamping.
    pub fn apply_gradient(&mut self, gradient: &[f64]) {
        let h = &self.hyper;
        let m = &mut self.moments;
        m.step += 1;
        let t = m.step as i32;
        let bias1 = 1.0 - h.beta1.powi(t);
        let bias2 = 1.0 - h.beta2.powi(t);
        for (i, &g) in gradient.iter().enumerate() {
            m.first[i] = h.beta1 * m.first[i] + (1.0 - h.beta1) * g;
            m.second[i] = h.beta2 * m.second[i] + (1.0 - h.beta2) * g * g;
            let step = h.learning_rate * (m.first[i] / bias1) / ((m.second[i] / bias2).sqrt() + h.adam_eps);
            self.weights[i] = (self.weights[i] - step).clamp(h.clamp_min, h.clamp_max);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: ScorerState = serde_json::from_slice(&std::fs::read(path)?)?;
        ensure!(
            state.schema_version == SCORER_SCHEMA_VERSION,
            Input,
            "unsupported scorer schema version {}",
            state.schema_version
        );
        ensure!(
            state.moments.first.len() == state.weights.len() && state.moments.second.len() == state.weights.len(),
            Input,
            "scorer moment buffers do not match weight length"
        );
        Ok(state)
    }
}

/// `(1/L) sum_i ||h_i^masked - h_i^baseline||^2 + lambda ||w - 1||^2`.
pub fn training_loss<T: Real>(masked: &Array2<T>, baseline: &Array2<T>, weights: &[f64], lambda: f64) -> Result<f64> {
    ensure!(
        masked.dim() == baseline.dim(),
        Input,
        "hidden-state shapes differ: {:?} vs {:?}",
        masked.dim(),
        baseline.dim()
    );
    ensure!(masked.nrows() >= 1, Input, "loss needs at least one text position");
    Ok(mean_row_sq_dist(masked, baseline) + regularizer(weights, lambda))
}

pub(crate) fn mean_row_sq_dist<T: Real>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap();
            d * d
        })
        .sum();
    total / a.nrows() as f64
}

fn regularizer(weights: &[f64], lambda: f64) -> f64 {
    lambda * weights.iter().map(|w| (w - 1.0) * (w - 1.0)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub threshold: f64,
}

fn check_sample(seq: &TokenSequence) -> Result<()> {
    ensure!(seq.num_vision() >= 1, Input, "training sample has no vision tokens");
    ensure!(seq.num_text() >= 1, Input, "training sample has no text tokens");
    Ok(())
}

fn mask_vector<T: Real>(seq: &TokenSequence, penalties: &[f64]) -> ndarray::Array1<T> {
    let mut m = ndarray::Array1::<T>::zeros(seq.len());
    for (&pos, &p) in seq.vision_indices().iter().zip(penalties) {
        m[pos] = T::lit(p);
    }
    m
}

/// Training objective at fixed threshold `theta`, forward passes only.
///
/// This is the function whose derivative [`loss_gradient`] returns; it is
/// exposed so finite-difference oracles can perturb `weights` while holding
/// `theta` fixed.
pub fn objective_at<T: Precision>(
    model: &ToyVLM,
    seq: &TokenSequence,
    weights: &[f64],
    theta: f64,
    hyper: &ScorerHyperParams,
    baseline: &Array2<T>,
) -> Result<f64> {
    check_sample(seq)?;
    let (v, t) = modality_embeddings(model, seq)?;
    let detail = score_detail(weights, v.view(), t.view())?;
    let penalties = soft_penalties(&detail.scores, theta, hyper.mask_strength, hyper.mask_sharpness)?;
    let mask = mask_vector::<T>(seq, &penalties);
    let tape = run_tape(model, embed::<T>(model, seq)?, Some(&mask));
    let masked = tape.hidden.select(ndarray::Axis(0), &seq.text_indices());
    training_loss(&masked, baseline, weights, hyper.regularization)
}

/// Exact gradient of the training loss with respect to `weights` at keep
/// ratio `r`, computed by backpropagation through the frozen model.
pub fn loss_gradient<T: Precision>(
    model: &ToyVLM,
    seq: &TokenSequence,
    weights: &[f64],
    hyper: &ScorerHyperParams,
    r: f64,
) -> Result<LossGradient> {
    check_sample(seq)?;
    let baseline = text_hidden::<T>(model, seq, None)?;
    let (v, t) = modality_embeddings(model, seq)?;
    let detail = score_detail(weights, v.view(), t.view())?;
    let theta = compute_threshold(
        &ImportanceScores { values: detail.scores.clone(), provenance: Provenance::Learned },
        r,
    )?;
    gradient_at_threshold(model, seq, weights, theta, hyper, &baseline, &detail)
}

fn gradient_at_threshold<T: Precision>(
    model: &ToyVLM,
    seq: &TokenSequence,
    weights: &[f64],
    theta: f64,
    hyper: &ScorerHyperParams,
    baseline: &Array2<T>,
    detail: &ScoreDetail,
) -> Result<LossGradient> {
    let c = hyper.mask_strength;
    let tau = hyper.mask_sharpness;
    let penalties = soft_penalties(&detail.scores, theta, c, tau)?;
    let mask = mask_vector::<T>(seq, &penalties);
    let tape = run_tape(model, embed::<T>(model, seq)?, Some(&mask));
    let text_idx = seq.text_indices();
    let masked = tape.hidden.select(ndarray::Axis(0), &text_idx);
    let loss = training_loss(&masked, baseline, weights, hyper.regularization)?;

    let l = text_idx.len();
    let mut grad_hidden = Array2::<T>::zeros(tape.hidden.raw_dim());
    let coef = T::lit(2.0 / l as f64);
    for (row, &pos) in text_idx.iter().enumerate() {
        let diff = &masked.row(row) - &baseline.row(row);
        grad_hidden.row_mut(pos).assign(&(diff * coef));
    }
    let grad_mask = mask_gradient(model, &tape, &grad_hidden);

    let mut gradient: Vec<f64> = weights.iter().map(|w| 2.0 * hyper.regularization * (w - 1.0)).collect();
    if c > 0.0 {
        for (i, &pos) in seq.vision_indices().iter().enumerate() {
            let sig = sigmoid((theta - detail.scores[i]) / tau);
            let d_score = grad_mask[pos].to_f64().unwrap() * c * sig * (1.0 - sig) / tau;
            let vi = detail.vision_unit.row(i);
            let tj = detail.text_unit.row(detail.argmax[i]);
            for (g, (&a, &b)) in gradient.iter_mut().zip(vi.iter().zip(tj.iter())) {
                *g += d_score * a * b;
            }
        }
    }
    Ok(LossGradient { loss, gradient, threshold: theta })
}

/// SHA-256 over a canonical byte encoding of the corpus.
pub fn corpus_fingerprint(corpus: &[TokenSequence]) -> String {
    let mut h = Sha256::new();
    h.update((corpus.len() as u64).to_le_bytes());
    for seq in corpus {
        h.update((seq.len() as u64).to_le_bytes());
        for tok in &seq.tokens {
            h.update((tok.position_id as u64).to_le_bytes());
            h.update(tok.turn_id.to_le_bytes());
            h.update([tok.phase as u8]);
            match &tok.payload {
                Payload::Id(id) => {
                    h.update([0u8]);
                    h.update(id.to_le_bytes());
                }
                Payload::Embedding(e) => {
                    h.update([1u8]);
                    for v in e {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
    }
    hex::encode(h.finalize())
}

/// Runs `hyper.epochs` passes over `corpus` in order, one Adam step per
/// sample, and records the mean loss of each epoch.
pub fn train_scorer(model: &ToyVLM, corpus: &[TokenSequence], mut state: ScorerState) -> Result<ScorerState> {
    ensure!(!corpus.is_empty(), Input, "training corpus is empty");
    ensure!(
        state.weights.len() == model.config().hidden_dim,
        Input,
        "scorer has {} weights for hidden dim {}",
        state.weights.len(),
        model.config().hidden_dim
    );
    ensure!(!state.hyper.train_ratios.is_empty(), Config, "no training keep ratios configured");
    let mut rng = ChaCha8Rng::seed_from_u64(state.hyper.seed);
    let baselines = corpus
        .iter()
        .map(|s| text_hidden::<f32>(model, s, None))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..state.hyper.epochs {
        let mut total = 0.0;
        for (seq, baseline) in corpus.iter().zip(&baselines) {
            let ratio = state.hyper.train_ratios[rng.random_range(0..state.hyper.train_ratios.len())];
            let (v, t) = modality_embeddings(model, seq)?;
            let detail = score_detail(&state.weights, v.view(), t.view())?;
            let theta = compute_threshold(
                &ImportanceScores { values: detail.scores.clone(), provenance: Provenance::Learned },
                ratio,
            )?;
            let step = gradient_at_threshold::<f32>(model, seq, &state.weights, theta, &state.hyper, baseline, &detail)?;
            total += step.loss;
            state.apply_gradient(&step.gradient);
        }
        state.loss_log.push(total / corpus.len() as f64);
    }
    state.corpus_fingerprint = Some(corpus_fingerprint(corpus));
    state.model_checksum = Some(model.checksum());
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn tiny_model() -> ToyVLM {
        ToyVLM::init(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 12,
            max_positions: 16,
            init_seed: 5,
            init_std: 0.3,
            qk_tie: 0.0,
            qk_gain: 1.0,
            muted_dims: 0,
            muted_gain: 0.05,
        })
        .unwrap()
    }

    fn sample(seed: u64) -> TokenSequence {
        let vision: Vec<Vec<f32>> = (0..4)
            .map(|i| (0..8).map(|j| (((i * 8 + j) as u64 * 7 + seed) as f32 * 0.53).sin()).collect())
            .collect();
        TokenSequence::single_turn(&vision, &[(seed % 12) as u32, 3]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let h = array![[1.0f64, 2.0], [3.0, 4.0]];
        assert_eq!(training_loss(&h, &h, &[1.0, 1.0], 0.001).unwrap(), 0.0);
        assert!((training_loss(&h, &h, &[2.0, 1.0], 0.001).unwrap() - 0.001).abs() < 1e-15);
        let a = array![[3.0f64]];
        let b = array![[1.0f64]];
        assert_eq!(training_loss(&a, &b, &[1.0], 0.0).unwrap(), 4.0);
        assert!(training_loss(&a, &h, &[1.0], 0.0).is_err());
    }

    #[test]
    fn disabled_mask_leaves_only_regularizer_gradient() {
        let model = tiny_model();
        let hyper = ScorerHyperParams { mask_strength: 0.0, ..Default::default() };
        let w: Vec<f64> = (0..8).map(|i| 0.5 + 0.2 * i as f64).collect();
        let g = loss_gradient::<f64>(&model, &sample(1), &w, &hyper, 0.5).unwrap();
        for (gi, wi) in g.gradient.iter().zip(&w) {
            assert_eq!(*gi, 2.0 * 0.001 * (wi - 1.0));
        }
    }

    #[test]
    fn gradient_matches_fixed_threshold_central_difference() {
        let model = tiny_model();
        let hyper = ScorerHyperParams::default();
        let seq = sample(3);
        let w: Vec<f64> = (0..8).map(|i| 0.7 + 0.1 * i as f64).collect();
        let g = loss_gradient::<f64>(&model, &seq, &w, &hyper, 0.5).unwrap();
        let baseline = text_hidden::<f64>(&model, &seq, None).unwrap();
        let h = 1e-4;
        for k in 0..8 {
            let mut wp = w.clone();
            wp[k] += h;
            let mut wm = w.clone();
            wm[k] -= h;
            let fp = objective_at(&model, &seq, &wp, g.threshold, &hyper, &baseline).unwrap();
            let fm = objective_at(&model, &seq, &wm, g.threshold, &hyper, &baseline).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.gradient[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "k={k}: fd={fd} got={}", g.gradient[k]);
        }
    }

    #[test]
    fn adam_step_respects_clamp() {
        let mut s = ScorerState::new(3, ScorerHyperParams { learning_rate: 10.0, ..Default::default() });
        s.apply_gradient(&[1.0, -1.0, 0.0]);
        assert_eq!(s.weights[0], 0.0);
        assert_eq!(s.weights[1], 3.0);
        assert_eq!(s.weights[2], 1.0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let model = tiny_model();
        let s = ScorerState::new(8, ScorerHyperParams::default());
        assert!(train_scorer(&model, &[], s).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let model = tiny_model();
        let corpus: Vec<TokenSequence> = (0..4).map(sample).collect();
        let hyper = ScorerHyperParams { epochs: 2, ..Default::default() };
        let a = train_scorer(&model, &corpus, ScorerState::new(8, hyper.clone())).unwrap();
        let b = train_scorer(&model, &corpus, ScorerState::new(8, hyper)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_log.len(), 2);
        assert!(a.weights.iter().all(|w| (0.0..=3.0).contains(w)));
        assert_eq!(a.corpus_fingerprint.as_deref(), Some(corpus_fingerprint(&corpus).as_str()));
    }

    #[test]
    fn state_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.json");
        let mut s = ScorerState::new(4, ScorerHyperParams::default());
        s.weights = vec![0.1, 1.0 / 3.0, 2.9999999, 1.0];
        s.save(&path).unwrap();
        assert_eq!(ScorerState::load(&path).unwrap(), s);
    }
}
