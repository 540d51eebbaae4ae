//! Synthetic single-turn samples with controllable cross-modal alignment.

use ndarray::Array1;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{TokenSequence, ToyVLM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_vision: usize,
    pub num_text: usize,
    pub hidden_dim: usize,
    /// Fraction of vision tokens built around a text-token direction.
    pub relevance_fraction: f64,
    /// Weight of the text direction relative to unit-norm noise.
    pub alignment_strength: f64,
    /// Multiplier on the isotropic noise (0 gives pure text directions).
    pub noise_scale: f64,
    /// Overall payload norm scale.
    pub payload_scale: f64,
    /// Fraction of vision tokens that are near-copies of one distractor
    /// direction confined to `distractor_dims` fixed coordinates.
    #[serde(default)]
    pub distractor_fraction: f64,
    #[serde(default = "default_distractor_dims")]
    pub distractor_dims: usize,
    /// Noise multiplier for distractor tokens.
    #[serde(default = "default_distractor_noise")]
    pub distractor_noise: f64,
    /// Relevant tokens subtract this multiple of their own text direction
    /// restricted (and renormalized) to the distractor coordinates.
    #[serde(default)]
    pub counter_strength: f64,
    pub noise_seed: u64,
}

fn default_distractor_dims() -> usize {
    8
}

fn default_distractor_noise() -> f64 {
    0.1
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_vision: 32,
            num_text: 8,
            hidden_dim: 64,
            relevance_fraction: 0.25,
            alignment_strength: 0.4,
            noise_scale: 1.0,
            payload_scale: 1.0,
            distractor_fraction: 0.0,
            distractor_dims: default_distractor_dims(),
            distractor_noise: default_distractor_noise(),
            counter_strength: 0.0,
            noise_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_vision >= 1 && self.num_text >= 1, Config, "need at least one vision and one text token");
        ensure!(
            self.relevance_fraction > 0.0 && self.relevance_fraction <= 1.0,
            Config,
            "relevance_fraction {} outside (0, 1]",
            self.relevance_fraction
        );
        ensure!(
            self.alignment_strength >= 0.0 && self.noise_scale >= 0.0 && self.payload_scale > 0.0,
            Config,
            "alignment, noise and payload scales must be non-negative (payload positive)"
        );
        ensure!(
            (0.0..1.0).contains(&self.distractor_fraction)
                && self.relevance_fraction + self.distractor_fraction <= 1.0,
            Config,
            "distractor_fraction {} must be in [0, 1) and leave room for relevant tokens",
            self.distractor_fraction
        );
        ensure!(
            self.distractor_fraction == 0.0 || (1..=self.hidden_dim).contains(&self.distractor_dims),
            Config,
            "distractor_dims {} outside 1..={}",
            self.distractor_dims,
            self.hidden_dim
        );
        ensure!(
            self.counter_strength >= 0.0 && self.distractor_noise >= 0.0,
            Config,
            "counter_strength and distractor_noise must be non-negative"
        );
        ensure!(
            self.alignment_strength > 0.0 || self.noise_scale > 0.0,
            Config,
            "alignment_strength and noise_scale cannot both be zero"
        );
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| StandardNormal.sample(rng)).map(|v: f64| v * s).collect()
}

/// How a synthetic vision token was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Relevant,
    Distractor,
    Background,
}

/// Text ids are distinct draws from the vocabulary; their token-embedding
/// rows are the text directions. A `relevance_fraction` subset of vision
/// payloads is `alignment_strength * unit(text direction) + noise`, the rest
/// are noise only. Deterministic in `(spec, seed)`.
pub fn generate_sample(model: &ToyVLM, spec: &SyntheticTaskSpec, seed: u64) -> Result<TokenSequence> {
    Ok(generate_labeled(model, spec, seed)?.0)
}

/// [`generate_sample`] plus the role of each vision token.
pub fn generate_labeled(
    model: &ToyVLM,
    spec: &SyntheticTaskSpec,
    seed: u64,
) -> Result<(TokenSequence, Vec<TokenRole>)> {
    spec.validate()?;
    let cfg = model.config();
    ensure!(
        spec.hidden_dim == cfg.hidden_dim,
        Config,
        "spec hidden_dim {} != model hidden_dim {}",
        spec.hidden_dim,
        cfg.hidden_dim
    );
    ensure!(spec.num_text <= cfg.vocab_size, Config, "more text tokens than vocabulary entries");
    ensure!(
        spec.num_vision + spec.num_text <= cfg.max_positions,
        Config,
        "sample length exceeds max_positions"
    );
    let d = spec.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let text_ids: Vec<u32> = sample(&mut rng, cfg.vocab_size, spec.num_text).into_iter().map(|i| i as u32).collect();
    let emb = &model.weights().token_embedding;
    let directions: Vec<Array1<f64>> = text_ids
        .iter()
        .map(|&id| {
            let row = emb.row(id as usize).mapv(|v| v as f64);
            let norm = row.dot(&row).sqrt();
            row / norm
        })
        .collect();
    let relevant = ((spec.num_vision as f64 * spec.relevance_fraction).round() as usize).clamp(1, spec.num_vision);
    let distractors =
        ((spec.num_vision as f64 * spec.distractor_fraction).round() as usize).min(spec.num_vision - relevant);
    let picked = sample(&mut rng, spec.num_vision, relevant + distractors).into_vec();
    let (chosen, distracting) = picked.split_at(relevant);
    let dims = distractor_coords(model, spec);
    let distractor = if distractors > 0 {
        restricted(&directions[rng.random_range(0..directions.len())], &dims)
    } else {
        Array1::zeros(d)
    };
    let mut vision = Vec::with_capacity(spec.num_vision);
    let mut roles = Vec::with_capacity(spec.num_vision);
    for i in 0..spec.num_vision {
        let (v, role) = if chosen.contains(&i) {
            let j = rng.random_range(0..directions.len());
            let mut v = gaussian(&mut rng, d) * spec.noise_scale + &directions[j] * spec.alignment_strength;
            if spec.counter_strength > 0.0 {
                v -= &(restricted(&directions[j], &dims) * spec.counter_strength);
            }
            (v, TokenRole::Relevant)
        } else if distracting.contains(&i) {
            (gaussian(&mut rng, d) * spec.distractor_noise + &distractor, TokenRole::Distractor)
        } else {
            (gaussian(&mut rng, d) * spec.noise_scale, TokenRole::Background)
        };
        vision.push(v.iter().map(|&x| (x * spec.payload_scale) as f32).collect());
        roles.push(role);
    }
    Ok((TokenSequence::single_turn(&vision, &text_ids)?, roles))
}

/// Coordinates shared by every sample of a corpus: the model's muted
/// attention coordinates when it has any, otherwise `distractor_dims`
/// coordinates drawn from `noise_seed`.
fn distractor_coords(model: &ToyVLM, spec: &SyntheticTaskSpec) -> Vec<usize> {
    let dims = model.muted_dims();
    if !dims.is_empty() {
        return dims;
    }
    if spec.distractor_fraction == 0.0 && spec.counter_strength == 0.0 {
        return Vec::new();
    }
    let mut coord_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed ^ 0xD15C_0DE5);
    sample(&mut coord_rng, spec.hidden_dim, spec.distractor_dims.clamp(1, spec.hidden_dim)).into_vec()
}

/// Unit vector along `dir` restricted to `dims` (zero if that restriction is).
fn restricted(dir: &Array1<f64>, dims: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(dir.len());
    for &k in dims {
        out[k] = dir[k];
    }
    let norm = out.dot(&out).sqrt();
    if norm > 0.0 {
        out /= norm;
    }
    out
}

/// Spec ranges from which each corpus sample draws its own alignment and
/// relevance, producing heterogeneous gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub base: SyntheticTaskSpec,
    pub num_samples: usize,
    pub alignment_range: (f64, f64),
    pub relevance_range: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            base: SyntheticTaskSpec { distractor_fraction: 0.25, counter_strength: 0.5, ..SyntheticTaskSpec::default() },
            num_samples: 256,
            alignment_range: (0.2, 0.8),
            relevance_range: (0.25, 0.5),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let (alo, ahi) = self.alignment_range;
        let (rlo, rhi) = self.relevance_range;
        ensure!(0.0 <= alo && alo <= ahi, Config, "bad alignment_range ({alo}, {ahi})");
        ensure!(0.0 < rlo && rlo <= rhi && rhi <= 1.0, Config, "bad relevance_range ({rlo}, {rhi})");
        Ok(())
    }

    /// Sample `i`'s concrete spec.
    pub fn sample_spec(&self, i: usize) -> SyntheticTaskSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0xA5A5_0000).wrapping_add(i as u64));
        let u: f64 = rng.random();
        let w: f64 = rng.random();
        let (alo, ahi) = self.alignment_range;
        let (rlo, rhi) = self.relevance_range;
        SyntheticTaskSpec {
            alignment_strength: alo + u * (ahi - alo),
            relevance_fraction: rlo + w * (rhi - rlo),
            ..self.base
        }
    }

    pub fn sample_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }
}

/// Samples `offset..offset + count` of the corpus.
pub fn generate_corpus(model: &ToyVLM, spec: &CorpusSpec, offset: usize, count: usize) -> Result<Vec<TokenSequence>> {
    spec.validate()?;
    (offset..offset + count)
        .map(|i| generate_sample(model, &spec.sample_spec(i), spec.sample_seed(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scorer::{cosine_scores, gap_of, modality_embeddings};

    fn model() -> ToyVLM {
        ToyVLM::init(ModelConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let m = model();
        let s = SyntheticTaskSpec::default();
        assert_eq!(generate_sample(&m, &s, 3).unwrap(), generate_sample(&m, &s, 3).unwrap());
        assert_ne!(generate_sample(&m, &s, 3).unwrap(), generate_sample(&m, &s, 4).unwrap());
    }

    #[test]
    fn layout_matches_spec() {
        let m = model();
        let seq = generate_sample(&m, &SyntheticTaskSpec::default(), 0).unwrap();
        assert_eq!(seq.num_vision(), 32);
        assert_eq!(seq.num_text(), 8);
        let mut ids = seq.text_ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn pure_alignment_scores_one_with_zero_gap() {
        let m = model();
        let spec = SyntheticTaskSpec { relevance_fraction: 1.0, alignment_strength: 1.0, noise_scale: 0.0, ..Default::default() };
        let seq = generate_sample(&m, &spec, 1).unwrap();
        let (v, t) = modality_embeddings(&m, &seq).unwrap();
        let s = cosine_scores(v.view(), t.view()).unwrap();
        assert!(s.values.iter().all(|&x| (x - 1.0).abs() < 1e-5));
        assert!(gap_of(&s.values) < 1e-5);
    }

    #[test]
    fn invalid_spec_rejected() {
        let m = model();
        let spec = SyntheticTaskSpec { relevance_fraction: 0.0, ..Default::default() };
        assert!(generate_sample(&m, &spec, 0).is_err());
        let spec = SyntheticTaskSpec { hidden_dim: 8, ..Default::default() };
        assert!(generate_sample(&m, &spec, 0).is_err());
    }
}
