//! Experiment configuration and the pruning, eviction and gap-statistics runs.

use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::{loo_oracle, spearman};
use super::report::ReportRecord;
use super::synth::{generate_sample, CorpusSpec};
use crate::budget::{prune_vision, BudgetPolicy};
use crate::error::{ensure, Result};
use crate::eviction::{score_answer_turns, EvictionConfig, EvictionEvent, EvictionPolicy, Evictor, KVCache};
use crate::metrics::CostModel;
use crate::model::{
    forward_decode_step, forward_prefill, text_hidden, ModelConfig, Modality, Phase, Token,
    TokenSequence, ToyVLM,
};
use crate::numeric::mean_sq_diff;
use crate::scorer::{
    cosine_scores, default_grid, gap_of, keep_count, modality_embeddings, spiral_scores, ImportanceScores,
    ScorerHyperParams, ScorerState,
};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Model used by experiments unless a config overrides it: tied query/key
/// projections with gain 5, and eight input coordinates that attention
/// barely sees.
pub fn experiment_model() -> ModelConfig {
    ModelConfig { init_std: 0.05, qk_tie: 1.0, qk_gain: 5.0, muted_dims: 8, ..ModelConfig::default() }
}

/// Where importance scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSource {
    /// A scorer state file written by training.
    Trained { path: PathBuf },
    Cosine,
    Spiral,
}

impl ScorerSource {
    pub fn load(&self) -> Result<Scorer> {
        match self {
            ScorerSource::Trained { path } => {
                ensure!(path.is_file(), Config, "scorer file {} does not exist", path.display());
                Ok(Scorer::Learned(ScorerState::load(path)?))
            }
            ScorerSource::Cosine => Ok(Scorer::Cosine),
            ScorerSource::Spiral => Ok(Scorer::Spiral),
        }
    }
}

/// A resolved scoring method.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Learned(ScorerState),
    Cosine,
    Spiral,
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Learned(_) => "learned",
            Scorer::Cosine => "cosine",
            Scorer::Spiral => "spiral",
        }
    }

    pub fn score(&self, model: &ToyVLM, seq: &TokenSequence) -> Result<ImportanceScores> {
        match self {
            Scorer::Learned(state) => state.scores(model, seq),
            Scorer::Cosine => {
                let (v, t) = modality_embeddings(model, seq)?;
                cosine_scores(v.view(), t.view())
            }
            Scorer::Spiral => {
                let n = seq.num_vision();
                let (h, w) = default_grid(n);
                spiral_scores(h, w, n)
            }
        }
    }

    /// Per-dimension weights for answer-turn scoring (ones unless learned).
    pub fn weights(&self, hidden_dim: usize) -> Vec<f64> {
        match self {
            Scorer::Learned(state) => state.weights.clone(),
            _ => vec![1.0; hidden_dim],
        }
    }
}

/// Scripted multi-turn decoding used by the eviction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvictionExperiment {
    pub policies: Vec<EvictionPolicy>,
    /// Generated-token budget shared by every policy.
    pub text_budget: usize,
    /// When set, replaces `text_budget` by this fraction of all generated tokens.
    pub retention: Option<f64>,
    pub sink_count: usize,
    pub turns: usize,
    pub answer_len: usize,
    pub conversations: usize,
}

impl Default for EvictionExperiment {
    fn default() -> Self {
        Self {
            policies: vec![
                EvictionPolicy::AsymThreshold,
                EvictionPolicy::H2O,
                EvictionPolicy::Streaming,
                EvictionPolicy::TurnLevel,
            ],
            text_budget: 12,
            retention: None,
            sink_count: 4,
            turns: 3,
            answer_len: 10,
            conversations: 16,
        }
    }
}

impl EvictionExperiment {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.policies.is_empty(), Config, "no eviction policies listed");
        ensure!(self.turns >= 1 && self.answer_len >= 1, Config, "need at least one turn and one answer token");
        ensure!(self.conversations >= 1, Config, "need at least one conversation");
        if let Some(r) = self.retention {
            ensure!(r > 0.0 && r <= 1.0, Config, "retention {r} outside (0, 1]");
        }
        ensure!(self.text_budget >= 1, Config, "text_budget must be at least 1");
        Ok(())
    }

    /// Budget on generated tokens after applying `retention`.
    pub fn generated_budget(&self) -> usize {
        match self.retention {
            Some(r) => ((r * (self.turns * self.answer_len) as f64).floor() as usize).max(1),
            None => self.text_budget,
        }
    }
}

/// Gap histogram layout: `bins` equal bins over `[lo, hi)`; values outside
/// are counted in the nearest end bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 20, lo: 0.0, hi: 1.0 }
    }
}

/// Everything needed to replay an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Pruning runs evaluate every listed scorer; the first one drives
    /// calibration, gap statistics and answer-turn scoring.
    pub scorers: Vec<ScorerSource>,
    /// Extra gap-dependent policy evaluated next to the uniform sweep.
    pub budget: Option<BudgetPolicy>,
    pub keep_ratios: Vec<f64>,
    /// Training corpus; held-out samples follow its last index.
    pub corpus: CorpusSpec,
    pub eval_samples: usize,
    /// Rank correlation against the oracle is computed up to this many vision tokens.
    pub oracle_max_vision: usize,
    pub scorer_hyper: ScorerHyperParams,
    pub calibration_target: f64,
    pub linear_range: (f64, f64),
    pub eviction: EvictionExperiment,
    pub histogram: HistogramSpec,
    pub cost_model: CostModel,
    pub output: Option<PathBuf>,
    /// Offsets the corpus seed and the training-ratio seed.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            model: experiment_model(),
            scorers: vec![ScorerSource::Cosine, ScorerSource::Spiral],
            budget: None,
            keep_ratios: vec![1.0, 0.75, 0.65, 0.5],
            corpus: CorpusSpec::default(),
            eval_samples: 64,
            oracle_max_vision: 64,
            scorer_hyper: ScorerHyperParams::default(),
            calibration_target: 0.65,
            linear_range: (0.4, 0.9),
            eviction: EvictionExperiment::default(),
            histogram: HistogramSpec::default(),
            cost_model: CostModel::reference(),
            output: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == EXPERIMENT_SCHEMA_VERSION,
            Config,
            "unsupported experiment schema_version {}",
            self.schema_version
        );
        self.model.validate()?;
        self.corpus.validate()?;
        self.cost_model.validate()?;
        ensure!(!self.scorers.is_empty(), Config, "no scorers listed");
        for s in &self.scorers {
            if let ScorerSource::Trained { path } = s {
                ensure!(path.is_file(), Config, "scorer file {} does not exist", path.display());
            }
        }
        ensure!(!self.keep_ratios.is_empty(), Config, "keep_ratios is empty");
        for &r in &self.keep_ratios {
            ensure!(r > 0.0 && r <= 1.0, Config, "keep ratio {r} outside (0, 1]");
        }
        if let Some(b) = &self.budget {
            b.validate()?;
        }
        ensure!(
            self.calibration_target > 0.0 && self.calibration_target <= 1.0,
            Config,
            "calibration_target {} outside (0, 1]",
            self.calibration_target
        );
        ensure!(self.eval_samples >= 1, Config, "eval_samples must be at least 1");
        ensure!(self.corpus.num_samples >= 1, Config, "corpus.num_samples must be at least 1");
        ensure!(
            self.histogram.bins >= 1 && self.histogram.hi > self.histogram.lo,
            Config,
            "histogram needs at least one bin over a non-empty range"
        );
        self.eviction.validate()
    }

    /// Corpus spec with the global seed folded in.
    pub fn seeded_corpus(&self) -> CorpusSpec {
        CorpusSpec { seed: self.corpus.seed.wrapping_add(self.seed), ..self.corpus }
    }

    pub fn seeded_hyper(&self) -> ScorerHyperParams {
        ScorerHyperParams { seed: self.scorer_hyper.seed.wrapping_add(self.seed), ..self.scorer_hyper.clone() }
    }

    pub fn build_model(&self) -> Result<ToyVLM> {
        ToyVLM::init(self.model.clone())
    }

    pub fn load_scorers(&self) -> Result<Vec<Scorer>> {
        self.scorers.iter().map(ScorerSource::load).collect()
    }

    /// Samples `0..corpus.num_samples`.
    pub fn training_corpus(&self, model: &ToyVLM) -> Result<Vec<TokenSequence>> {
        super::synth::generate_corpus(model, &self.seeded_corpus(), 0, self.corpus.num_samples)
    }

    /// Held-out sample `i` (indices continue after the training corpus).
    pub fn eval_sample(&self, model: &ToyVLM, i: usize) -> Result<TokenSequence> {
        let spec = self.seeded_corpus();
        let idx = self.corpus.num_samples + i;
        generate_sample(model, &spec.sample_spec(idx), spec.sample_seed(idx))
    }
}

/// Runs every (scorer, keep ratio) pair, plus the configured budget policy,
/// on every held-out sample. Records are ordered by sample, then scorer,
/// then ratio.
pub fn run_pruning_eval(config: &ExperimentConfig) -> Result<Vec<ReportRecord>> {
    config.validate()?;
    let model = config.build_model()?;
    let scorers = config.load_scorers()?;
    let per_sample: Vec<Vec<ReportRecord>> = (0..config.eval_samples)
        .into_par_iter()
        .map(|i| prune_sample(config, &model, &scorers, i))
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

fn prune_sample(config: &ExperimentConfig, model: &ToyVLM, scorers: &[Scorer], i: usize) -> Result<Vec<ReportRecord>> {
    let seq = config.eval_sample(model, i)?;
    let baseline = text_hidden::<f32>(model, &seq, None)?;
    let oracle = if seq.num_vision() <= config.oracle_max_vision { Some(loo_oracle(model, &seq)?) } else { None };
    let (n, l) = (seq.num_vision(), seq.num_text());
    let mut out = Vec::new();
    for scorer in scorers {
        let scores = scorer.score(model, &seq)?;
        let gap = gap_of(&scores.values);
        let rank = oracle.as_ref().and_then(|o| spearman(&scores.values, o));
        let mut ratios: Vec<(&str, f64)> = config.keep_ratios.iter().map(|&r| ("uniform", r)).collect();
        if let Some(b) = &config.budget {
            ratios.push((b.name(), b.keep_ratio(gap)));
        }
        for (policy, r) in ratios {
            let pruned = prune_vision(&seq, &scores, r)?;
            let mse = mean_sq_diff(&text_hidden::<f32>(model, &pruned, None)?, &baseline);
            let kept = keep_count(n, r);
            let mut rec = ReportRecord::new("prune", i, scorer.name(), policy);
            rec.gap = Some(gap);
            rec.keep_ratio = Some(r);
            rec.num_vision = n;
            rec.num_text = l;
            rec.kept_vision = kept;
            rec.mse = mse;
            rec.spearman = rank;
            rec.set_costs(&config.cost_model, (n + l) as u64, (kept + l) as u64)?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Cache occupancy after one observed decode step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyRow {
    pub conversation: usize,
    pub policy: EvictionPolicy,
    pub step: usize,
    pub total: usize,
    pub vision: usize,
    pub prompt_text: usize,
    pub generated: usize,
}

/// An eviction event tagged with its conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedEvent {
    pub conversation: usize,
    #[serde(flatten)]
    pub event: EvictionEvent,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvictionRun {
    pub records: Vec<ReportRecord>,
    pub events: Vec<TaggedEvent>,
    pub occupancy: Vec<OccupancyRow>,
}

/// Prompt of each turn: one held-out sample's image and question.
fn conversation_prompts(config: &ExperimentConfig, model: &ToyVLM, c: usize) -> Result<Vec<TokenSequence>> {
    (0..config.eviction.turns).map(|t| config.eval_sample(model, c * config.eviction.turns + t)).collect()
}

struct Decoded {
    tokens: Vec<u32>,
    hidden: Vec<ndarray::Array1<f32>>,
    peak: usize,
    final_len: usize,
}

/// Greedy decoding over a scripted conversation. Each turn's prompt is
/// appended, then `answer_len` tokens are generated; the evictor (if any)
/// runs after every generated token.
fn decode_conversation(
    model: &ToyVLM,
    prompts: &[TokenSequence],
    answer_len: usize,
    mut evictor: Option<(&mut Evictor, &[f64])>,
    mut on_step: impl FnMut(&KVCache, Vec<EvictionEvent>),
) -> Result<Decoded> {
    let mut cache: Option<KVCache> = None;
    let mut pos = 0usize;
    let mut result = Decoded { tokens: Vec::new(), hidden: Vec::new(), peak: 0, final_len: 0 };
    for (turn, prompt) in prompts.iter().enumerate() {
        let turn = turn as u32;
        let tokens: Vec<Token> = prompt
            .tokens
            .iter()
            .enumerate()
            .map(|(j, t)| Token { position_id: pos + j, turn_id: turn, ..t.clone() })
            .collect();
        pos += tokens.len();
        let (last, head) = tokens.split_last().expect("prompts are non-empty");
        let mut c = match cache.take() {
            None => {
                ensure!(!head.is_empty(), Input, "the first prompt needs at least two tokens");
                forward_prefill(model, &TokenSequence::new(head.to_vec())?, None)?.1
            }
            Some(mut c) => {
                for t in head {
                    forward_decode_step(model, t, &mut c)?;
                }
                c
            }
        };
        let mut out = forward_decode_step(model, last, &mut c)?;
        result.peak = result.peak.max(c.len());
        if let Some((ev, weights)) = evictor.as_mut() {
            if ev.config().policy == EvictionPolicy::TurnLevel {
                let images = prompt.vision_embeddings();
                let scores = score_answer_turns(model, &c, turn, images.view(), weights)?;
                ev.set_turn(turn, scores);
            }
        }
        for _ in 0..answer_len {
            let id = out.argmax();
            result.tokens.push(id);
            out = forward_decode_step(model, &Token::generated(id, pos).with_turn(turn), &mut c)?;
            pos += 1;
            result.hidden.push(out.hidden.clone());
            result.peak = result.peak.max(c.len());
            let events = match evictor.as_mut() {
                Some((ev, _)) => ev.observe(&mut c, &out)?,
                None => Vec::new(),
            };
            on_step(&c, events);
        }
        cache = Some(c);
    }
    result.final_len = cache.map_or(0, |c| c.len());
    Ok(result)
}

/// Decodes each scripted conversation without eviction and under every
/// listed policy, and compares the outputs.
pub fn run_eviction_eval(config: &ExperimentConfig) -> Result<EvictionRun> {
    config.validate()?;
    let model = config.build_model()?;
    let scorer = config.scorers[0].load()?;
    let weights = scorer.weights(model.config().hidden_dim);
    let total_len = config.eviction.turns * (config.corpus.base.num_vision + config.corpus.base.num_text + config.eviction.answer_len);
    ensure!(
        total_len <= model.config().max_positions,
        Config,
        "conversation length {total_len} exceeds max_positions"
    );
    let runs: Vec<EvictionRun> = (0..config.eviction.conversations)
        .into_par_iter()
        .map(|c| evict_conversation(config, &model, &weights, c))
        .collect::<Result<_>>()?;
    let mut out = EvictionRun::default();
    for r in runs {
        out.records.extend(r.records);
        out.events.extend(r.events);
        out.occupancy.extend(r.occupancy);
    }
    Ok(out)
}

fn evict_conversation(config: &ExperimentConfig, model: &ToyVLM, weights: &[f64], c: usize) -> Result<EvictionRun> {
    let ex = &config.eviction;
    let prompts = conversation_prompts(config, model, c)?;
    let prompt_len: usize = prompts.iter().map(TokenSequence::len).sum();
    let prompt_text: usize = prompts.iter().map(TokenSequence::num_text).sum();
    let reference = decode_conversation(model, &prompts, ex.answer_len, None, |_, _| {})?;
    let reference_hidden = stack(&reference.hidden, model.config().hidden_dim);
    let budget = ex.generated_budget();
    let mut run = EvictionRun::default();
    for &policy in &ex.policies {
        // Turn-level eviction budgets all cached text, so the questions are added on top.
        let text_budget = if policy == EvictionPolicy::TurnLevel { budget + prompt_text } else { budget };
        let ec = EvictionConfig { policy, text_budget, sink_count: ex.sink_count, retention: ex.retention };
        let mut evictor = Evictor::new(ec, prompt_len)?;
        let mut events = Vec::new();
        let mut occupancy = Vec::new();
        let mut step = 0usize;
        let decoded = decode_conversation(model, &prompts, ex.answer_len, Some((&mut evictor, weights)), |cache, ev| {
            step += 1;
            let census = cache.census();
            occupancy.push(OccupancyRow {
                conversation: c,
                policy,
                step,
                total: cache.len(),
                vision: census.count(Modality::Vision, Phase::Prefill) + census.count(Modality::Vision, Phase::Generated),
                prompt_text: census.count(Modality::Text, Phase::Prefill),
                generated: census.phase_count(Phase::Generated),
            });
            events.extend(ev.into_iter().map(|event| TaggedEvent { conversation: c, event }));
        })?;
        let hidden = stack(&decoded.hidden, model.config().hidden_dim);
        let mut rec = ReportRecord::new("evict", c, policy.name(), policy.name());
        rec.num_vision = prompts.iter().map(TokenSequence::num_vision).sum();
        rec.num_text = prompt_text;
        rec.kept_vision = occupancy.last().map_or(rec.num_vision, |o| o.vision);
        rec.mse = mean_sq_diff(&hidden, &reference_hidden);
        rec.edit_distance = Some(strsim::generic_levenshtein(&decoded.tokens, &reference.tokens));
        rec.evictions = Some(events.len());
        rec.peak_cache = Some(decoded.peak);
        rec.text_budget = Some(text_budget);
        rec.set_costs(&config.cost_model, reference.final_len as u64, decoded.final_len as u64)?;
        run.records.push(rec);
        run.events.extend(events);
        run.occupancy.extend(occupancy);
    }
    Ok(run)
}

fn stack(rows: &[ndarray::Array1<f32>], d: usize) -> Array2<f32> {
    let mut out = Array2::zeros((0, d));
    for r in rows {
        out.push(Axis(0), r.view()).expect("rows share the hidden size");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Vec<HistogramBin>,
}

impl GapStats {
    pub fn from_gaps(gaps: &[f64], spec: &HistogramSpec) -> Result<Self> {
        ensure!(!gaps.is_empty(), Input, "gap statistics need at least one sample");
        ensure!(spec.bins >= 1 && spec.hi > spec.lo, Config, "bad histogram layout");
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let std = (gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n).sqrt();
        let width = (spec.hi - spec.lo) / spec.bins as f64;
        let mut histogram: Vec<HistogramBin> = (0..spec.bins)
            .map(|b| HistogramBin { lo: spec.lo + b as f64 * width, hi: spec.lo + (b + 1) as f64 * width, count: 0 })
            .collect();
        for &g in gaps {
            let b = ((g - spec.lo) / width).floor();
            let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(spec.bins - 1) };
            histogram[b].count += 1;
        }
        Ok(Self { count: gaps.len(), mean, std, histogram })
    }
}

/// Importance-gap summary of a corpus under one scorer.
pub fn gap_stats(model: &ToyVLM, corpus: &[TokenSequence], scorer: &Scorer, spec: &HistogramSpec) -> Result<GapStats> {
    ensure!(!corpus.is_empty(), Input, "corpus is empty");
    let gaps: Vec<f64> = corpus
        .par_iter()
        .map(|s| Ok(gap_of(&scorer.score(model, s)?.values)))
        .collect::<Result<_>>()?;
    GapStats::from_gaps(&gaps, spec)
}
