//! The four eviction rules and a driver that applies one after each decode step.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::cache::{KVCache, SlotId, SlotMeta};
use crate::error::{ensure, Result};
use crate::model::{DecodeOutput, Modality, Phase, ToyVLM};
use crate::scorer::score_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    AsymThreshold,
    #[serde(rename = "h2o")]
    H2O,
    Streaming,
    TurnLevel,
}

impl EvictionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            EvictionPolicy::AsymThreshold => "asym_threshold",
            EvictionPolicy::H2O => "h2o",
            EvictionPolicy::Streaming => "streaming",
            EvictionPolicy::TurnLevel => "turn_level",
        }
    }
}

fn default_sinks() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvictionConfig {
    pub policy: EvictionPolicy,
    /// Generated-token budget. H2O and Streaming cap the whole cache at
    /// prefill length plus this budget.
    pub text_budget: usize,
    #[serde(default = "default_sinks")]
    pub sink_count: usize,
    /// Fraction of the decode length used to derive `text_budget` in sweeps.
    #[serde(default)]
    pub retention: Option<f64>,
}

impl EvictionConfig {
    pub fn new(policy: EvictionPolicy, text_budget: usize) -> Self {
        Self { policy, text_budget, sink_count: default_sinks(), retention: None }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.text_budget >= 1, Config, "text_budget must be at least 1");
        if let Some(r) = self.retention {
            ensure!(r > 0.0 && r <= 1.0, Config, "retention {r} outside (0, 1]");
        }
        Ok(())
    }

    /// Whole-cache capacity for the modality-blind baselines.
    pub fn capacity(&self, prefill_len: usize) -> usize {
        prefill_len + self.text_budget
    }
}

/// A slot removed by a policy, with the score that condemned it (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct Evicted {
    pub slot: SlotMeta,
    pub score: Option<f64>,
}

/// Structured eviction record for trace oracles and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub step: usize,
    pub policy: EvictionPolicy,
    pub slot: SlotId,
    pub modality: Modality,
    pub phase: Phase,
    pub turn_id: u32,
    pub position_id: usize,
    pub score: Option<f64>,
}

impl EvictionEvent {
    fn from_evicted(step: usize, policy: EvictionPolicy, e: Evicted) -> Self {
        Self {
            step,
            policy,
            slot: e.slot.id,
            modality: e.slot.modality,
            phase: e.slot.phase,
            turn_id: e.slot.turn_id,
            position_id: e.slot.position_id,
            score: e.score,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_event_log<W: Write>(events: &[EvictionEvent], mut w: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn remove(cache: &mut KVCache, victims: Vec<(usize, Option<f64>)>) -> Vec<Evicted> {
    let out: Vec<Evicted> = victims
        .into_iter()
        .map(|(i, score)| Evicted { slot: cache.slots()[i].clone(), score })
        .collect();
    let ids: Vec<SlotId> = out.iter().map(|e| e.slot.id).collect();
    cache.remove(&ids);
    out
}

fn lowest_first(idx: &mut [usize], key: &[f64], cache: &KVCache) {
    let slots = cache.slots();
    idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(slots[a].id.cmp(&slots[b].id)));
}

/// Evicts the excess of Generated slots over `text_budget`, lowest
/// final-layer attention first. Prefill slots are never candidates.
///
/// `attention` is the head-averaged final-layer row of the step, aligned
/// with the cache slots.
pub fn asym_evict(cache: &mut KVCache, text_budget: usize, attention: &[f64]) -> Result<Vec<Evicted>> {
    ensure!(
        attention.len() == cache.len(),
        Input,
        "attention row has {} entries for {} slots",
        attention.len(),
        cache.len()
    );
    let mut generated: Vec<usize> =
        (0..cache.len()).filter(|&i| cache.slots()[i].phase == Phase::Generated).collect();
    if generated.len() <= text_budget {
        return Ok(Vec::new());
    }
    let excess = generated.len() - text_budget;
    lowest_first(&mut generated, attention, cache);
    let victims = generated[..excess].iter().map(|&i| (i, Some(attention[i]))).collect();
    Ok(remove(cache, victims))
}

/// Adds `step_attention` to the accumulated counters, then evicts the
/// lowest-counter slots (any modality or phase) until `capacity` holds.
pub fn h2o_evict(cache: &mut KVCache, capacity: usize, step_attention: &[f64]) -> Result<Vec<Evicted>> {
    cache.accumulate(step_attention)?;
    if cache.len() <= capacity {
        return Ok(Vec::new());
    }
    let excess = cache.len() - capacity;
    let acc = cache.accumulated().to_vec();
    let mut all: Vec<usize> = (0..cache.len()).collect();
    lowest_first(&mut all, &acc, cache);
    let victims = all[..excess].iter().map(|&i| (i, Some(acc[i]))).collect();
    Ok(remove(cache, victims))
}

/// Keeps the first `sink_count` slots and the most recent
/// `capacity - sink_count` slots.
pub fn streaming_evict(cache: &mut KVCache, capacity: usize, sink_count: usize) -> Result<Vec<Evicted>> {
    ensure!(
        sink_count < capacity,
        Config,
        "sink count {sink_count} must be below the cache budget {capacity}"
    );
    if cache.len() <= capacity {
        return Ok(Vec::new());
    }
    let window_start = cache.len() - (capacity - sink_count);
    let victims = (sink_count..window_start).map(|i| (i, None)).collect();
    Ok(remove(cache, victims))
}

/// Outcome of a turn-level eviction call.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnEviction {
    pub evicted_turns: Vec<u32>,
    pub evicted: Vec<Evicted>,
    /// False when every past answer was evicted and text still exceeds the budget.
    pub within_budget: bool,
}

/// Mean over each past turn's answer tokens of the token's best weighted
/// cosine against `images`.
pub fn score_answer_turns(
    model: &ToyVLM,
    cache: &KVCache,
    current_turn: u32,
    images: ArrayView2<f32>,
    weights: &[f64],
) -> Result<BTreeMap<u32, f64>> {
    let mut by_turn: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for s in cache.slots() {
        if s.phase == Phase::Generated && s.turn_id < current_turn {
            if let Some(id) = s.token_id {
                by_turn.entry(s.turn_id).or_default().push(id);
            }
        }
    }
    let emb = &model.weights().token_embedding;
    let mut out = BTreeMap::new();
    for (turn, ids) in by_turn {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let answer = emb.select(ndarray::Axis(0), &idx);
        // The weighted cosine is symmetric, so answer tokens take the scored side.
        let s = score_tokens(weights, answer.view(), images)?;
        out.insert(turn, s.values.iter().sum::<f64>() / s.len() as f64);
    }
    Ok(out)
}

/// Evicts whole past answers, lowest score first (ties to the earlier turn),
/// until the cached text fits `text_budget`. Questions, images and the
/// current turn are never touched.
pub fn evict_turns_by_score(
    cache: &mut KVCache,
    text_budget: usize,
    current_turn: u32,
    scores: &BTreeMap<u32, f64>,
) -> TurnEviction {
    let text_count = |c: &KVCache| c.slots().iter().filter(|s| s.modality == Modality::Text).count();
    let mut ranked: Vec<(u32, f64)> = scores
        .iter()
        .filter(|(&t, _)| t < current_turn)
        .map(|(&t, &s)| (t, s))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut result = TurnEviction { evicted_turns: Vec::new(), evicted: Vec::new(), within_budget: true };
    let mut ranked = ranked.into_iter();
    while text_count(cache) > text_budget {
        let Some((turn, score)) = ranked.next() else {
            result.within_budget = false;
            break;
        };
        let victims: Vec<(usize, Option<f64>)> = (0..cache.len())
            .filter(|&i| {
                let s = &cache.slots()[i];
                s.phase == Phase::Generated && s.turn_id == turn
            })
            .map(|i| (i, Some(score)))
            .collect();
        if victims.is_empty() {
            continue;
        }
        result.evicted_turns.push(turn);
        result.evicted.extend(remove(cache, victims));
    }
    result
}

/// Scores past answers against the current images, then evicts by score.
pub fn turn_evict(
    model: &ToyVLM,
    cache: &mut KVCache,
    config: &EvictionConfig,
    current_turn: u32,
    images: ArrayView2<f32>,
    weights: &[f64],
) -> Result<TurnEviction> {
    let scores = score_answer_turns(model, cache, current_turn, images, weights)?;
    Ok(evict_turns_by_score(cache, config.text_budget, current_turn, &scores))
}

/// Applies one policy after every decode step and numbers the events.
#[derive(Debug, Clone)]
pub struct Evictor {
    config: EvictionConfig,
    capacity: usize,
    step: usize,
    turn: Option<(u32, BTreeMap<u32, f64>)>,
}

impl Evictor {
    pub fn new(config: EvictionConfig, prefill_len: usize) -> Result<Self> {
        config.validate()?;
        let capacity = config.capacity(prefill_len);
        if config.policy == EvictionPolicy::Streaming {
            ensure!(
                config.sink_count < capacity,
                Config,
                "sink count {} must be below the cache budget {capacity}",
                config.sink_count
            );
        }
        Ok(Self { config, capacity, step: 0, turn: None })
    }

    pub fn config(&self) -> &EvictionConfig {
        &self.config
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sets the in-progress turn and the scores of earlier answers.
    pub fn set_turn(&mut self, current_turn: u32, answer_scores: BTreeMap<u32, f64>) {
        self.turn = Some((current_turn, answer_scores));
    }

    /// Consults the policy after a decode step whose output is `out`.
    pub fn observe(&mut self, cache: &mut KVCache, out: &DecodeOutput) -> Result<Vec<EvictionEvent>> {
        self.step += 1;
        let policy = self.config.policy;
        let evicted = match policy {
            EvictionPolicy::H2O => h2o_evict(cache, self.capacity, &out.attention_mass)?,
            other => {
                cache.accumulate(&out.attention_mass)?;
                match other {
                    EvictionPolicy::AsymThreshold => {
                        asym_evict(cache, self.config.text_budget, &out.final_attention_mean)?
                    }
                    EvictionPolicy::Streaming => streaming_evict(cache, self.capacity, self.config.sink_count)?,
                    _ => {
                        let Some((turn, scores)) = &self.turn else {
                            return Err(crate::Error::State("turn-level eviction needs set_turn first".into()));
                        };
                        evict_turns_by_score(cache, self.config.text_budget, *turn, scores).evicted
                    }
                }
            }
        };
        Ok(evicted.into_iter().map(|e| EvictionEvent::from_evicted(self.step, policy, e)).collect())
    }
}
