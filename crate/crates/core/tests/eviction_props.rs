//! Eviction invariants over random traces with synthetic attention rows.

use std::collections::{BTreeMap, HashMap};

use asymtok::eviction::{asym_evict, evict_turns_by_score, h2o_evict, streaming_evict, KVCache, NewSlot};
use asymtok::model::{Modality, Phase};
use proptest::prelude::*;

const LAYERS: usize = 3;

/// Keys encode (slot id, layer) so alignment can be checked after removals.
/// Slot ids are assigned sequentially, and positions here are also
/// sequential from 0, so the position doubles as the expected id.
fn push(cache: &mut KVCache, modality: Modality, phase: Phase, turn: u32, pos: usize) {
    let id = pos as f32;
    let rows: Vec<[f32; 2]> = (0..LAYERS).map(|l| [id, l as f32]).collect();
    let refs: Vec<&[f32]> = rows.iter().map(|r| &r[..]).collect();
    let got = cache
        .push(NewSlot { modality, phase, turn_id: turn, position_id: pos, token_id: Some(1) }, &refs, &refs)
        .unwrap();
    assert_eq!(got, pos as u64);
}

fn layers_aligned(cache: &KVCache) -> bool {
    (0..LAYERS).all(|l| {
        let keys = cache.keys(l);
        keys.nrows() == cache.len()
            && cache.slots().iter().zip(keys.rows()).all(|(s, k)| k[0] == s.id as f32 && k[1] == l as f32)
    })
}

fn prefilled(vision: usize, text: usize) -> KVCache {
    let mut c = KVCache::new(LAYERS, 2);
    for p in 0..vision + text {
        let m = if p < vision { Modality::Vision } else { Modality::Text };
        push(&mut c, m, Phase::Prefill, 0, p);
    }
    c
}

fn attention_row(len: usize, raw: &[u16]) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|i| f64::from(raw[i % raw.len()]) + 1.0).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn trace() -> impl Strategy<Value = (usize, usize, usize, Vec<Vec<u16>>)> {
    (1usize..10, 1usize..6, 1usize..8, prop::collection::vec(prop::collection::vec(0u16..1000, 1..20), 1..30))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn asym_protects_prefill_and_holds_budget((v, t, budget, rows) in trace()) {
        let mut c = prefilled(v, t);
        let prefill_ids: Vec<u64> = c.slot_ids();
        for (step, raw) in rows.iter().enumerate() {
            push(&mut c, Modality::Text, Phase::Generated, 0, v + t + step);
            let row = attention_row(c.len(), raw);
            let ev = asym_evict(&mut c, budget, &row).unwrap();
            prop_assert!(ev.iter().all(|e| e.slot.phase == Phase::Generated));
            let generated = c.slots().iter().filter(|s| s.phase == Phase::Generated).count();
            prop_assert!(generated <= budget);
            prop_assert!(layers_aligned(&c));
        }
        let prefix: Vec<u64> = c.slot_ids().into_iter().take(prefill_ids.len()).collect();
        prop_assert_eq!(prefix, prefill_ids);
    }

    #[test]
    fn h2o_counters_are_running_sums((v, t, budget, rows) in trace()) {
        let mut c = prefilled(v, t);
        let capacity = v + t + budget;
        let mut sums: HashMap<u64, f64> = HashMap::new();
        let mut last: HashMap<u64, f64> = HashMap::new();
        for (step, raw) in rows.iter().enumerate() {
            push(&mut c, Modality::Text, Phase::Generated, 0, v + t + step);
            let row = attention_row(c.len(), raw);
            for (s, a) in c.slots().iter().zip(&row) {
                *sums.entry(s.id).or_insert(0.0) += a;
            }
            h2o_evict(&mut c, capacity, &row).unwrap();
            prop_assert!(c.len() <= capacity);
            prop_assert!(layers_aligned(&c));
            for (s, &acc) in c.slots().iter().zip(c.accumulated()) {
                prop_assert_eq!(acc, sums[&s.id]);
                prop_assert!(acc >= *last.get(&s.id).unwrap_or(&0.0));
                last.insert(s.id, acc);
            }
        }
    }

    #[test]
    fn streaming_keeps_sinks_and_recent((v, t, budget, rows) in trace(), sinks in 0usize..4) {
        let mut c = prefilled(v, t);
        let capacity = v + t + budget;
        prop_assume!(sinks < capacity);
        for step in 0..rows.len() {
            push(&mut c, Modality::Text, Phase::Generated, 0, v + t + step);
            let newest = *c.slot_ids().last().unwrap();
            streaming_evict(&mut c, capacity, sinks).unwrap();
            prop_assert!(c.len() <= capacity);
            let pushed = (v + t + step + 1) as u64;
            let sink_ids: Vec<u64> = (0..(sinks as u64).min(pushed)).collect();
            prop_assert_eq!(&c.slot_ids()[..sink_ids.len()], &sink_ids[..]);
            prop_assert_eq!(*c.slot_ids().last().unwrap(), newest);
            prop_assert!(layers_aligned(&c));
        }
    }

    #[test]
    fn turn_eviction_never_touches_prompts(
        turns in 2u32..6,
        answer_len in 1usize..5,
        budget in 1usize..30,
        scores in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let mut c = KVCache::new(LAYERS, 2);
        let mut pos = 0;
        for turn in 0..turns {
            for m in [Modality::Vision, Modality::Vision, Modality::Text] {
                push(&mut c, m, Phase::Prefill, turn, pos);
                pos += 1;
            }
            let n = if turn + 1 == turns { 1 } else { answer_len };
            for _ in 0..n {
                push(&mut c, Modality::Text, Phase::Generated, turn, pos);
                pos += 1;
            }
        }
        let current = turns - 1;
        let prompt_ids: Vec<u64> = c.slots().iter().filter(|s| s.phase == Phase::Prefill).map(|s| s.id).collect();
        let map: BTreeMap<u32, f64> = (0..current).map(|t| (t, scores[t as usize])).collect();
        let out = evict_turns_by_score(&mut c, budget, current, &map);
        prop_assert!(out.evicted.iter().all(|e| e.slot.phase == Phase::Generated && e.slot.turn_id < current));
        let remaining: Vec<u64> = c.slots().iter().filter(|s| s.phase == Phase::Prefill).map(|s| s.id).collect();
        prop_assert_eq!(remaining, prompt_ids);
        prop_assert!(c.slots().iter().any(|s| s.turn_id == current && s.phase == Phase::Generated));
        let text = c.slots().iter().filter(|s| s.modality == Modality::Text).count();
        prop_assert_eq!(out.within_budget, text <= budget);
        // whole answers only
        for t in &out.evicted_turns {
            prop_assert!(!c.slots().iter().any(|s| s.turn_id == *t && s.phase == Phase::Generated));
        }
        prop_assert!(layers_aligned(&c));
    }
}
