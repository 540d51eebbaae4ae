//! Key/value cache with modality and phase metadata, and the policies that
//! evict from it during decoding.

mod cache;
mod policy;

pub use cache::{Census, KVCache, NewSlot, SlotId, SlotMeta};
pub use policy::{
    asym_evict, evict_turns_by_score, h2o_evict, score_answer_turns, streaming_evict, turn_evict, write_event_log,
    EvictionConfig, EvictionEvent, EvictionPolicy, Evicted, Evictor, TurnEviction,
};

/// Slot counts per (modality, phase, turn).
pub fn cache_census(cache: &KVCache) -> Census {
    cache.census()
}
