//! Layer-aligned key/value store with per-slot metadata.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{Modality, Phase};

/// Stable identifier of a cache slot; assigned in insertion order from 0.
pub type SlotId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMeta {
    pub id: SlotId,
    pub modality: Modality,
    pub phase: Phase,
    pub turn_id: u32,
    pub position_id: usize,
    pub token_id: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer keys and values for the retained slots.
///
/// Every layer holds exactly the same slot set, in the same order; removal is
/// always applied to all layers at once.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    hidden_dim: usize,
    layers: Vec<LayerKv>,
    slots: Vec<SlotMeta>,
    accumulated: Vec<f64>,
    next_id: SlotId,
}

/// Metadata for a slot about to be inserted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewSlot {
    pub modality: Modality,
    pub phase: Phase,
    pub turn_id: u32,
    pub position_id: usize,
    pub token_id: Option<u32>,
}

impl KVCache {
    pub fn new(num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            layers: vec![LayerKv::default(); num_layers],
            slots: Vec::new(),
            accumulated: Vec::new(),
            next_id: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[SlotMeta] {
        &self.slots
    }

    pub fn slot_ids(&self) -> Vec<SlotId> {
        self.slots.iter().map(|s| s.id).collect()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.slots.last().map(|s| s.position_id)
    }

    /// Number of slots stored in `layer`; equal across layers by construction.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].keys.len() / self.hidden_dim.max(1)
    }

    /// Appends a slot; `keys[l]` and `values[l]` are the rows for layer `l`.
    pub fn push(&mut self, slot: NewSlot, keys: &[&[f32]], values: &[&[f32]]) -> Result<SlotId> {
        ensure!(
            keys.len() == self.layers.len() && values.len() == self.layers.len(),
            Input,
            "expected key/value rows for {} layers",
            self.layers.len()
        );
        if let Some(last) = self.last_position() {
            ensure!(
                slot.position_id > last,
                Input,
                "position {} does not follow cached position {last}",
                slot.position_id
            );
        }
        for (layer, (k, v)) in self.layers.iter_mut().zip(keys.iter().zip(values)) {
            ensure!(
                k.len() == self.hidden_dim && v.len() == self.hidden_dim,
                Input,
                "key/value rows must have length {}",
                self.hidden_dim
            );
            layer.keys.extend_from_slice(k);
            layer.values.extend_from_slice(v);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.slots.push(SlotMeta {
            id,
            modality: slot.modality,
            phase: slot.phase,
            turn_id: slot.turn_id,
            position_id: slot.position_id,
            token_id: slot.token_id,
        });
        self.accumulated.push(0.0);
        Ok(id)
    }

    pub fn keys(&self, layer: usize) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.hidden_dim), &self.layers[layer].keys)
            .expect("cache rows are contiguous")
    }

    pub fn values(&self, layer: usize) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.hidden_dim), &self.layers[layer].values)
            .expect("cache rows are contiguous")
    }

    /// Accumulated attention received per slot, aligned with [`Self::slots`].
    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// Adds one step's attention mass (one entry per current slot).
    pub fn accumulate(&mut self, attention: &[f64]) -> Result<()> {
        ensure!(
            attention.len() == self.len(),
            Input,
            "attention row has {} entries for {} slots",
            attention.len(),
            self.len()
        );
        for (acc, &a) in self.accumulated.iter_mut().zip(attention) {
            *acc += a;
        }
        Ok(())
    }

    /// Removes the given slots from every layer. Unknown ids are ignored.
    pub fn remove(&mut self, ids: &[SlotId]) {
        if ids.is_empty() {
            return;
        }
        let keep: Vec<bool> = self.slots.iter().map(|s| !ids.contains(&s.id)).collect();
        let d = self.hidden_dim;
        for layer in &mut self.layers {
            layer.keys = retain_rows(&layer.keys, d, &keep);
            layer.values = retain_rows(&layer.values, d, &keep);
        }
        let mut it = keep.iter();
        self.slots.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.accumulated.retain(|_| *it.next().unwrap());
    }

    /// Slot counts keyed by (modality, phase, turn).
    pub fn census(&self) -> Census {
        let mut counts = BTreeMap::new();
        for s in &self.slots {
            *counts.entry((s.modality, s.phase, s.turn_id)).or_insert(0) += 1;
        }
        Census { counts }
    }
}

fn retain_rows(data: &[f32], d: usize, keep: &[bool]) -> Vec<f32> {
    data.chunks_exact(d)
        .zip(keep)
        .filter(|(_, &k)| k)
        .flat_map(|(row, _)| row.iter().copied())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Census {
    pub counts: BTreeMap<(Modality, Phase, u32), usize>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, modality: Modality, phase: Phase) -> usize {
        self.counts
            .iter()
            .filter(|((m, p, _), _)| *m == modality && *p == phase)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn phase_count(&self, phase: Phase) -> usize {
        self.counts.iter().filter(|((_, p, _), _)| *p == phase).map(|(_, c)| c).sum()
    }
}
