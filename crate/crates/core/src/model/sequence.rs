//! Modality-tagged token streams.
//!
//! A sequence lays out each turn as `[vision tokens; text tokens]`. Position
//! ids are absolute and survive pruning, so a pruned sequence is simply a
//! subsequence of the original.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Projected image-patch embedding, already in the model's hidden size.
    Embedding(Vec<f32>),
    /// Vocabulary id.
    Id(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub payload: Payload,
    pub position_id: usize,
    pub phase: Phase,
    pub turn_id: u32,
}

impl Token {
    pub fn vision(embedding: Vec<f32>, position_id: usize) -> Self {
        Self { payload: Payload::Embedding(embedding), position_id, phase: Phase::Prefill, turn_id: 0 }
    }

    pub fn text(id: u32, position_id: usize) -> Self {
        Self { payload: Payload::Id(id), position_id, phase: Phase::Prefill, turn_id: 0 }
    }

    pub fn generated(id: u32, position_id: usize) -> Self {
        Self { payload: Payload::Id(id), position_id, phase: Phase::Generated, turn_id: 0 }
    }

    pub fn with_turn(mut self, turn_id: u32) -> Self {
        self.turn_id = turn_id;
        self
    }

    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::Embedding(_) => Modality::Vision,
            Payload::Id(_) => Modality::Text,
        }
    }

    pub fn token_id(&self) -> Option<u32> {
        match self.payload {
            Payload::Id(id) => Some(id),
            Payload::Embedding(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        let seq = Self { tokens };
        seq.validate()?;
        Ok(seq)
    }

    /// Builds a single-turn `[V; T]` sequence with positions `0..N+L`.
    pub fn single_turn(vision: &[Vec<f32>], text_ids: &[u32]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(vision.len() + text_ids.len());
        for (p, v) in vision.iter().enumerate() {
            tokens.push(Token::vision(v.clone(), p));
        }
        for (i, &id) in text_ids.iter().enumerate() {
            tokens.push(Token::text(id, vision.len() + i));
        }
        Self::new(tokens)
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.tokens.windows(2) {
            ensure!(
                pair[1].position_id > pair[0].position_id,
                Input,
                "position ids must be strictly increasing ({} then {})",
                pair[0].position_id,
                pair[1].position_id
            );
            ensure!(
                pair[1].turn_id >= pair[0].turn_id,
                Input,
                "turn ids must be non-decreasing"
            );
            if pair[0].turn_id == pair[1].turn_id {
                ensure!(
                    !(pair[0].modality() == Modality::Text && pair[1].modality() == Modality::Vision),
                    Input,
                    "vision token at position {} follows text within turn {}",
                    pair[1].position_id,
                    pair[1].turn_id
                );
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence indices of vision tokens, in order.
    pub fn vision_indices(&self) -> Vec<usize> {
        self.indices_of(Modality::Vision)
    }

    pub fn text_indices(&self) -> Vec<usize> {
        self.indices_of(Modality::Text)
    }

    fn indices_of(&self, m: Modality) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.modality() == m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_vision(&self) -> usize {
        self.tokens.iter().filter(|t| t.modality() == Modality::Vision).count()
    }

    pub fn num_text(&self) -> usize {
        self.len() - self.num_vision()
    }

    /// Vision payloads stacked as an `N x d` matrix.
    pub fn vision_embeddings(&self) -> Array2<f32> {
        let rows: Vec<&Vec<f32>> = self
            .tokens
            .iter()
            .filter_map(|t| match &t.payload {
                Payload::Embedding(e) => Some(e),
                Payload::Id(_) => None,
            })
            .collect();
        let d = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.tokens.iter().filter_map(Token::token_id).collect()
    }

    /// Keeps the vision tokens whose vision-local index is in `keep`
    /// (ascending) and every text token.
    pub fn retain_vision(&self, keep: &[usize]) -> TokenSequence {
        let mut vision_idx = 0usize;
        let mut cursor = 0usize;
        let mut tokens = Vec::with_capacity(keep.len() + self.num_text());
        for t in &self.tokens {
            match t.modality() {
                Modality::Vision => {
                    if cursor < keep.len() && keep[cursor] == vision_idx {
                        tokens.push(t.clone());
                        cursor += 1;
                    }
                    vision_idx += 1;
                }
                Modality::Text => tokens.push(t.clone()),
            }
        }
        TokenSequence { tokens }
    }

    pub fn max_position(&self) -> Option<usize> {
        self.tokens.last().map(|t| t.position_id)
    }
}
