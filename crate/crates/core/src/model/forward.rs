//! Prefill and decode passes.
//!
//! Architecture per layer (pre-norm, gain-only layer norm):
//!
//! ```text
//! a   = LN(x)            q, k, v = a Wq, a Wk, a Wv
//! P_h = softmax(q_h k_h^T / sqrt(d_h) + mask + causal)
//! x  += concat_h(P_h v_h) Wo
//! x  += gelu(LN(x) W_up) W_down
//! ```
//!
//! followed by a final layer norm; logits use the tied token embedding.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::sequence::{Payload, Token, TokenSequence};
use super::weights::{Precision, ToyVLM, Weights};
use crate::error::{ensure, Result};
use crate::eviction::{KVCache, NewSlot};
use crate::numeric::{gelu, layer_norm, layer_norm_row, softmax_in_place, LayerNormCache, Real, HARD_MASK};

/// Per-position additive attention-logit penalties, shared by every layer and
/// head. Text positions always carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAddends(Vec<f64>);

impl MaskAddends {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Hard-masks the given sequence indices with the finite surrogate for -inf.
    pub fn hard(len: usize, masked: &[usize]) -> Self {
        let mut v = vec![0.0; len];
        for &i in masked {
            v[i] = HARD_MASK;
        }
        Self(v)
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn cast<T: Real>(&self) -> Array1<T> {
        self.0.iter().map(|&v| T::lit(v)).collect()
    }
}

/// Everything a prefill pass exposes to callers.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T = f32> {
    /// `attention[layer][head]` is an `n x n` row-stochastic lower-triangular matrix.
    pub attention: Vec<Vec<Array2<T>>>,
    /// Final hidden states (after the last layer norm), one row per position.
    pub hidden: Array2<T>,
}

pub(crate) struct LayerTape<T> {
    pub ln_attn: LayerNormCache<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub ln_ffn: LayerNormCache<T>,
    pub ffn_pre: Array2<T>,
}

/// Activations retained for the backward pass.
pub(crate) struct Tape<T> {
    pub layers: Vec<LayerTape<T>>,
    pub final_ln: LayerNormCache<T>,
    pub hidden: Array2<T>,
}

/// Input embeddings: payload (vision) or token row (text) plus the position row.
pub fn embed<T: Precision>(model: &ToyVLM, seq: &TokenSequence) -> Result<Array2<T>> {
    let cfg = model.config();
    let w = model.weights_as::<T>();
    let d = cfg.hidden_dim;
    let mut out = Array2::<T>::zeros((seq.len(), d));
    for (i, tok) in seq.tokens.iter().enumerate() {
        let row = embed_token(cfg.vocab_size, cfg.max_positions, w, tok)?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

fn embed_token<T: Real>(vocab: usize, max_pos: usize, w: &Weights<T>, tok: &Token) -> Result<Array1<T>> {
    let d = w.token_embedding.ncols();
    ensure!(
        tok.position_id < max_pos,
        Input,
        "position id {} exceeds max_positions {max_pos}",
        tok.position_id
    );
    let pos = w.position_embedding.row(tok.position_id);
    match &tok.payload {
        Payload::Id(id) => {
            ensure!((*id as usize) < vocab, Input, "token id {id} exceeds vocab size {vocab}");
            Ok(&w.token_embedding.row(*id as usize) + &pos)
        }
        Payload::Embedding(e) => {
            ensure!(e.len() == d, Input, "vision payload has dimension {}, expected {d}", e.len());
            Ok(e.iter().zip(pos.iter()).map(|(&a, &p)| T::lit(a as f64) + p).collect())
        }
    }
}

/// Causal multi-head attention over a full sequence. Returns per-head
/// probabilities and the concatenated context.
fn causal_attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    mask: Option<&Array1<T>>,
) -> (Vec<Array2<T>>, Array2<T>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut ctx = Array2::<T>::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let mut p = qh.dot(&kh.t()) * scale;
        for i in 0..n {
            let mut row = p.row_mut(i);
            if let Some(m) = mask {
                for j in 0..=i {
                    row[j] = row[j] + m[j];
                }
            }
            softmax_in_place(row.slice_mut(s![..=i]));
            row.slice_mut(s![i + 1..]).fill(T::zero());
        }
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (probs, ctx)
}

pub(crate) fn run_tape<T: Precision>(model: &ToyVLM, x0: Array2<T>, mask: Option<&Array1<T>>) -> Tape<T> {
    let cfg = model.config();
    let w = model.weights_as::<T>();
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lw in &w.layers {
        let (normed_attn, ln_attn) = layer_norm(&x, &lw.attn_norm);
        let q = normed_attn.dot(&lw.query);
        let k = normed_attn.dot(&lw.key);
        let v = normed_attn.dot(&lw.value);
        let (probs, ctx) = causal_attention(&q, &k, &v, cfg.num_heads, mask);
        x = x + ctx.dot(&lw.output);
        let (normed_ffn, ln_ffn) = layer_norm(&x, &lw.ffn_norm);
        let ffn_pre = normed_ffn.dot(&lw.ffn_up);
        let act = ffn_pre.mapv(gelu);
        x = x + act.dot(&lw.ffn_down);
        layers.push(LayerTape { ln_attn, q, k, v, probs, ln_ffn, ffn_pre });
    }
    let (hidden, final_ln) = layer_norm(&x, &w.final_norm);
    Tape { layers, final_ln, hidden }
}

fn check_mask(seq: &TokenSequence, mask: Option<&MaskAddends>) -> Result<()> {
    if let Some(m) = mask {
        ensure!(
            m.len() == seq.len(),
            Input,
            "mask has length {}, sequence has {} tokens",
            m.len(),
            seq.len()
        );
    }
    Ok(())
}

/// Prefill in an arbitrary precision, returning only the trace.
pub fn forward_trace<T: Precision>(
    model: &ToyVLM,
    seq: &TokenSequence,
    mask: Option<&MaskAddends>,
) -> Result<ForwardTrace<T>> {
    check_mask(seq, mask)?;
    ensure!(!seq.is_empty(), Input, "cannot run a forward pass over an empty sequence");
    let x0 = embed::<T>(model, seq)?;
    let mask = mask.map(MaskAddends::cast::<T>);
    let tape = run_tape(model, x0, mask.as_ref());
    Ok(ForwardTrace {
        attention: tape.layers.into_iter().map(|l| l.probs).collect(),
        hidden: tape.hidden,
    })
}

/// Final hidden states at text positions only, in sequence order.
pub fn text_hidden<T: Precision>(
    model: &ToyVLM,
    seq: &TokenSequence,
    mask: Option<&MaskAddends>,
) -> Result<Array2<T>> {
    let trace = forward_trace::<T>(model, seq, mask)?;
    Ok(text_hidden_states(&trace, seq))
}

/// Prefill pass: full trace plus a cache populated with every position's
/// keys and values.
pub fn forward_prefill(
    model: &ToyVLM,
    seq: &TokenSequence,
    mask: Option<&MaskAddends>,
) -> Result<(ForwardTrace, KVCache)> {
    check_mask(seq, mask)?;
    ensure!(!seq.is_empty(), Input, "cannot run a forward pass over an empty sequence");
    let cfg = model.config();
    let x0 = embed::<f32>(model, seq)?;
    let mask = mask.map(MaskAddends::cast::<f32>);
    let tape = run_tape(model, x0, mask.as_ref());
    let mut cache = KVCache::new(cfg.num_layers, cfg.hidden_dim);
    for (i, tok) in seq.tokens.iter().enumerate() {
        let keys: Vec<ArrayView1<f32>> = tape.layers.iter().map(|l| l.k.row(i)).collect();
        let values: Vec<ArrayView1<f32>> = tape.layers.iter().map(|l| l.v.row(i)).collect();
        let keys: Vec<&[f32]> = keys.iter().map(|r| r.to_slice().unwrap()).collect();
        let values: Vec<&[f32]> = values.iter().map(|r| r.to_slice().unwrap()).collect();
        cache.push(slot_for(tok), &keys, &values)?;
    }
    let trace = ForwardTrace {
        attention: tape.layers.into_iter().map(|l| l.probs).collect(),
        hidden: tape.hidden,
    };
    Ok((trace, cache))
}

fn slot_for(tok: &Token) -> NewSlot {
    NewSlot {
        modality: tok.modality(),
        phase: tok.phase,
        turn_id: tok.turn_id,
        position_id: tok.position_id,
        token_id: tok.token_id(),
    }
}

/// Rows of the final hidden states at text positions.
pub fn text_hidden_states<T: Real>(trace: &ForwardTrace<T>, seq: &TokenSequence) -> Array2<T> {
    let idx = seq.text_indices();
    trace.hidden.select(Axis(0), &idx)
}

/// Result of one autoregressive step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub logits: Array1<f32>,
    /// Final-layer attention per head over the cache (including the new slot).
    pub final_attention: Vec<Vec<f32>>,
    /// Final-layer attention averaged across heads.
    pub final_attention_mean: Vec<f64>,
    /// Attention received per slot summed over all heads and layers.
    pub attention_mass: Vec<f64>,
    pub hidden: Array1<f32>,
}

impl DecodeOutput {
    /// Greedy next token; ties resolve to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Appends `token` to every layer of `cache` and returns next-token logits
/// with the attention rows of this step.
pub fn forward_decode_step(model: &ToyVLM, token: &Token, cache: &mut KVCache) -> Result<DecodeOutput> {
    ensure!(!cache.is_empty(), State, "decode requires a cache populated by prefill");
    let cfg = model.config();
    let w = model.weights_as::<f32>();
    if let Some(last) = cache.last_position() {
        ensure!(
            token.position_id > last,
            Input,
            "decode position {} does not follow cached position {last}",
            token.position_id
        );
    }
    let d = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut x = embed_token(cfg.vocab_size, cfg.max_positions, w, token)?;
    let n = cache.len() + 1;
    let mut new_keys = Vec::with_capacity(cfg.num_layers);
    let mut new_values = Vec::with_capacity(cfg.num_layers);
    let mut attention_mass = vec![0.0f64; n];
    let mut final_attention = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let a = layer_norm_row(x.view(), &lw.attn_norm);
        let q = a.dot(&lw.query);
        let k = a.dot(&lw.key);
        let v = a.dot(&lw.value);
        let ck = cache.keys(l);
        let cv = cache.values(l);
        let mut ctx = Array1::<f32>::zeros(d);
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let qh = q.slice(s![r.clone()]);
            let mut row = Array1::<f32>::zeros(n);
            for j in 0..n - 1 {
                row[j] = qh.dot(&ck.slice(s![j, r.clone()])) * scale;
            }
            row[n - 1] = qh.dot(&k.slice(s![r.clone()])) * scale;
            softmax_in_place(row.view_mut());
            let mut out = ctx.slice_mut(s![r.clone()]);
            for j in 0..n - 1 {
                out.scaled_add(row[j], &cv.slice(s![j, r.clone()]));
            }
            out.scaled_add(row[n - 1], &v.slice(s![r.clone()]));
            for (m, &p) in attention_mass.iter_mut().zip(row.iter()) {
                *m += p as f64;
            }
            per_head.push(row.to_vec());
        }
        x = x + ctx.dot(&lw.output);
        let b = layer_norm_row(x.view(), &lw.ffn_norm);
        let act = b.dot(&lw.ffn_up).mapv(gelu);
        x = x + act.dot(&lw.ffn_down);
        new_keys.push(k);
        new_values.push(v);
        final_attention = per_head;
    }
    let hidden = layer_norm_row(x.view(), &w.final_norm);
    let logits = w.token_embedding.dot(&hidden);
    let keys: Vec<&[f32]> = new_keys.iter().map(|r| r.as_slice().unwrap()).collect();
    let values: Vec<&[f32]> = new_values.iter().map(|r| r.as_slice().unwrap()).collect();
    cache.push(slot_for(token), &keys, &values)?;
    let final_attention_mean = (0..n)
        .map(|j| final_attention.iter().map(|h| h[j] as f64).sum::<f64>() / heads as f64)
        .collect();
    Ok(DecodeOutput { logits, final_attention, final_attention_mean, attention_mass, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ToyVLM {
        ToyVLM::init(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 16,
            max_positions: 32,
            init_seed: 3,
            init_std: 0.3,
            qk_tie: 0.0,
            qk_gain: 1.0,
            muted_dims: 0,
            muted_gain: 0.05,
        })
        .unwrap()
    }

    fn seq(d: usize) -> TokenSequence {
        let v: Vec<Vec<f32>> = (0..3).map(|i| (0..d).map(|j| ((i * d + j) as f32 * 0.37).sin()).collect()).collect();
        TokenSequence::single_turn(&v, &[1, 2]).unwrap()
    }

    #[test]
    fn zero_payload_embeds_to_position_row() {
        let m = small();
        let s = TokenSequence::single_turn(&[vec![0.0; 8]], &[4]).unwrap();
        let e = embed::<f32>(&m, &s).unwrap();
        assert_eq!(e.row(0), m.weights().position_embedding.row(0));
        let expect = &m.weights().token_embedding.row(4) + &m.weights().position_embedding.row(1);
        assert_eq!(e.row(1), expect);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let m = small();
        let s = TokenSequence::single_turn(&[], &[99]).unwrap();
        assert!(embed::<f32>(&m, &s).is_err());
        let s = TokenSequence::single_turn(&[vec![0.0; 3]], &[1]).unwrap();
        assert!(embed::<f32>(&m, &s).is_err());
        let s = TokenSequence::new(vec![Token::text(1, 40)]).unwrap();
        assert!(embed::<f32>(&m, &s).is_err());
    }

    #[test]
    fn zero_mask_matches_no_mask() {
        let m = small();
        let s = seq(8);
        let a = forward_trace::<f32>(&m, &s, None).unwrap();
        let b = forward_trace::<f32>(&m, &s, Some(&MaskAddends::zeros(s.len()))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_length_mismatch_is_input_error() {
        let m = small();
        let s = seq(8);
        assert!(forward_prefill(&m, &s, Some(&MaskAddends::zeros(2))).is_err());
    }

    #[test]
    fn singleton_attends_to_itself() {
        let m = small();
        let s = TokenSequence::single_turn(&[], &[3]).unwrap();
        let (trace, cache) = forward_prefill(&m, &s, None).unwrap();
        for layer in &trace.attention {
            for head in layer {
                assert_eq!(head[[0, 0]], 1.0);
            }
        }
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn hard_mask_suppresses_column() {
        let m = small();
        let s = seq(8);
        let mask = MaskAddends::hard(s.len(), &[1]);
        let (trace, _) = forward_prefill(&m, &s, Some(&mask)).unwrap();
        for layer in &trace.attention {
            for head in layer {
                for t in s.text_indices() {
                    assert!(head[[t, 1]] < 1e-6);
                }
            }
        }
    }

    #[test]
    fn decode_after_single_token_prefill() {
        let m = small();
        let s = TokenSequence::single_turn(&[], &[3]).unwrap();
        let (_, mut cache) = forward_prefill(&m, &s, None).unwrap();
        let out = forward_decode_step(&m, &Token::generated(5, 1), &mut cache).unwrap();
        assert_eq!(out.final_attention_mean.len(), 2);
        let sum: f64 = out.final_attention_mean.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn decode_on_empty_cache_is_state_error() {
        let m = small();
        let mut cache = KVCache::new(2, 8);
        let err = forward_decode_step(&m, &Token::generated(1, 0), &mut cache).unwrap_err();
        assert!(matches!(err, crate::Error::State(_)));
    }

    #[test]
    fn decode_matches_prefill_of_extended_sequence() {
        let m = small();
        let s = seq(8);
        let (_, mut cache) = forward_prefill(&m, &s, None).unwrap();
        let out = forward_decode_step(&m, &Token::generated(7, 5), &mut cache).unwrap();
        let mut ext = s.clone();
        ext.tokens.push(Token::generated(7, 5));
        let full = forward_trace::<f32>(&m, &ext, None).unwrap();
        for (a, b) in out.hidden.iter().zip(full.hidden.row(5).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
