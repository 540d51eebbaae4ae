//! Reverse-mode gradient of a loss on the final hidden states with respect to
//! the per-position mask addends.
//!
//! Model weights are frozen, so only activation gradients are propagated. The
//! mask enters every layer's attention logits additively by column, so its
//! gradient is the column sum of every layer's and head's logit gradient.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::Tape;
use super::weights::{Precision, ToyVLM};
use crate::numeric::{gelu_grad, layer_norm_backward};

pub(crate) fn mask_gradient<T: Precision>(model: &ToyVLM, tape: &Tape<T>, grad_hidden: &Array2<T>) -> Array1<T> {
    let cfg = model.config();
    let w = model.weights_as::<T>();
    let n = grad_hidden.nrows();
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let mut grad_x = layer_norm_backward(grad_hidden, &w.final_norm, &tape.final_ln);
    let mut grad_mask = Array1::<T>::zeros(n);

    for (l, (lw, lt)) in w.layers.iter().zip(&tape.layers).enumerate().rev() {
        // feed-forward residual branch
        let d_act = grad_x.dot(&lw.ffn_down.t());
        let d_pre = &d_act * &lt.ffn_pre.mapv(gelu_grad);
        let d_normed = d_pre.dot(&lw.ffn_up.t());
        let grad_mid = &grad_x + &layer_norm_backward(&d_normed, &lw.ffn_norm, &lt.ln_ffn);

        // attention residual branch
        let d_ctx = grad_mid.dot(&lw.output.t());
        let mut d_q = Array2::<T>::zeros(lt.q.raw_dim());
        let mut d_k = Array2::<T>::zeros(lt.k.raw_dim());
        let mut d_v = Array2::<T>::zeros(lt.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lt.probs[h];
            let dctx_h = d_ctx.slice(cols);
            let d_p = dctx_h.dot(&lt.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let row_dot = (p * &d_p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_logits = p * &(&d_p - &row_dot);
            grad_mask = grad_mask + d_logits.sum_axis(Axis(0));
            if l > 0 {
                d_q.slice_mut(cols).assign(&(d_logits.dot(&lt.k.slice(cols)) * scale));
                d_k.slice_mut(cols).assign(&(d_logits.t().dot(&lt.q.slice(cols)) * scale));
            }
        }
        if l == 0 {
            break;
        }
        let d_normed_attn = d_q.dot(&lw.query.t()) + d_k.dot(&lw.key.t()) + d_v.dot(&lw.value.t());
        grad_x = grad_mid + layer_norm_backward(&d_normed_attn, &lw.attn_norm, &lt.ln_attn);
    }
    grad_mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{embed, run_tape};
    use crate::model::{ModelConfig, TokenSequence};

    /// Central differences on the mask vector itself, 64-bit.
    #[test]
    fn mask_gradient_matches_finite_differences() {
        let model = ToyVLM::init(ModelConfig {
            num_layers: 3,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 12,
            vocab_size: 10,
            max_positions: 16,
            init_seed: 11,
            init_std: 0.4,
            qk_tie: 0.0,
            qk_gain: 1.0,
            muted_dims: 0,
            muted_gain: 0.05,
        })
        .unwrap();
        let vision: Vec<Vec<f32>> = (0..4).map(|i| (0..8).map(|j| ((i * 8 + j) as f32 * 0.61).cos()).collect()).collect();
        let seq = TokenSequence::single_turn(&vision, &[2, 7]).unwrap();
        let x0 = embed::<f64>(&model, &seq).unwrap();
        let probe = Array2::from_shape_fn((seq.len(), 8), |(i, j)| ((i * 3 + j) as f64 * 0.29).sin());
        let mask0 = Array1::from_vec(vec![-0.3, -1.1, 0.0, -2.0, 0.0, 0.0]);
        let objective = |m: &Array1<f64>| (&run_tape(&model, x0.clone(), Some(m)).hidden * &probe).sum();
        let tape = run_tape(&model, x0.clone(), Some(&mask0));
        let analytic = mask_gradient(&model, &tape, &probe);
        let h = 1e-5;
        for j in 0..seq.len() {
            let mut mp = mask0.clone();
            mp[j] += h;
            let mut mm = mask0.clone();
            mm[j] -= h;
            let fd = (objective(&mp) - objective(&mm)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-7 * (1.0 + fd.abs()), "j={j}: fd={fd} analytic={}", analytic[j]);
        }
    }
}
