//! Scalar abstraction and the small dense kernels shared by the forward and
//! backward passes.
//!
//! Forward passes run in `f32`; gradient oracles instantiate the same code at
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Additive logit penalty standing in for negative infinity.
///
/// Large enough that `exp` underflows to exactly zero in both precisions once
/// the row maximum is subtracted.
pub const HARD_MASK: f64 = -1.0e9;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1.0e-5;

pub trait Real:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + Sum + Debug + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a dense row-major `f32` matrix to the working precision.
pub fn cast_matrix<T: Real>(m: &Array2<f32>) -> Array2<T> {
    m.mapv(|v| T::lit(v as f64))
}

pub fn cast_vector<T: Real>(v: &Array1<f32>) -> Array1<T> {
    v.mapv(|x| T::lit(x as f64))
}

/// Per-row statistics retained for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Gain-only layer normalization over the last axis.
pub fn layer_norm<T: Real>(x: &Array2<T>, gain: &Array1<T>) -> (Array2<T>, LayerNormCache<T>) {
    let (rows, cols) = x.dim();
    let n = T::lit(cols as f64);
    let eps = T::lit(LN_EPS);
    let mut normalized = Array2::<T>::zeros((rows, cols));
    let mut inv_std = Array1::<T>::zeros(rows);
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std[r] = rstd;
        for (c, &v) in row.iter().enumerate() {
            normalized[[r, c]] = (v - mean) * rstd;
        }
    }
    let out = &normalized * gain;
    (out, LayerNormCache { normalized, inv_std })
}

pub fn layer_norm_row<T: Real>(x: ArrayView1<T>, gain: &Array1<T>) -> Array1<T> {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    x.iter()
        .zip(gain.iter())
        .map(|(&v, &g)| (v - mean) * rstd * g)
        .collect()
}

/// Gradient of a gain-only layer norm with respect to its input.
pub fn layer_norm_backward<T: Real>(
    grad_out: &Array2<T>,
    gain: &Array1<T>,
    cache: &LayerNormCache<T>,
) -> Array2<T> {
    let (rows, cols) = grad_out.dim();
    let n = T::lit(cols as f64);
    let mut grad_in = Array2::<T>::zeros((rows, cols));
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dxhat: Array1<T> = &grad_out.row(r) * gain;
        let mean_d = dxhat.sum() / n;
        let mean_dx = dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        let rstd = cache.inv_std[r];
        for c in 0..cols {
            grad_in[[r, c]] = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    grad_in
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

/// In-place numerically stable softmax over a row.
pub fn softmax_in_place<T: Real>(mut row: ArrayViewMut1<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over all elements of the squared difference, accumulated in `f64`.
///
/// Returns 0 for empty inputs. Shapes must match.
pub fn mean_sq_diff<T: Real>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    if a.is_empty() {
        return 0.0;
    }
    let total: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap();
            d * d
        })
        .sum();
    total / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_singleton_is_one() {
        let mut r = array![3.5f32];
        softmax_in_place(r.view_mut());
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn hard_mask_underflows_to_zero() {
        let mut r = array![0.3f32, 0.1 + HARD_MASK as f32, -0.2];
        softmax_in_place(r.view_mut());
        assert_eq!(r[1], 0.0);
        assert!((r.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let x = array![[0.3f64, -1.2, 0.8, 2.0], [1.0, 0.5, -0.5, 0.1]];
        let gain = array![1.0f64, 0.5, 2.0, 1.5];
        let probe = array![[0.2f64, -0.4, 1.0, 0.3], [0.7, -0.1, 0.2, -0.9]];
        let objective = |x: &Array2<f64>| (&layer_norm(x, &gain).0 * &probe).sum();
        let (_, cache) = layer_norm(&x, &gain);
        let analytic = layer_norm_backward(&probe, &gain, &cache);
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
                assert!((fd - analytic[[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
