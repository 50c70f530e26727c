//! Row-wise kernels with their hand-written derivatives.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::weights::LayerNormWeights;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-12;

/// Normalized rows and reciprocal standard deviations kept for backward.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Normalizes each row to zero mean and unit variance (before the affine map).
pub fn normalize_rows<T: Scalar>(x: &Array2<T>) -> LnCache<T> {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    LnCache { xhat, inv_std }
}

pub fn layer_norm<T: Scalar>(x: &Array2<T>, w: &LayerNormWeights<T>) -> (Array2<T>, LnCache<T>) {
    let cache = normalize_rows(x);
    let y = &cache.xhat * &w.gamma + &w.beta;
    (y, cache)
}

/// Backward through `y = gamma * xhat + beta`; returns `dL/dx`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    w: &LayerNormWeights<T>,
    grad: Option<&mut LayerNormWeights<T>>,
) -> Array2<T> {
    if let Some(g) = grad {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    let d = T::of(dy.ncols() as f64);
    let dxhat = dy * &w.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv * (gi - mean_g - xi * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let t = (T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u)).tanh();
    half * u * (T::one() + t)
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// Row softmax of `scores` restricted to columns where `key_ok` is true;
/// masked columns get probability zero.
pub fn masked_softmax<T: Scalar>(scores: &Array2<T>, key_ok: &[bool]) -> Array2<T> {
    let mut p = Array2::zeros(scores.raw_dim());
    for (mut out, row) in p.rows_mut().into_iter().zip(scores.rows()) {
        let max = row
            .iter()
            .zip(key_ok)
            .filter(|(_, ok)| **ok)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for ((o, &v), &ok) in out.iter_mut().zip(row.iter()).zip(key_ok) {
            if ok {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        out.mapv_inplace(|v| v / sum);
    }
    p
}

/// Given `p = softmax(s)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward<T: Scalar>(p: &Array2<T>, dp: &ArrayView2<T>) -> Array2<T> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let s = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|r, &pi| *r = *r - pi * s);
    }
    ds
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: ndarray::ArrayView1<T>) -> Array1<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.mapv(|v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalized_rows_have_unit_moments() {
        let x = array![[1.0f64, 2.0, 3.0, 10.0], [-4.0, 0.5, 0.25, 8.0]];
        let c = normalize_rows(&x);
        for row in c.xhat.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let s = array![[1.0f64, 2.0, 30.0], [0.0, -1.0, 5.0]];
        let p = masked_softmax(&s, &[true, true, false]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let row = Array1::<f64>::zeros(8);
        let l = log_softmax_row(row.view());
        assert!((l[0] + 8f64.ln()).abs() < 1e-15);
    }
}
