//! Dense building blocks with hand-written backward passes.
//!
//! Everything operates on row-major `(tokens, features)` matrices in `f64`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    softmax_rows_inplace(&mut out);
    out
}

/// Backward through a row-wise softmax: `dX = P ⊙ (dP − rowsum(dP ⊙ P))`.
pub fn softmax_rows_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    Zip::from(out.rows_mut()).and(probs.rows()).and(d_probs.rows()).for_each(|mut o, p, dp| {
        let dot = p.dot(&dp);
        Zip::from(&mut o).and(&p).and(&dp).for_each(|o, &p, &dp| *o = p * (dp - dot));
    });
    out
}

/// Backward through `y = x / |x|`.
pub fn normalize_backward(x: &Array1<f64>, y: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    let norm = x.dot(x).sqrt();
    (dy - &(y * y.dot(dy))) / norm
}

/// Returns row norms and the row-normalised matrix.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (norms, out)
}

/// Backward through row normalisation.
pub fn normalize_rows_backward(norms: &Array1<f64>, unit: &Array2<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    Zip::from(out.rows_mut()).and(unit.rows()).and(norms).for_each(|mut o, u, &n| {
        let dot = u.dot(&o);
        o.scaled_add(-dot, &u);
        o /= n;
    });
    out
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform Xavier/Glorot initialisation for a `(fan_in, fan_out)` matrix.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit))
}

pub fn gaussian<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Row-wise layer normalisation with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *s;
    }
    let out = &normalized * gamma + beta;
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d_gamma = (d_out * &cache.normalized).sum_axis(Axis(0));
    let d_beta = d_out.sum_axis(Axis(0));
    let d_norm = d_out * gamma;
    let d = d_out.ncols() as f64;
    let mut d_in = Array2::zeros(d_out.raw_dim());
    Zip::from(d_in.rows_mut())
        .and(d_norm.rows())
        .and(cache.normalized.rows())
        .and(&cache.inv_std)
        .for_each(|mut di, dn, xh, &s| {
            let mean_dn = dn.sum() / d;
            let mean_dn_xh = dn.dot(&xh) / d;
            Zip::from(&mut di).and(&dn).and(&xh).for_each(|di, &dn, &xh| {
                *di = s * (dn - mean_dn - xh * mean_dn_xh);
            });
        });
    (d_in, d_gamma, d_beta)
}

/// `x · W + b`.
pub fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Weight and bias gradients of `x · W + b` accumulated into the given buffers;
/// returns the input gradient.
pub fn affine_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    d_out: &Array2<f64>,
    d_w: &mut Array2<f64>,
    d_b: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), d_out, 1.0, d_w);
    *d_b += &d_out.sum_axis(Axis(0));
    d_out.dot(&w.t())
}
