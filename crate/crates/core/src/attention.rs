//! Reference attention forms: softmax (sequential and masked-parallel),
//! softmax-free, and normalized linearized attention.
//!
//! These are the quadratic "attention form" counterparts of the recurrent
//! layers and serve as oracles in the equivalence checks. Sequences are
//! stored column-wise: `Q`, `K` are `d_key × T` and `V` is `d_out × T`.
//! No `1/√d_key` scaling is applied.

use crate::error::{FwpError, Result};
use crate::layer::PhiMap;
use crate::tensor::{Mat, Vector};

/// Additive stand-in for −∞ in the causal softmax mask.
pub const MASK_SENTINEL: f64 = -1e30;

/// Growing key/value memory of sequential softmax attention.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    keys: Vec<Vector>,
    values: Vec<Vector>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `K_t`, `d_key × t`.
    pub fn keys(&self) -> Mat {
        Mat::from_columns(&self.keys)
    }

    /// `V_t`, `d_out × t`.
    pub fn values(&self) -> Mat {
        Mat::from_columns(&self.values)
    }

    fn push(&mut self, k: &Vector, v: &Vector) -> Result<()> {
        if let (Some(k0), Some(v0)) = (self.keys.first(), self.values.first()) {
            if k0.dim() != k.dim() || v0.dim() != v.dim() {
                return Err(FwpError::Shape(format!(
                    "cache holds {}/{}-dim keys/values, got {}/{}",
                    k0.dim(),
                    v0.dim(),
                    k.dim(),
                    v.dim()
                )));
            }
        }
        self.keys.push(k.clone());
        self.values.push(v.clone());
        Ok(())
    }
}

/// Output of one sequential attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStep {
    pub y: Vector,
    /// `α_{t,τ}` for `τ = 1..t`.
    pub weights: Vector,
}

/// Appends `(k, v)` and attends with `q`: `y = V_t softmax(K_tᵀ q)`.
pub fn softmax_attention_step(cache: &KvCache, q: &Vector, k: &Vector, v: &Vector) -> Result<(KvCache, AttentionStep)> {
    if q.dim() != k.dim() {
        return Err(FwpError::Shape(format!("query {} vs key {}", q.dim(), k.dim())));
    }
    let mut next = cache.clone();
    next.push(k, v)?;
    let scores = Vector::from(next.keys.iter().map(|key| key.dot(q)).collect::<Vec<_>>());
    let weights = scores.softmax();
    let mut y = Vector::zeros(v.dim());
    for (alpha, value) in weights.as_slice().iter().zip(&next.values) {
        for (o, &e) in y.as_mut_slice().iter_mut().zip(value.as_slice()) {
            *o += alpha * e;
        }
    }
    Ok((next, AttentionStep { y, weights }))
}

/// Causal mask for softmax attention: entry `(i, j)` is kept iff `i ≤ j`
/// (key index `i`, query index `j`); every other score gets the sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    len: usize,
}

impl AttnMask {
    pub fn causal(len: usize) -> Self {
        Self { len }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        i <= j
    }

    /// The mask as a matrix of `1` and the sentinel.
    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.len, self.len, |i, j| if self.allows(i, j) { 1.0 } else { MASK_SENTINEL })
    }

    /// Masked scores, sentinel added where the mask forbids attention.
    pub fn apply(&self, scores: &Mat) -> Mat {
        assert_eq!(scores.shape(), (self.len, self.len), "mask size mismatch");
        Mat::from_fn(self.len, self.len, |i, j| {
            let s = scores.get(i, j);
            if self.allows(i, j) {
                s
            } else {
                s + MASK_SENTINEL
            }
        })
    }
}

fn check_qkv(q: &Mat, k: &Mat, v: &Mat) -> Result<()> {
    if q.shape() != k.shape() || v.cols() != k.cols() {
        return Err(FwpError::Shape(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Column-wise softmax of the masked scores `KᵀQ`; column `t` holds `α_{t,·}`.
pub fn softmax_attention_weights(q: &Mat, k: &Mat) -> Result<Mat> {
    if q.shape() != k.shape() {
        return Err(FwpError::Shape(format!("Q {:?} vs K {:?}", q.shape(), k.shape())));
    }
    let t = q.cols();
    let masked = AttnMask::causal(t).apply(&k.transpose().matmul(q));
    let mut weights = Mat::zeros(t, t);
    for j in 0..t {
        let col = masked.col_vector(j).softmax();
        for i in 0..t {
            weights.set(i, j, col[i]);
        }
    }
    Ok(weights)
}

/// `Y = V · softmax(M ⊙ KᵀQ)` over all steps at once.
pub fn softmax_attention_parallel(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    check_qkv(q, k, v)?;
    Ok(v.matmul(&softmax_attention_weights(q, k)?))
}

/// Sequential softmax attention over whole matrices, step by step.
pub fn softmax_attention_sequential(q: &Mat, k: &Mat, v: &Mat) -> Result<(Mat, Vec<Vector>)> {
    check_qkv(q, k, v)?;
    let mut cache = KvCache::new();
    let mut ys = Vec::with_capacity(q.cols());
    let mut weights = Vec::with_capacity(q.cols());
    for t in 0..q.cols() {
        let (next, out) = softmax_attention_step(&cache, &q.col_vector(t), &k.col_vector(t), &v.col_vector(t))?;
        cache = next;
        ys.push(out.y);
        weights.push(out.weights);
    }
    Ok((Mat::from_columns(&ys), weights))
}

/// Attention with the softmax removed: `y_t = V_t (K_tᵀ q_t)`, in quadratic form.
pub fn nosoftmax_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    check_qkv(q, k, v)?;
    let t = q.cols();
    let scores = k.transpose().matmul(q);
    let masked = Mat::from_fn(t, t, |i, j| if i <= j { scores.get(i, j) } else { 0.0 });
    Ok(v.matmul(&masked))
}

/// Normalized attention weights `α'_{t,τ} = φ(k_τ)ᵀφ(q_t) / Σ_{τ'≤t} φ(k_τ')ᵀφ(q_t)`;
/// column `t` holds `α'_{t,·}`.
pub fn linearized_attention_weights(q: &Mat, k: &Mat, phi: PhiMap) -> Result<Mat> {
    if q.shape() != k.shape() {
        return Err(FwpError::Shape(format!("Q {:?} vs K {:?}", q.shape(), k.shape())));
    }
    let t = q.cols();
    let qf: Vec<Vector> = (0..t).map(|j| phi.apply(&q.col_vector(j))).collect();
    let kf: Vec<Vector> = (0..t).map(|j| phi.apply(&k.col_vector(j))).collect();
    let mut weights = Mat::zeros(t, t);
    for j in 0..t {
        let scores: Vec<f64> = (0..=j).map(|i| kf[i].dot(&qf[j])).collect();
        let denom: f64 = scores.iter().sum();
        if denom == 0.0 || !denom.is_finite() {
            return Err(FwpError::Numeric {
                step: j + 1,
                what: format!("linearized attention denominator is {denom}"),
            });
        }
        for (i, s) in scores.into_iter().enumerate() {
            weights.set(i, j, s / denom);
        }
    }
    Ok(weights)
}

/// `y_t = Σ_τ α'_{t,τ} v_τ`.
pub fn linearized_attention(q: &Mat, k: &Mat, v: &Mat, phi: PhiMap) -> Result<Mat> {
    check_qkv(q, k, v)?;
    Ok(v.matmul(&linearized_attention_weights(q, k, phi)?))
}

/// Splits the rows of `m` into `heads` equal contiguous blocks.
pub fn split_heads(m: &Mat, heads: usize) -> Vec<Mat> {
    assert!(heads > 0 && m.rows().is_multiple_of(heads), "rows not divisible by heads");
    let h = m.rows() / heads;
    (0..heads).map(|i| m.row_block(i * h, h)).collect()
}

/// Stacks per-head blocks back into one matrix.
pub fn concat_heads(parts: &[Mat]) -> Mat {
    let cols = parts.first().map_or(0, Mat::cols);
    let rows = parts.iter().map(Mat::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        assert_eq!(p.cols(), cols, "ragged head blocks");
        data.extend_from_slice(p.as_slice());
    }
    Mat::from_vec(rows, cols, data)
}
