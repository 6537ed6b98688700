//! Activation functions, timestep embeddings, and classification heads.

use ndarray::{Array, Array2, Dimension};

/// `x * sigmoid(x)`.
pub fn silu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<D: Dimension>(x: &Array<f32, D>, dout: &Array<f32, D>) -> Array<f32, D> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Sinusoidal embedding of integer levels, `[N, dim]` with `dim` even: the
/// first half is `sin(t * f_i)`, the second `cos(t * f_i)`, frequencies
/// log-spaced from 1 down to 1/10000.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Array2<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    for (n, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / denom).exp();
            let arg = ti as f64 * freq;
            out[[n, i]] = arg.sin() as f32;
            out[[n, half + i]] = arg.cos() as f32;
        }
    }
    out
}

/// Row-wise log-softmax of logits `[N, K]`.
pub fn log_softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lse = lse.ln() as f32 + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Mean cross-entropy of logits against integer labels, with the logit
/// gradient of the mean loss.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let (n, k) = logits.dim();
    assert_eq!(labels.len(), n);
    let logp = log_softmax(logits);
    let mut loss = 0.0f64;
    let mut dlogits = Array2::zeros((n, k));
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        assert!(y < k, "label {y} out of range for {k} classes");
        loss -= logp[[i, y]] as f64;
        for j in 0..k {
            let p = (logp[[i, j]] as f64).exp();
            dlogits[[i, j]] = ((p - if j == y { 1.0 } else { 0.0 }) * inv) as f32;
        }
    }
    (loss * inv, dlogits)
}

/// Index of the row maximum (first one wins ties).
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
