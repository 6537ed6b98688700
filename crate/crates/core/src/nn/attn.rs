//! Single-head spatial self-attention with residual connection, applied at
//! selected feature-map resolutions.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use super::conv::{gemm_nn, gemm_nt, gemm_tn, Conv2d};
use super::init::Init;
use super::norm::{GnCache, GroupNorm};
use super::param::{Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    pub c: usize,
}

#[derive(Debug)]
pub struct AttnCache {
    xn: Array4<f32>,
    q: Array4<f32>,
    k: Array4<f32>,
    v: Array4<f32>,
    /// Row-softmaxed attention weights, `[N, L, L]` with `L = H*W`.
    w: Array3<f32>,
    h: Array4<f32>,
    gn: GnCache,
}

impl SelfAttention2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), c);
        let q = Conv2d::new(store, &format!("{name}.q"), c, c, 1, 1, 0, Init::He, rng);
        let k = Conv2d::new(store, &format!("{name}.k"), c, c, 1, 1, 0, Init::He, rng);
        let v = Conv2d::new(store, &format!("{name}.v"), c, c, 1, 1, 0, Init::He, rng);
        let proj = Conv2d::new(store, &format!("{name}.proj"), c, c, 1, 1, 0, Init::Zero, rng);
        SelfAttention2d { norm, q, k, v, proj, c }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, AttnCache) {
        let (n, c, hh, ww) = x.dim();
        let l = hh * ww;
        let scale = 1.0 / (c as f32).sqrt();
        let (xn, gn) = self.norm.forward(store, x);
        let q = self.q.forward(store, &xn);
        let k = self.k.forward(store, &xn);
        let v = self.v.forward(store, &xn);
        let mut w = Array3::zeros((n, l, l));
        let mut h = Array4::zeros((n, c, hh, ww));
        for i in 0..n {
            let qi = q.index_axis(Axis(0), i);
            let qi = qi.as_slice().unwrap();
            let ki = k.index_axis(Axis(0), i);
            let ki = ki.as_slice().unwrap();
            let vi = v.index_axis(Axis(0), i);
            let vi = vi.as_slice().unwrap();
            let wi = w.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            // scores[l_q, l_k] = sum_c q[c, l_q] * k[c, l_k] * scale
            gemm_tn(l, c, l, scale, qi, ki, 0.0, wi);
            for row in wi.chunks_exact_mut(l) {
                softmax_in_place(row);
            }
            let hi = h.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            // h[c, l_q] = sum_{l_k} v[c, l_k] * w[l_q, l_k]
            gemm_nt(c, l, l, 1.0, vi, wi, 0.0, hi);
        }
        let proj = self.proj.forward(store, &h);
        let out = x + &proj;
        (out, AttnCache { xn, q, k, v, w, h, gn })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        cache: &AttnCache,
        dout: &Array4<f32>,
        grads: &mut Gradients,
    ) -> Array4<f32> {
        let (n, c, hh, ww) = x.dim();
        let l = hh * ww;
        let scale = 1.0 / (c as f32).sqrt();
        let dh = self
            .proj
            .backward(store, &cache.h, dout, grads, true)
            .unwrap();
        let mut dq = Array4::zeros((n, c, hh, ww));
        let mut dk = Array4::zeros((n, c, hh, ww));
        let mut dv = Array4::zeros((n, c, hh, ww));
        let mut dw = vec![0.0f32; l * l];
        for i in 0..n {
            let dhi = dh.index_axis(Axis(0), i);
            let dhi = dhi.as_slice().unwrap();
            let wi = cache.w.index_axis(Axis(0), i);
            let wi = wi.as_slice().unwrap();
            let qi = cache.q.index_axis(Axis(0), i);
            let qi = qi.as_slice().unwrap();
            let ki = cache.k.index_axis(Axis(0), i);
            let ki = ki.as_slice().unwrap();
            let vi = cache.v.index_axis(Axis(0), i);
            let vi = vi.as_slice().unwrap();

            // dv[c, l_k] = sum_{l_q} dh[c, l_q] * w[l_q, l_k]
            let dvi = dv.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            gemm_nn(c, l, l, 1.0, dhi, wi, 0.0, dvi);
            // dw[l_q, l_k] = sum_c dh[c, l_q] * v[c, l_k]
            gemm_tn(l, c, l, 1.0, dhi, vi, 0.0, &mut dw);
            // softmax backward, row-wise
            for (drow, wrow) in dw.chunks_exact_mut(l).zip(wi.chunks_exact(l)) {
                let dot: f64 = drow
                    .iter()
                    .zip(wrow)
                    .map(|(&d, &s)| d as f64 * s as f64)
                    .sum();
                for (d, &s) in drow.iter_mut().zip(wrow) {
                    *d = s * (*d - dot as f32);
                }
            }
            // dq[c, l_q] = scale * sum_{l_k} k[c, l_k] * dscores[l_q, l_k]
            let dqi = dq.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            gemm_nt(c, l, l, scale, ki, &dw, 0.0, dqi);
            // dk[c, l_k] = scale * sum_{l_q} q[c, l_q] * dscores[l_q, l_k]
            let dki = dk.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            gemm_nn(c, l, l, scale, qi, &dw, 0.0, dki);
        }
        let mut dxn = self.q.backward(store, &cache.xn, &dq, grads, true).unwrap();
        dxn += &self.k.backward(store, &cache.xn, &dk, grads, true).unwrap();
        dxn += &self.v.backward(store, &cache.xn, &dv, grads, true).unwrap();
        let dres = self
            .norm
            .backward(store, x, &cache.gn, &dxn, grads, true)
            .unwrap();
        dout + &dres
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
