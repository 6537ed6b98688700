//! 2-D convolution via im2col + single-threaded GEMM, plus nearest-neighbor
//! resampling. All tensors are `[N, C, H, W]` in standard layout.
//!
//! Convolutions gather image chunks into one column panel per GEMM call so
//! the matrix products are large enough to amortize packing.

use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;

use super::init::Init;
use super::param::{Gradients, ParamId, ParamStore};

/// Images per im2col panel.
const CONV_CHUNK: usize = 8;

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,n] = alpha * a[m,k] * b^T + beta * c` where `b` is stored `[n, k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,n] = alpha * a^T * b[k,n] + beta * c` where `a` is stored `[k, m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ci * k * k;
        let w = store.add(
            format!("{name}.weight"),
            init.tensor(&[co, ci, k, k], fan_in, rng),
        );
        let b = store.add(format!("{name}.bias"), ArrayD::zeros(vec![co]));
        Conv2d { w, b, ci, co, k, stride, pad }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (n, ci, h, w) = x.dim();
        assert_eq!(ci, self.ci, "conv input channels");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let hw = ho * wo;
        let ckk = self.ci * self.k * self.k;
        let mut out = Array4::zeros((n, self.co, ho, wo));
        let wm = store.get(self.w).as_slice().expect("conv weight layout");
        let bias = store.get(self.b).as_slice().expect("conv bias layout");
        let xs = x.as_slice().expect("conv input layout");
        let os = out.as_slice_mut().unwrap();
        let in_item = ci * h * w;
        let out_item = self.co * hw;

        let mut cols = vec![0.0f32; ckk * CONV_CHUNK * hw];
        let mut panel = vec![0.0f32; self.co * CONV_CHUNK * hw];
        let mut base = 0;
        while base < n {
            let cn = CONV_CHUNK.min(n - base);
            for j in 0..cn {
                self.im2col(
                    &xs[(base + j) * in_item..(base + j + 1) * in_item],
                    h,
                    w,
                    &mut cols,
                    j * hw,
                    cn * hw,
                );
            }
            gemm_nn(self.co, ckk, cn * hw, 1.0, wm, &cols[..ckk * cn * hw], 0.0, &mut panel[..self.co * cn * hw]);
            for j in 0..cn {
                let dst = &mut os[(base + j) * out_item..(base + j + 1) * out_item];
                for c in 0..self.co {
                    let src = &panel[c * cn * hw + j * hw..c * cn * hw + (j + 1) * hw];
                    let b = bias[c];
                    for (d, &s) in dst[c * hw..(c + 1) * hw].iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
            base += cn;
        }
        out
    }

    /// Accumulates weight/bias gradients and, when `need_dx`, returns the
    /// input gradient. `x` is the forward input.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        dout: &Array4<f32>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let ckk = self.ci * self.k * self.k;
        let hw = ho * wo;
        let in_item = self.ci * h * w;
        let out_item = self.co * hw;

        let wm = store.get(self.w).as_slice().expect("conv weight layout").to_vec();
        let xs = x.as_slice().unwrap();
        let dos = dout.as_slice().unwrap();

        // stride-1 input gradients go through the transposed-convolution
        // route below; it is GEMM-shaped like the forward pass instead of a
        // low-rank update plus scatter
        let transposed_dx = need_dx && self.stride == 1;
        let mut dx = (need_dx && !transposed_dx).then(|| Array4::zeros((n, self.ci, h, w)));
        let mut cols = vec![0.0f32; ckk * CONV_CHUNK * hw];
        let mut dpanel = vec![0.0f32; self.co * CONV_CHUNK * hw];
        let mut dcols = dx.is_some().then(|| vec![0.0f32; ckk * CONV_CHUNK * hw]);

        {
            let dw = grads.slot_mut(self.w, store).as_slice_mut().unwrap();
            let mut base = 0;
            while base < n {
                let cn = CONV_CHUNK.min(n - base);
                for j in 0..cn {
                    self.im2col(
                        &xs[(base + j) * in_item..(base + j + 1) * in_item],
                        h,
                        w,
                        &mut cols,
                        j * hw,
                        cn * hw,
                    );
                    // gather dout into channel-major panel
                    let src = &dos[(base + j) * out_item..(base + j + 1) * out_item];
                    for c in 0..self.co {
                        dpanel[c * cn * hw + j * hw..c * cn * hw + (j + 1) * hw]
                            .copy_from_slice(&src[c * hw..(c + 1) * hw]);
                    }
                }
                gemm_nt(
                    self.co,
                    cn * hw,
                    ckk,
                    1.0,
                    &dpanel[..self.co * cn * hw],
                    &cols[..ckk * cn * hw],
                    1.0,
                    dw,
                );
                if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols.as_mut()) {
                    gemm_tn(
                        ckk,
                        self.co,
                        cn * hw,
                        1.0,
                        &wm,
                        &dpanel[..self.co * cn * hw],
                        0.0,
                        &mut dcols[..ckk * cn * hw],
                    );
                    let dxs = dx.as_slice_mut().unwrap();
                    for j in 0..cn {
                        self.col2im(
                            dcols,
                            h,
                            w,
                            &mut dxs[(base + j) * in_item..(base + j + 1) * in_item],
                            j * hw,
                            cn * hw,
                        );
                    }
                }
                base += cn;
            }
        }
        if transposed_dx {
            // dx = conv(dout, W~) with W~[ci, co, ky, kx] = W[co, ci, K-1-ky, K-1-kx]
            // and pad K-1-p; output size works out to the input size for s=1
            let mut wt = vec![0.0f32; ckk * self.co / self.ci * self.ci];
            debug_assert_eq!(wt.len(), self.ci * self.co * self.k * self.k);
            for co in 0..self.co {
                for ci in 0..self.ci {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let src = ((co * self.ci + ci) * self.k + ky) * self.k + kx;
                            let dst = ((ci * self.co + co) * self.k + (self.k - 1 - ky)) * self.k
                                + (self.k - 1 - kx);
                            wt[dst] = wm[src];
                        }
                    }
                }
            }
            let tconv = Conv2d {
                w: self.w, // unused below; weights passed explicitly
                b: self.b,
                ci: self.co,
                co: self.ci,
                k: self.k,
                stride: 1,
                pad: self.k - 1 - self.pad,
            };
            let mut out = Array4::zeros((n, self.ci, h, w));
            let os = out.as_slice_mut().unwrap();
            let kk2 = self.co * self.k * self.k;
            let mut tcols = vec![0.0f32; kk2 * CONV_CHUNK * hw];
            let mut tpanel = vec![0.0f32; self.ci * CONV_CHUNK * hw];
            let mut base = 0;
            while base < n {
                let cn = CONV_CHUNK.min(n - base);
                for j in 0..cn {
                    tconv.im2col(
                        &dos[(base + j) * out_item..(base + j + 1) * out_item],
                        ho,
                        wo,
                        &mut tcols,
                        j * hw,
                        cn * hw,
                    );
                }
                gemm_nn(
                    self.ci,
                    kk2,
                    cn * hw,
                    1.0,
                    &wt,
                    &tcols[..kk2 * cn * hw],
                    0.0,
                    &mut tpanel[..self.ci * cn * hw],
                );
                for j in 0..cn {
                    let dst = &mut os[(base + j) * in_item..(base + j + 1) * in_item];
                    for c in 0..self.ci {
                        dst[c * hw..(c + 1) * hw]
                            .copy_from_slice(&tpanel[c * cn * hw + j * hw..c * cn * hw + (j + 1) * hw]);
                    }
                }
                base += cn;
            }
            dx = Some(out);
        }
        {
            let db = grads.slot_mut(self.b, store).as_slice_mut().unwrap();
            for i in 0..n {
                let doi = &dos[i * out_item..(i + 1) * out_item];
                for c in 0..self.co {
                    let mut acc = 0.0f32;
                    for &v in &doi[c * hw..(c + 1) * hw] {
                        acc += v;
                    }
                    db[c] += acc;
                }
            }
        }
        dx
    }

    /// Unfolds one image into the column panel. Row `r` of the panel has
    /// width `row_len`; this image's block starts at column `col_off`.
    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32], col_off: usize, row_len: usize) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * row_len + col_off;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = ci * h * w + iy as usize * w;
                        if s == 1 {
                            let ix0 = kx as isize - p as isize;
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).min(wo as isize)).max(0) as usize;
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if hi > lo {
                                let src = &x[src_row + (lo as isize + ix0) as usize
                                    ..src_row + (hi as isize + ix0) as usize];
                                dst[lo..hi].copy_from_slice(src);
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                dst[ox] = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    x[src_row + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds one image's column block back by scatter-add.
    fn col2im(&self, dcols: &[f32], h: usize, w: usize, dx: &mut [f32], col_off: usize, row_len: usize) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * row_len + col_off;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = ci * h * w + iy as usize * w;
                        let src = &dcols[row + oy * wo..row + (oy + 1) * wo];
                        if s == 1 {
                            let ix0 = kx as isize - p as isize;
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).min(wo as isize)).max(0) as usize;
                            for ox in lo..hi {
                                dx[dst_row + (ox as isize + ix0) as usize] += src[ox];
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx[dst_row + ix as usize] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut os[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let r0 = 2 * y * 2 * w + 2 * xx;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + 2 * w] = v;
                dst[r0 + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(dout: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let ds = dout.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let src = &ds[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut xs[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let r0 = 2 * y * w2 + 2 * xx;
                dst[y * w + xx] = src[r0] + src[r0 + 1] + src[r0 + w2] + src[r0 + w2 + 1];
            }
        }
    }
    dx
}

/// Global average pool over spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Array4<f32>) -> ndarray::Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = ndarray::Array2::zeros((n, c));
    let scale = 1.0 / (h * w) as f32;
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0f32;
            for v in x.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter() {
                acc += v;
            }
            out[[i, ch]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    dout: &ndarray::Array2<f32>,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (n, c) = dout.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = dout[[i, ch]] * scale;
            dx.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), ch)
                .fill(g);
        }
    }
    dx
}
