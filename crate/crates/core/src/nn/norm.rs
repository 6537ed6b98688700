//! Group normalization over `[N, C, H, W]`.

use ndarray::{Array2, Array4, ArrayD, Axis};

use super::param::{Gradients, ParamId, ParamStore};

const EPS: f64 = 1e-6;

/// Largest divisor of `c` not exceeding 32, with at least two channels per
/// group. Groups of a single channel would normalize away the per-channel
/// timestep shift injected by residual blocks.
pub fn group_count(c: usize) -> usize {
    (1..=32.min(c / 2)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub groups: usize,
}

/// Per-(item, group) statistics cached for the backward pass.
#[derive(Debug)]
pub struct GnCache {
    pub mean: Array2<f32>,
    pub inv_std: Array2<f32>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::ones(vec![c]));
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(vec![c]));
        GroupNorm {
            gamma,
            beta,
            c,
            groups: group_count(c),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, GnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "group norm channels");
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let mut mean = Array2::zeros((n, self.groups));
        let mut inv_std = Array2::zeros((n, self.groups));
        let mut out = x.clone();
        let gamma = store.get(self.gamma).as_slice().unwrap();
        let beta = store.get(self.beta).as_slice().unwrap();
        let hw = h * w;
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xi = xi.as_slice().unwrap();
            for g in 0..self.groups {
                let span = &xi[g * cg * hw..(g + 1) * cg * hw];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for &v in span {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
                let mu = s / m;
                let var = (s2 / m - mu * mu).max(0.0);
                let istd = 1.0 / (var + EPS).sqrt();
                mean[[i, g]] = mu as f32;
                inv_std[[i, g]] = istd as f32;
                let oi = out.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (gamma[ch], beta[ch]);
                    for v in &mut oi[ch * hw..(ch + 1) * hw] {
                        *v = ((*v as f64 - mu) * istd) as f32 * ga + be;
                    }
                }
            }
        }
        (out, GnCache { mean, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        cache: &GnCache,
        dout: &Array4<f32>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let (n, c, h, w) = x.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let gamma = store.get(self.gamma).as_slice().unwrap().to_vec();
        {
            let dgamma = grads.slot_mut(self.gamma, store).as_slice_mut().unwrap();
            for i in 0..n {
                let xi = x.index_axis(Axis(0), i);
                let xi = xi.as_slice().unwrap();
                let di = dout.index_axis(Axis(0), i);
                let di = di.as_slice().unwrap();
                for g in 0..self.groups {
                    let (mu, istd) = (cache.mean[[i, g]], cache.inv_std[[i, g]]);
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let mut acc = 0.0f64;
                        for (xv, dv) in xi[ch * hw..(ch + 1) * hw]
                            .iter()
                            .zip(&di[ch * hw..(ch + 1) * hw])
                        {
                            acc += ((xv - mu) * istd) as f64 * *dv as f64;
                        }
                        dgamma[ch] += acc as f32;
                    }
                }
            }
        }
        {
            let dbeta = grads.slot_mut(self.beta, store).as_slice_mut().unwrap();
            for i in 0..n {
                let di = dout.index_axis(Axis(0), i);
                let di = di.as_slice().unwrap();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for &dv in &di[ch * hw..(ch + 1) * hw] {
                        acc += dv as f64;
                    }
                    dbeta[ch] += acc as f32;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xi = xi.as_slice().unwrap();
            let di = dout.index_axis(Axis(0), i);
            let di = di.as_slice().unwrap();
            let dxi = dx.index_axis_mut(Axis(0), i).into_slice_memory_order().unwrap();
            for g in 0..self.groups {
                let (mu, istd) = (cache.mean[[i, g]] as f64, cache.inv_std[[i, g]] as f64);
                // reductions of gamma*dout and gamma*dout*xhat over the group
                let mut sum_dxh = 0.0f64;
                let mut sum_dxh_xh = 0.0f64;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let ga = gamma[ch] as f64;
                    for (xv, dv) in xi[ch * hw..(ch + 1) * hw]
                        .iter()
                        .zip(&di[ch * hw..(ch + 1) * hw])
                    {
                        let xh = (*xv as f64 - mu) * istd;
                        let dxh = ga * *dv as f64;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                }
                let mean_dxh = sum_dxh / m;
                let mean_dxh_xh = sum_dxh_xh / m;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let ga = gamma[ch] as f64;
                    for ((xv, dv), ov) in xi[ch * hw..(ch + 1) * hw]
                        .iter()
                        .zip(&di[ch * hw..(ch + 1) * hw])
                        .zip(&mut dxi[ch * hw..(ch + 1) * hw])
                    {
                        let xh = (*xv as f64 - mu) * istd;
                        let dxh = ga * *dv as f64;
                        *ov = (istd * (dxh - mean_dxh - xh * mean_dxh_xh)) as f32;
                    }
                }
            }
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_param_grads, numeric_input_grad, randn4, seeded};

    #[test]
    fn group_count_prefers_32_with_group_size_at_least_two() {
        assert_eq!(group_count(128), 32);
        assert_eq!(group_count(64), 32);
        assert_eq!(group_count(32), 16);
        assert_eq!(group_count(48), 24);
        assert_eq!(group_count(7), 1);
    }

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let mut rng = seeded(9);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 8);
        let x = randn4((2, 8, 4, 4), &mut rng).mapv(|v| v * 3.0 + 0.5);
        let (y, _) = gn.forward(&store, &x);
        let cg = 8 / gn.groups;
        let m = (cg * 16) as f64;
        for i in 0..2 {
            for g in 0..gn.groups {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for cc in 0..cg {
                    for v in y
                        .index_axis(Axis(0), i)
                        .index_axis(Axis(0), g * cg + cc)
                        .iter()
                    {
                        s += *v as f64;
                        s2 += (*v as f64).powi(2);
                    }
                }
                assert!((s / m).abs() < 1e-4);
                assert!((s2 / m - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(10);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 4);
        // move gamma/beta off their init so their gradients are non-trivial
        for v in store.get_mut(gn.gamma).iter_mut() {
            *v = 1.3;
        }
        for v in store.get_mut(gn.beta).iter_mut() {
            *v = -0.2;
        }
        let x = randn4((2, 4, 3, 3), &mut rng);
        // weighted quadratic so dout isn't uniform
        let loss = |s: &ParamStore, xp: &Array4<f32>| -> f64 {
            let (y, _) = gn.forward(s, xp);
            y.iter()
                .enumerate()
                .map(|(i, &v)| (1.0 + (i % 5) as f64 * 0.1) * (v as f64).powi(2))
                .sum()
        };
        let (y, cache) = gn.forward(&store, &x);
        let mut dout = y.clone();
        for (i, v) in dout.iter_mut().enumerate() {
            *v = 2.0 * (1.0 + (i % 5) as f32 * 0.1) * *v;
        }
        let mut grads = Gradients::new(&store);
        let dx = gn
            .backward(&store, &x, &cache, &dout, &mut grads, true)
            .unwrap();
        check_param_grads(&mut store, &grads, &[gn.gamma, gn.beta], 8, 1e-3, 2e-3, |s| {
            loss(s, &x)
        });
        numeric_input_grad(&x, &dx, 8, 1e-2, 1e-2, |xp| loss(&store, xp));
    }
}
