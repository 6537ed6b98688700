//! Fully connected layer over `[N, I]` feature matrices.

use ndarray::{Array2, ArrayD};
use rand::Rng;

use super::conv::{gemm_nn, gemm_nt, gemm_tn};
use super::init::Init;
use super::param::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub i: usize,
    pub o: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        i: usize,
        o: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.tensor(&[o, i], i, rng));
        let b = store.add(format!("{name}.bias"), ArrayD::zeros(vec![o]));
        Linear { w, b, i, o }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        let n = x.dim().0;
        assert_eq!(x.dim().1, self.i, "linear input dim");
        let mut out = Array2::zeros((n, self.o));
        let w = store.get(self.w).as_slice().unwrap();
        gemm_nt(
            n,
            self.i,
            self.o,
            1.0,
            x.as_slice().unwrap(),
            w,
            0.0,
            out.as_slice_mut().unwrap(),
        );
        let b = store.get(self.b).as_slice().unwrap();
        for mut row in out.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        out
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array2<f32>,
        dout: &Array2<f32>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Array2<f32>> {
        let n = x.dim().0;
        {
            let dw = grads.slot_mut(self.w, store).as_slice_mut().unwrap();
            gemm_tn(
                self.o,
                n,
                self.i,
                1.0,
                dout.as_slice().unwrap(),
                x.as_slice().unwrap(),
                1.0,
                dw,
            );
        }
        {
            let db = grads.slot_mut(self.b, store).as_slice_mut().unwrap();
            for row in dout.rows() {
                for (g, &d) in db.iter_mut().zip(row.iter()) {
                    *g += d;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Array2::zeros((n, self.i));
        let w = store.get(self.w).as_slice().unwrap();
        gemm_nn(
            n,
            self.o,
            self.i,
            1.0,
            dout.as_slice().unwrap(),
            w,
            0.0,
            dx.as_slice_mut().unwrap(),
        );
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_param_grads, randn2, seeded};

    #[test]
    fn forward_matches_naive() {
        let mut rng = seeded(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 3, Init::He, &mut rng);
        let x = randn2((2, 4), &mut rng);
        let y = lin.forward(&store, &x);
        let w = store.get(lin.w);
        let b = store.get(lin.b);
        for n in 0..2 {
            for o in 0..3 {
                let mut acc = b[[o]];
                for i in 0..4 {
                    acc += x[[n, i]] * w[[o, i]];
                }
                assert!((y[[n, o]] - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 5, 4, Init::He, &mut rng);
        let x = randn2((3, 5), &mut rng);
        let loss = |s: &ParamStore| -> f64 {
            lin.forward(s, &x).iter().map(|&v| (v as f64).powi(2)).sum()
        };
        let y = lin.forward(&store, &x);
        let mut grads = Gradients::new(&store);
        lin.backward(&store, &x, &y.mapv(|v| 2.0 * v), &mut grads, false);
        check_param_grads(&mut store, &grads, &[lin.w, lin.b], 10, 1e-3, 2e-3, loss);
    }
}
