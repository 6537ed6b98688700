//! Adaptive moment estimation with an optional cosine learning-rate decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::container::TensorMap;
use crate::error::{Error, Result};

use super::param::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the planned step count.
    Cosine,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamOpts {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Total planned optimizer steps; only read by the cosine schedule.
    pub total_steps: usize,
}

impl AdamOpts {
    pub fn with_lr(lr: f64) -> Self {
        AdamOpts {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            total_steps: 0,
        }
    }

    pub fn cosine(lr: f64, total_steps: usize) -> Self {
        AdamOpts {
            schedule: LrSchedule::Cosine,
            total_steps,
            ..Self::with_lr(lr)
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub opts: AdamOpts,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, opts: AdamOpts) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect();
        let v = store
            .ids()
            .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect();
        Adam { opts, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Effective learning rate for the upcoming step.
    pub fn current_lr(&self) -> f64 {
        match self.opts.schedule {
            LrSchedule::Constant => self.opts.lr,
            LrSchedule::Cosine => {
                let total = self.opts.total_steps.max(1) as f64;
                let frac = (self.step as f64 / total).min(1.0);
                self.opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// Applies one update. Parameters with no gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - self.opts.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.opts.beta2.powi(self.step as i32);
        let (b1, b2) = (self.opts.beta1 as f32, self.opts.beta2 as f32);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            let pm = p.as_slice_mut().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for i in 0..pm.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                let mhat = ms[i] as f64 / bc1;
                let vhat = vs[i] as f64 / bc2;
                let mut upd = mhat / (vhat.sqrt() + self.opts.eps);
                if self.opts.weight_decay != 0.0 {
                    upd += self.opts.weight_decay * pm[i] as f64;
                }
                pm[i] = (pm[i] as f64 - lr * upd) as f32;
            }
        }
    }

    /// Serializes moment buffers for exact training resumption.
    pub fn state_to_tensor_map(&self, store: &ParamStore) -> TensorMap {
        let mut map = TensorMap::new();
        for id in store.ids() {
            map.insert(format!("adam.m.{}", store.name(id)), self.m[id.0].clone());
            map.insert(format!("adam.v.{}", store.name(id)), self.v[id.0].clone());
        }
        map
    }

    pub fn load_state(&mut self, store: &ParamStore, map: &TensorMap, step: u64) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id);
            let m = map
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::data(format!("optimizer state missing adam.m.{name}")))?;
            let v = map
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::data(format!("optimizer state missing adam.v.{name}")))?;
            self.m[id.0] = m.clone();
            self.v[id.0] = v.clone();
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{Gradients, ParamStore};
    use ndarray::ArrayD;

    #[test]
    fn zero_lr_leaves_weights_bitwise() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(vec![4], 0.5f32));
        let before = store.get(id).clone();
        let mut adam = Adam::new(&store, AdamOpts::with_lr(0.0));
        let mut grads = Gradients::new(&store);
        grads.accumulate(id, &ArrayD::from_elem(vec![4], 1.0f32));
        adam.step(&mut store, &grads);
        for (a, b) in before.iter().zip(store.get(id).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(vec![1], 5.0f32));
        let mut adam = Adam::new(&store, AdamOpts::with_lr(0.1));
        for _ in 0..500 {
            let w = store.get(id)[[0]];
            let mut grads = Gradients::new(&store);
            grads.accumulate(id, &ArrayD::from_elem(vec![1], 2.0 * w));
            adam.step(&mut store, &grads);
        }
        assert!(store.get(id)[[0]].abs() < 0.05);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let store = ParamStore::new();
        let mut adam = Adam::new(&store, AdamOpts::cosine(1.0, 100));
        assert!((adam.current_lr() - 1.0).abs() < 1e-12);
        adam.step = 50;
        assert!((adam.current_lr() - 0.5).abs() < 1e-12);
        adam.step = 100;
        assert!(adam.current_lr() < 1e-12);
    }
}
