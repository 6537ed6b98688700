//! Named parameter storage shared by every trainable component.
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]; gradients live in a
//! parallel [`Gradients`] buffer indexed the same way. Keeping values,
//! gradients, and optimizer state in flat indexed vectors makes checkpointing,
//! optimizer steps, and finite-difference probes uniform.

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::container::TensorMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: ArrayD<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        for p in &self.params {
            m.insert(p.name.clone(), p.value.clone());
        }
        m
    }

    /// Overwrites every parameter from `map`, matching by name and shape.
    pub fn load_tensor_map(&mut self, map: &TensorMap) -> Result<()> {
        for p in &mut self.params {
            let t = map.get(&p.name).ok_or_else(|| {
                Error::data(format!("checkpoint is missing parameter '{}'", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::data(format!(
                    "checkpoint parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Order- and bit-sensitive digest of all parameters; used to verify that
    /// read-only passes leave weights untouched.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &ArrayD<f32>) {
        match &mut self.slots[id.0] {
            Some(g) => *g += grad,
            slot => *slot = Some(grad.clone()),
        }
    }

    /// Hands a zeroed (or existing) buffer to write into directly, avoiding a
    /// temporary when the caller computes the gradient in place.
    pub fn slot_mut(&mut self, id: ParamId, store: &ParamStore) -> &mut ArrayD<f32> {
        let slot = &mut self.slots[id.0];
        if slot.is_none() {
            *slot = Some(ArrayD::zeros(store.get(id).raw_dim()));
        }
        slot.as_mut().unwrap()
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.slots[id.0].as_ref()
    }

    /// L2 norm over every stored gradient; diagnostic for divergence aborts.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.slots.iter().flatten() {
            for &v in g.iter() {
                acc += (v as f64) * (v as f64);
            }
        }
        acc.sqrt()
    }
}
