//! Named parameter and buffer storage shared by every network module.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
///
/// Names are canonical dotted paths such as `backbone.stage2.branch1.unit0.conv1.weight`;
/// they are the keys used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    param_index: BTreeMap<String, usize>,
    buffer_index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.param_index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.param_index.insert(name.to_string(), self.params.len());
        self.params.push(NamedTensor {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        assert!(
            !self.buffer_index.contains_key(name),
            "duplicate buffer name {name}"
        );
        self.buffer_index.insert(name.to_string(), self.buffers.len());
        self.buffers.push(NamedTensor {
            name: name.to_string(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    /// Parameter drawn from `N(0, std^2)`.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add_param(name, value)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied().map(ParamId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count over trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored name must be supplied
    /// exactly once with a matching shape.
    pub fn load_values(
        &mut self,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        fn fill(
            kind: &str,
            slots: &mut [NamedTensor],
            mut values: BTreeMap<String, Tensor>,
        ) -> Result<()> {
            for slot in slots.iter_mut() {
                let v = values.remove(&slot.name).ok_or_else(|| {
                    Error::Checkpoint(format!("{kind} `{}` missing from archive", slot.name))
                })?;
                if v.shape() != slot.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{kind} `{}` has shape {:?}, model expects {:?}",
                        slot.name,
                        v.shape(),
                        slot.value.shape()
                    )));
                }
                slot.value = v;
            }
            if let Some(extra) = values.keys().next() {
                return Err(Error::Checkpoint(format!(
                    "archive holds unknown {kind} `{extra}`"
                )));
            }
            Ok(())
        }
        fill("parameter", &mut self.params, params)?;
        fill("buffer", &mut self.buffers, buffers)
    }
}
