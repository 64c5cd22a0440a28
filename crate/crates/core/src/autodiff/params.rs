use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S = f32> {
    pub name: String,
    pub value: Arc<Tensor<S>>,
    pub grad: Tensor<S>,
}

/// Named non-trainable state, e.g. batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<S = f32> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Owns every parameter and buffer of one model. Names are dotted paths and
/// unique across both tables.
#[derive(Debug)]
pub struct ParamStore<S = f32> {
    uid: u64,
    params: Vec<Parameter<S>>,
    buffers: Vec<Buffer<S>>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    /// Clones get a fresh identity so graphs never confuse the replica with the original.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            names: self.names.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        self.claim(name, Slot::Param(self.params.len()))?;
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.to_string(), value: Arc::new(value), grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<S>) -> Result<BufferId> {
        self.claim(name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name: name.to_string(), value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    /// Mutable access; copies on write if a live graph still shares the tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<S> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<S> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, g: &[S]) {
        for (a, &b) in self.params[index].grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Parameters then buffers, in registration order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<S>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &*p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect()
    }

    /// Overwrites a parameter or buffer by name; the shape must match.
    pub fn set_named(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = *self.names.get(name).ok_or_else(|| Error::Invalid(format!("unknown tensor `{name}`")))?;
        let target = match slot {
            Slot::Param(i) => Arc::make_mut(&mut self.params[i].value),
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if target.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}`: stored shape {:?}, loaded {:?}",
                target.shape(),
                value.shape()
            )));
        }
        *target = value;
        Ok(())
    }

    /// Same names and ids with a different element type (fresh identity).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: Arc::new(p.value.cast()), grad: p.grad.cast() })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: b.value.cast() }).collect(),
            names: self.names.clone(),
        }
    }
}
