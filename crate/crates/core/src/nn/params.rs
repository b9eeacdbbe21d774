use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    trainable: bool,
}

/// Named weights and buffers of one network.
///
/// Buffers (running statistics, power-iteration vectors) are stored alongside
/// weights so a checkpoint captures the full inference state.
#[derive(Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    requires_grad: bool,
    uid: usize,
}

static NEXT_UID: AtomicUsize = AtomicUsize::new(1);

fn next_uid() -> usize {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Clone> Clone for ParamStore<T> {
    // a clone is a distinct store so both can feed the same graph
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            requires_grad: self.requires_grad,
            uid: next_uid(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            requires_grad: true,
            uid: next_uid(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            grad: None,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub(crate) fn uid(&self) -> usize {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Whether graphs built from this store track gradients of its weights.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Marks every weight as non-trainable.
    pub fn freeze(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
        self.requires_grad = false;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(acc) => acc.add_assign(g),
            None => e.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// `(name, dims, values)` for every entry, in insertion order.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.value.dims().to_vec(),
                    e.value.data().iter().map(|v| v.to_f64().unwrap()).collect(),
                )
            })
            .collect()
    }

    /// Overwrites values by name; every entry must be present with matching dims.
    pub fn import<'a>(
        &mut self,
        lookup: impl Fn(&str) -> Option<(&'a [usize], Vec<f64>)>,
    ) -> Result<()> {
        for e in &mut self.entries {
            let (dims, data) =
                lookup(&e.name).ok_or_else(|| Error::BadParameter(e.name.clone()))?;
            if dims != e.value.dims() || data.len() != e.value.numel() {
                return Err(Error::BadParameter(e.name.clone()));
            }
            for (dst, src) in e.value.data_mut().iter_mut().zip(data) {
                *dst = T::lit(src);
            }
        }
        Ok(())
    }
}
