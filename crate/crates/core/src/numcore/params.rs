use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters in creation order, addressed by dotted paths such as
/// `layers.3.ffn1.fc1.w`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_grad()));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| {
                    let mut leaf = Tensor::new(t.shape(), t.data().to_vec()).expect("valid");
                    leaf.requires_grad = t.requires_grad;
                    tape.leaf(leaf)
                })
                .collect(),
        )
    }

    /// Copies tape gradients into each parameter's gradient slot
    /// (zeros for parameters the loss did not reach).
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &mut Gradients<S>) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            let g = grads
                .take(bound.0[i])
                .unwrap_or_else(|| vec![S::zero(); t.len()]);
            t.grad = Some(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad = None;
        }
    }

    /// Replaces values by name; names and shapes must match exactly.
    pub fn load_values(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in &mut self.entries {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load_values", t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
