//! Named parameters and their per-forward binding into the graph.
//!
//! Parameters are plain value buffers owned by a [`ParamStore`]. A [`Binder`]
//! turns each parameter into a graph leaf the first time it is requested during
//! a forward pass and hands out that same leaf on every later request, so a
//! parameter used at several sites is one node whose gradient is the sum of
//! the per-site contributions.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::dim("parameter", &name, n, value.len()));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id_of(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Number of distinct scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Hands out one graph leaf per parameter for the duration of a forward pass.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<HashMap<ParamId, Tensor>>,
    touched: RefCell<BTreeSet<ParamId>>,
}

impl<'s> Binder<'s> {
    /// Leaves collect gradients.
    pub fn trainable(store: &'s ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// Leaves are constants; nothing is recorded for them.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            bound: RefCell::new(HashMap::new()),
            touched: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.touched.borrow_mut().insert(id);
        self.bound
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| {
                let p = self.store.get(id);
                if self.trainable {
                    Tensor::variable(&p.shape, p.value.clone())
                } else {
                    Tensor::new(&p.shape, p.value.clone())
                }
                .expect("parameter shape is consistent")
            })
            .clone()
    }

    /// Parameters requested since the previous call.
    pub fn take_touched(&self) -> BTreeSet<ParamId> {
        std::mem::take(&mut *self.touched.borrow_mut())
    }

    /// Gradients of every bound parameter, in id order.
    pub fn gradients(&self) -> Vec<(ParamId, Vec<f64>)> {
        let bound = self.bound.borrow();
        let mut out: Vec<_> = bound
            .iter()
            .filter_map(|(id, t)| t.grad_vec().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl ParamStore {
    /// Adds gradients collected by a binder into the stored gradients.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
