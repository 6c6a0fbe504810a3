use std::cell::RefCell;

use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        debug_assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn congruent(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Lazily records parameters on a graph, once each, as trainable leaves or
/// constants.
pub struct Binder<'a, T: Real> {
    graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            graph,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.graph.leaf(value, self.trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Binds every parameter to an existing variable, in store order.
    pub fn with_vars(graph: &'a Graph<T>, store: &'a ParamStore<T>, vars: &[Var]) -> Self {
        debug_assert_eq!(vars.len(), store.len());
        Binder {
            graph,
            store,
            trainable: true,
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
        }
    }

    /// Releases the graph borrow so the graph can be consumed by `backward`.
    pub fn finish(self) -> Bound {
        Bound {
            vars: self.vars.into_inner(),
        }
    }
}

/// Parameter variables recorded by a finished [`Binder`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Gradients aligned with the store; parameters not used in the forward
    /// pass get zeros.
    pub fn gradients<T: Real>(&self, store: &ParamStore<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}
