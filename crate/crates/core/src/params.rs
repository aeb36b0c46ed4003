//! Named parameter registry shared by all model modules.
//!
//! Registration order is the registry order used for checkpoint blobs and
//! gradient reduction, so construction code must register in a fixed order.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Weight decay applies to matrix-shaped parameters only.
    pub decay: bool,
    /// Cleared for frozen parameter groups (phase-A training).
    pub trainable: bool,
}

pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<S>, decay: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            decay,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        self.register(name, Tensor::randn(shape, std, rng), shape.len() >= 2)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape), shape.len() >= 2)
    }

    /// He-style init for weight matrices feeding a nonlinearity.
    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.randn(name, shape, std, rng)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Mark parameters trainable iff `pred(name)`; returns how many are on.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut on = 0;
        for e in self.entries.iter_mut() {
            e.trainable = pred(&e.name);
            if e.trainable {
                on += 1;
            }
        }
        on
    }

    /// Insert (or reuse) the graph leaf for a parameter.
    pub fn var(&self, g: &mut Graph<S>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        g.keyed_leaf(id.0, &e.tensor, e.trainable)
    }

    /// Collect per-parameter gradients from a finished backward pass,
    /// accumulating into `acc` (registry order, fixed).
    pub fn collect_grads(&self, g: &Graph<S>, acc: &mut [Option<Tensor<S>>]) {
        assert_eq!(acc.len(), self.entries.len());
        for (key, var) in g.keyed_leaf_vars() {
            if let Some(grad) = g.grad(var) {
                match &mut acc[key] {
                    Some(t) => t.add_assign(grad),
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
        }
    }
}
