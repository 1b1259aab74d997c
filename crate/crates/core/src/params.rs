//! Named parameter storage and its binding onto a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Flat name → tensor map. Names are dot-separated module paths such as
/// `fenet.block1.down.conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copy with every value rounded through `f32`, i.e. what a checkpoint
    /// round trip yields.
    pub fn rounded_to_f32(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
                .collect(),
        }
    }
}

/// Parameters bound to one graph; each name becomes a single leaf.
pub struct Ctx<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Ctx {
            graph,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.graph.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn input(&self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Gradient for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Parameter initializer.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Truncated normal (±2σ) with σ = 1/√fan_in.
    pub fn fan_in_normal(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = StandardNormal.sample(&mut *self.rng);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect();
        self.store.insert(name, Tensor::new(shape, data));
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], lo: f64, hi: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.store.insert(name, Tensor::new(shape, data));
    }

    pub fn tensor(&mut self, name: String, value: Tensor) {
        self.store.insert(name, value);
    }
}
