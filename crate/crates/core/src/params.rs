//! Named parameter storage and graph binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// All trainable tensors, keyed by dotted name (`decoder.l0.q.w`, ...).
///
/// Iteration is in name order, which fixes the order of every reduction over
/// parameters (gradient norms, optimizer updates, checkpoint blobs).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, Error> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// FNV-1a over the names and bit patterns of every parameter whose name
    /// starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.params.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn init_weight(&mut self, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.init_normal(rng, name, &[fan_in, fan_out], std);
    }

    pub fn init_normal(&mut self, rng: &mut impl Rng, name: &str, shape: &[usize], std: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }
}

/// A graph plus the parameters bound into it.
///
/// Parameters are bound lazily on first use. In a training session they are
/// gradient-carrying leaves; in an inference session they are constants.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    frozen: Vec<String>,
}

impl<'a> Session<'a> {
    pub fn training(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
            frozen: Vec::new(),
        }
    }

    /// Training session in which parameters whose names start with any of
    /// `frozen` are bound as constants.
    pub fn training_except(store: &'a ParamStore, frozen: &[&str]) -> Self {
        Self {
            frozen: frozen.iter().map(|p| p.to_string()).collect(),
            ..Self::training(store)
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: false,
            frozen: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var, Error> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = if self.trainable && !frozen { self.g.param(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Parameter names bound so far, with their graph handles.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Backward from `loss`, returning gradients for every bound parameter that
    /// received one.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads, Error> {
        let grads: Gradients = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|t| (name.clone(), t.clone())))
            .collect())
    }
}

/// Adds `src` into `dst` entry-wise (in name order).
pub fn accumulate(dst: &mut ParamGrads, src: ParamGrads) {
    for (name, t) in src {
        match dst.get_mut(&name) {
            Some(existing) => existing.add_assign(&t),
            None => {
                dst.insert(name, t);
            }
        }
    }
}
