//! Named parameter storage and seeded initialization.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::keyed_rng;
use crate::tensor::{numel, Tensor};

/// Every learnable array of a network, addressable by a stable name.
///
/// Iteration order is the lexicographic name order, which fixes the order
/// of optimizer updates and checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", alloc::format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Keeps only the arrays whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    /// Binds `name` as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }
}

/// Builds a [`Params`] set with reproducible initial values.
///
/// Each array draws from its own stream keyed by `(seed, name)`, so adding
/// or removing one parameter leaves the others' initial values unchanged.
#[derive(Debug)]
pub struct ParamInit {
    seed: u64,
    params: Params,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            seed,
            params: Params::new(),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> &mut Self {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let mut rng = keyed_rng(self.seed, name);
        let data = (0..numel(shape)).map(|_| rng.random_range(-bound..bound)).collect();
        self.params.insert(name.to_string(), Tensor::from_parts(shape.to_vec(), data));
        self
    }

    /// A `[fan_in, fan_out]` weight and `[fan_out]` bias named `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> &mut Self {
        self.uniform(&alloc::format!("{prefix}.w"), &[fan_in, fan_out], fan_in);
        self.uniform(&alloc::format!("{prefix}.b"), &[fan_out], fan_in)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> &mut Self {
        self.params
            .insert(name.to_string(), Tensor::from_parts(shape.to_vec(), alloc::vec![value; numel(shape)]));
        self
    }

    pub fn finish(self) -> Params {
        self.params
    }
}
