//! Named parameter storage with deterministic initialisation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An ordered collection of named weight matrices.
#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Register a matrix under `name`; panics on duplicates.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Slot index for `name`; panics if absent (a programming error).
    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.values[idx]
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.value(self.idx(name))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) {
        let idx = self.idx(name);
        assert_eq!(
            self.values[idx].dim(),
            value.dim(),
            "shape change for parameter {}",
            self.names[idx]
        );
        self.values[idx] = value;
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Names (insertion order) restricted to a `prefix/` namespace.
    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names()
            .filter(move |n| n.starts_with(prefix) && n.as_bytes().get(prefix.len()) == Some(&b'/'))
    }

    /// Copy every `src` entry that exists here, checking shapes.
    pub fn load_from(&mut self, src: &ParamSet) -> Result<()> {
        for (name, &src_idx) in &src.index {
            let Some(&dst_idx) = self.index.get(name) else {
                continue;
            };
            if self.values[dst_idx].dim() != src.values[src_idx].dim() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.values[src_idx].dim(),
                    self.values[dst_idx].dim()
                )));
            }
            self.values[dst_idx] = src.values[src_idx].clone();
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Uniform(-a, a) matrix with a = 1/sqrt(fan_in); rows = fan_in.
pub fn init_matrix(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let a = 1.0 / (fan_in as f64).sqrt();
    let mut m = Array2::zeros((fan_in, fan_out));
    for v in m.iter_mut() {
        *v = rng.gen_range(-a..a);
    }
    params.insert(name, m);
}

fn init_bias(params: &mut ParamSet, name: &str, fan_in: usize, dim: usize, rng: &mut ChaCha8Rng) {
    let a = 1.0 / (fan_in as f64).sqrt();
    let mut b = Array2::zeros((1, dim));
    for v in b.iter_mut() {
        *v = rng.gen_range(-a..a);
    }
    params.insert(name, b);
}

/// Weight `{name}/w` plus bias row `{name}/b`, both uniform in fan-in scale.
pub fn init_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    init_matrix(params, &format!("{name}/w"), fan_in, fan_out, rng);
    init_bias(params, &format!("{name}/b"), fan_in, fan_out, rng);
}

/// Two-layer MLP block `{name}/{w1,b1,w2,b2}` for [`crate::nn::mlp2`].
pub fn init_mlp2(
    params: &mut ParamSet,
    name: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    init_matrix(params, &format!("{name}/w1"), d_in, d_hidden, rng);
    init_bias(params, &format!("{name}/b1"), d_in, d_hidden, rng);
    init_matrix(params, &format!("{name}/w2"), d_hidden, d_out, rng);
    init_bias(params, &format!("{name}/b2"), d_hidden, d_out, rng);
}

/// Batch-norm affine block: gamma = 1, beta = 0.
pub fn init_bn(params: &mut ParamSet, name: &str, dim: usize) {
    params.insert(&format!("{name}/gamma"), Array2::ones((1, dim)));
    params.insert(&format!("{name}/beta"), Array2::zeros((1, dim)));
}
