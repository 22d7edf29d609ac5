use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Flat map from canonical parameter path (e.g. `text.layers.0.attn.q.weight`)
/// to a 2-D array. Weights use the row-vector convention `y = x W + b`, so a
/// weight has shape `(in, out)` and a bias `(1, out)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&Mat> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Mat) {
        self.tensors.insert(path.into(), value);
    }

    pub fn remove(&mut self, path: &str) -> Option<Mat> {
        self.tensors.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Keeps only the paths for which `keep` returns true; returns how many were dropped.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) -> usize {
        let before = self.tensors.len();
        self.tensors.retain(|k, _| keep(k));
        before - self.tensors.len()
    }

    /// Errors unless `path` exists with exactly `shape`.
    pub fn expect_shape(&self, path: &str, shape: (usize, usize)) -> Result<()> {
        match self.tensors.get(path) {
            None => Err(Error::Config(format!("missing parameter `{path}`"))),
            Some(m) if m.dim() != shape => Err(Error::Config(format!(
                "parameter `{path}` has shape {:?}, expected {:?}",
                m.dim(),
                shape
            ))),
            Some(_) => Ok(()),
        }
    }
}

/// Seeded initializer that fills a [`ParamStore`] in declaration order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier/Glorot uniform weight.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Mat {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, limit)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, limit: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-limit..=limit))
    }

    pub fn linear(&mut self, store: &mut ParamStore, path: &str, inp: usize, out: usize) {
        store.insert(format!("{path}.weight"), self.xavier(inp, out));
        let bias = self.uniform(1, out, 1.0 / (inp as f64).sqrt());
        store.insert(format!("{path}.bias"), bias);
    }

    pub fn layer_norm(&mut self, store: &mut ParamStore, path: &str, dim: usize) {
        store.insert(format!("{path}.gamma"), Mat::ones((1, dim)));
        store.insert(format!("{path}.beta"), Mat::zeros((1, dim)));
    }
}
