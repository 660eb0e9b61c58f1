//! Named parameter store and gradient accumulation.
//!
//! Models are built as plain structs of `ParamId`s; the tensors themselves
//! live here in insertion order, which is also the checkpoint order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copy of every tensor, in id order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    /// Restore a snapshot taken from this same parameter set.
    pub fn restore(&mut self, snap: &[Tensor]) {
        assert_eq!(snap.len(), self.tensors.len(), "snapshot from a different model");
        for (dst, src) in self.tensors.iter_mut().zip(snap) {
            assert_eq!(dst.shape(), src.shape(), "snapshot from a different model");
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    /// Replace a tensor's contents, keeping its shape. Used by checkpoint load.
    pub fn load_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name} in checkpoint")))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?} does not match model {:?}",
                t.shape(),
                cur.shape()
            )));
        }
        *cur = t;
        Ok(())
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient buffers, shaped like the parameter store.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(params: &Params) -> Self {
        GradStore { grads: params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn acc(&mut self, id: ParamId, data: &[f64]) {
        let g = &mut self.grads[id.0];
        debug_assert_eq!(g.len(), data.len());
        for (o, &v) in g.data_mut().iter_mut().zip(data) {
            *o += v;
        }
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}

/// Uniform Xavier/Glorot init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.gen_range(-a..a);
    }
    t
}
