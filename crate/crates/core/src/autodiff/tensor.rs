use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of 64-bit reals with an optional gradient
/// buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, values: vec![0.0; numel], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], values: vec![v], grad: None }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Gradient buffer; zeros are allocated lazily on first access.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Named parameter tensors with accumulated gradients — the single shared
/// weight container for the encoder and both proposal-stage heads. Names
/// are unique and shapes are fixed after registration; gradient
/// accumulation is additive and cleared explicitly via [`zero_grads`].
///
/// [`zero_grads`]: ParamStore::zero_grads
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialized uniform in
    /// `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter {name:?} registered twice")));
        }
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        let mut t = Tensor::new(shape, values)?;
        t.grad_mut(); // allocate the gradient buffer up front
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    /// Inserts a fully-formed tensor (checkpoint loading).
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) {
        tensor.grad_mut();
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if grad.len() != t.numel() {
            return Err(Error::Shape(format!(
                "gradient for {name:?} has {} entries, parameter has {}",
                grad.len(),
                t.numel()
            )));
        }
        for (g, d) in t.grad_mut().iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }
}
