//! Named learnable parameters.

use std::collections::HashMap;

use rand::Rng;

use super::{Tensor, TensorError};

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with gradient storage. Names are dotted paths such as
/// `hin.long.layer2.Wk`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of uniquely named parameters. Iteration order is
/// insertion order, which makes optimizer state and checkpoints stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.params[pid.0].name
    }

    pub fn tensor(&self, pid: ParamId) -> &Tensor {
        &self.params[pid.0].tensor
    }

    pub fn tensor_mut(&mut self, pid: ParamId) -> &mut Tensor {
        &mut self.params[pid.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Glorot/Xavier uniform init: Uniform(±√(6/(fan_in+fan_out))).
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized data")
}

/// Normal(0, std²) init, used for seed matrices and embedding tables.
pub fn normal_init<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized data")
}
