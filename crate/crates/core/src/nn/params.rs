use std::collections::HashMap;

use super::{numel, NnError, Real, Result, Tensor};
use super::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns every parameter of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, init: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let shape = init.shape().to_vec();
        let value = init.into_data();
        self.params.push(Param {
            name: name.clone(),
            grad: vec![T::zero(); value.len()],
            shape,
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients of one backward pass. Parameters the
    /// pass did not reach are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Replaces the value of the named parameter, checking its shape.
    pub fn set_value(&mut self, name: &str, shape: &[usize], value: Vec<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.shape != shape || numel(shape) != value.len() {
            return Err(NnError::Format(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {shape:?}",
                p.shape
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|&v| U::of(v.as_f64())).collect(),
                    grad: vec![U::zero(); p.value.len()],
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Weight initialisers. Fan-in scaled uniform for conv/linear weights,
/// standard normal for embeddings.
pub mod init {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::nn::{Real, Tensor};

    pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
    }

    pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }
}
