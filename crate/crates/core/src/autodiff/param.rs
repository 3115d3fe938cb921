use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    /// Dotted path; the first segment names the module group (`encoder`, `head`, ...).
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters enter graphs as constants and are skipped by the optimiser.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Duplicate(format!("parameter {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, frozen: false });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets `frozen` on every parameter whose name satisfies `pred`; returns how many matched.
    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), frozen: p.frozen })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| T::cast_from(rng.uniform_range(-bound, bound))).collect() }
}

/// `N(0, 1) / sqrt(d)` rows, used for embedding tables.
pub fn scaled_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let d = *shape.last().unwrap_or(&1) as f64;
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| T::cast_from(rng.normal() / d.sqrt())).collect() }
}
