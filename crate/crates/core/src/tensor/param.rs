use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Scalar, Tensor, TensorError};

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Same names and values in another precision; gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }

    /// Overwrites the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Seeded uniform initializer: `U(-a, a)` with `a = 1/√fan_in`.
#[derive(Clone, Debug)]
pub struct Initializer {
    rng: Xoshiro256PlusPlus,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-a..a) as f32)
    }
}

/// Declared shape of one named parameter and the fan-in used to initialize it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in,
        }
    }
}

/// Registers freshly initialized tensors for `specs`, in order.
pub fn register_specs(
    specs: &[ParamSpec],
    params: &mut ParameterSet<f32>,
    init: &mut Initializer,
) -> Result<Vec<ParamId>, TensorError> {
    specs
        .iter()
        .map(|s| params.register(s.name.clone(), init.uniform(&s.shape, s.fan_in)))
        .collect()
}

/// Looks up existing parameters for `specs`, checking shapes.
pub fn bind_specs<T: Scalar>(specs: &[ParamSpec], params: &ParameterSet<T>) -> Result<Vec<ParamId>, TensorError> {
    specs
        .iter()
        .map(|s| {
            let id = params
                .id(&s.name)
                .ok_or_else(|| TensorError::UnknownParameter(s.name.clone()))?;
            if params.value(id).shape() != s.shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "bind",
                    lhs: s.shape.clone(),
                    rhs: params.value(id).shape().to_vec(),
                });
            }
            Ok(id)
        })
        .collect()
}
