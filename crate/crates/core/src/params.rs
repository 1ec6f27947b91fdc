//! Named, ordered collections of learnable tensors.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Shape4, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter name {name}")));
        }
        let grad = vec![T::zero(); value.len()];
        let (idx, _) = self.params.insert_full(
            name.clone(),
            Parameter {
                name,
                value,
                grad,
                trainable: true,
            },
        );
        Ok(ParamId(idx))
    }

    /// He-normal convolution weight (`stddev = sqrt(2 / fan_in)`).
    pub fn insert_conv_weight(
        &mut self,
        name: impl Into<String>,
        shape: Shape4,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let fan_in = (shape.c * shape.h * shape.w) as f64;
        let t = Tensor::randn_with(shape, rng, (2.0 / fan_in).sqrt())?;
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(Shape4::new(1, len, 1, 1)?)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.values().map(Parameter::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .values()
            .filter(|p| p.name.starts_with(prefix))
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            grad: p.grad.iter().map(|&g| U::from_f64_lossy(g.as_f64())).collect(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
