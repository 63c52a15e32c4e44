use indexmap::IndexMap;
use rand::Rng;

use super::{NumericsError, Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Set when the last backward pass reached this parameter.
    pub touched: bool,
}

/// Named trainable tensors with gradient slots, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.params.insert_full(name, Param { value, grad, touched: false });
        Ok(ParamId(idx))
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericsError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.insert(name, Tensor::filled(shape, T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid param id")
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            p.touched = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.shape(), grad.shape());
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        p.touched = true;
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Copies every value from `other`; names and shapes must match exactly.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<(), NumericsError> {
        if self.params.len() != other.params.len() {
            return Err(NumericsError::Mismatch(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((name, p), (oname, o)) in self.params.iter_mut().zip(other.params.iter()) {
            if name != oname || p.value.shape() != o.value.shape() {
                return Err(NumericsError::Mismatch(format!("parameter {name} vs {oname}")));
            }
            p.value = o.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                (k.clone(), Param { value: p.value.cast(), grad: p.grad.cast(), touched: p.touched })
            })
            .collect();
        ParamStore { params }
    }
}
