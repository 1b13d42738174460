use std::collections::HashMap;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model. Buffers (e.g. batch-norm running statistics) are
/// parameters with `trainable == false`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    pub(crate) first_moment: Vec<T>,
    pub(crate) second_moment: Vec<T>,
    pub(crate) steps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    names: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), names: HashMap::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.names.contains_key(name), "duplicate parameter name '{name}'");
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![T::zero(); n],
            trainable,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            steps: 0,
        });
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
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
        self.names.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }
}
