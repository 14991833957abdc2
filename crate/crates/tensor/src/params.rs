use crate::graph::{Gradients, Graph, Var};
use crate::{Float, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars across every tensor.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds per-parameter gradients collected by a [`Binder`].
    pub fn accumulate(&mut self, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(TensorError::Invalid(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.cast::<U>().with_requires_grad(t.requires_grad()))
                .collect(),
        }
    }
}

/// Maps a [`ParamSet`] onto one graph, inserting each parameter as a leaf the
/// first time it is used.
pub struct Binder<'p, T: Float> {
    params: &'p ParamSet<T>,
    vars: Vec<Option<Var>>,
}

impl<'p, T: Float> Binder<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = g.leaf(t.clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients per parameter, in [`ParamSet`] order.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.get(v)).map(<[T]>::to_vec)).collect()
    }
}
