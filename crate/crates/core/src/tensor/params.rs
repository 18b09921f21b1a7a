//! Named trainable parameters with gradient accumulation slots.

use std::collections::HashMap;

use rand::Rng;

use super::{Scalar, Tensor, TensorError};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Registry of trainable tensors addressed by unique dotted names.
///
/// Layers hold [`ParamId`]s; each forward pass binds the current values into
/// a fresh [`super::Graph`]. Gradients accumulate here between optimizer
/// steps so several micro-batches can share one update.
pub struct ParamStore<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    grads: Vec<Tensor<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), grads: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a tensor under a unique name.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(tensor.shape().to_vec()));
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = E::zero());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight tensor with entries uniform in `±1/sqrt(fan_in)`.
pub fn uniform_fan_in<E: Scalar, R: Rng>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<E> {
    assert!(fan_in > 0, "uniform_fan_in: fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let shape = shape.into();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("constructed length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    #[test]
    fn rejects_duplicate_names() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::zeros(vec![2])).unwrap();
        let err = store.register("w", Tensor::zeros(vec![2])).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn counts_scalars_across_params() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", Tensor::zeros(vec![2, 3])).unwrap();
        store.register("b", Tensor::zeros(vec![5])).unwrap();
        assert_eq!(store.num_scalars(), 11);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn fan_in_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f64> = uniform_fan_in(vec![64, 9], 9, &mut rng);
        let bound = 1.0 / 3.0;
        assert!(w.data().iter().all(|v| v.abs() < bound));
        // With 576 draws the extremes should come close to the bound.
        let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.9 * bound, "max |w| = {max}");
    }
}
