use std::collections::BTreeMap;

use rand::Rng;

use super::graph::Grads;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// Named parameters with gradient accumulators and optimizer moments.
///
/// Iteration is lexicographic by name, so every traversal (optimizer
/// updates, checkpoint writes, gradient checks) is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    values: BTreeMap<String, Tensor<S>>,
    grads: BTreeMap<String, Tensor<S>>,
    pub(crate) moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
    pub(crate) step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    /// Store without gradient slots, e.g. a loaded checkpoint used only for
    /// inference. Optimizer steps on it fail until [`Self::enable_grads`].
    pub fn frozen(values: BTreeMap<String, Tensor<S>>) -> Self {
        Self {
            values,
            ..Self::new()
        }
    }

    pub fn enable_grads(&mut self) {
        for (name, v) in &self.values {
            self.grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(v.dims()));
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter '{name}'")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.dims()));
        self.values.insert(name, value);
        Ok(())
    }

    /// Weight initialized uniform in ±1/√fan_in.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert_range(name, dims, bound, rng)
    }

    pub fn insert_range<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| S::of(rng.gen_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(dims.to_vec(), data)?)
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, dims: &[usize], v: f64) -> Result<()> {
        self.insert(name, Tensor::filled(dims, S::of(v)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.values.get(name)
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter '{name}'")))?;
        if slot.dims() != value.dims() {
            return Err(shape_err!(
                "parameter '{name}' is {:?}, got {:?}",
                slot.dims(),
                value.dims()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.values
    }

    pub fn into_values(self) -> BTreeMap<String, Tensor<S>> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adds `scale ·` every matching gradient in `grads` to the accumulators.
    /// Gradients of parameters not held by this store are ignored.
    pub fn accumulate(&mut self, grads: &Grads<S>, scale: S) -> Result<()> {
        for (name, g) in grads.params() {
            if let Some(slot) = self.grads.get_mut(name) {
                if slot.dims() != g.dims() {
                    return Err(shape_err!("gradient for '{name}' has wrong shape"));
                }
                slot.add_scaled(g, scale);
            } else if self.values.contains_key(name) {
                return Err(Error::State(format!("no gradient slot for '{name}'")));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.values_mut().for_each(|g| g.fill(S::zero()));
    }

    #[cfg(test)]
    pub(crate) fn grads_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.grads
    }

    pub(crate) fn split_for_update(
        &mut self,
    ) -> (
        &mut BTreeMap<String, Tensor<S>>,
        &mut BTreeMap<String, Tensor<S>>,
        &mut BTreeMap<String, (Tensor<S>, Tensor<S>)>,
    ) {
        (&mut self.values, &mut self.grads, &mut self.moments)
    }

    /// Same parameters in another precision, with fresh gradient slots.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in &self.values {
            out.insert(k.clone(), v.cast()).expect("unique names");
        }
        out
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k.clone(), v.clone()).expect("unique names");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use rand::SeedableRng;

    #[test]
    fn every_parameter_gets_a_grad_slot() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        ps.insert_uniform("b.w", &[3, 2], 3, &mut rng).unwrap();
        ps.insert_filled("a.b", &[2], 0.0).unwrap();
        assert_eq!(ps.names().collect::<Vec<_>>(), vec!["a.b", "b.w"]);
        assert_eq!(ps.grad("b.w").unwrap().dims(), &[3, 2]);
        assert!(ps.insert_filled("a.b", &[2], 0.0).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        ps.insert_uniform("w", &[16, 8], 16, &mut rng).unwrap();
        assert!(ps.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn accumulate_adds_scaled_gradients() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let y = g.mul(w, w).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        ps.accumulate(&grads, 0.5).unwrap();
        ps.accumulate(&grads, 0.5).unwrap();
        assert_eq!(ps.grad("w").unwrap().item(), 6.0);
    }
}
