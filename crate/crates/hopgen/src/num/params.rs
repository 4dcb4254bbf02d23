use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::num::graph::{Graph, Var};
use crate::num::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Vec<f64>>;

/// Named trainable parameters in insertion order. Iteration order is
/// deterministic, which keeps optimizer updates and serialized
/// checkpoints reproducible.
#[derive(Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a tensor as a trainable parameter. Re-registering a name
    /// is a contract violation.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(
                "param_store",
                format!("duplicate parameter {name}"),
            ));
        }
        self.params.insert(name, t.param());
        Ok(())
    }

    /// Register a non-trainable tensor: it binds into graphs like any
    /// parameter but never receives gradients (frozen embeddings).
    pub fn insert_frozen(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(
                "param_store",
                format!("duplicate parameter {name}"),
            ));
        }
        self.params.insert(name, t.frozen());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// Add a gradient map (as returned by [`Session::backward`]) into the
    /// per-parameter gradient slots.
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g);
        }
        Ok(())
    }

    /// L2 norm over all stored gradients, treating missing ones as zero.
    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for t in self.params.values_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }

    /// First parameter whose values are not all finite, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters bind into the graph lazily and at most once each, so a
/// parameter used in several places accumulates one summed gradient.
/// The store is borrowed immutably: evaluation-only forwards need no
/// exclusive access, and training applies the returned [`GradMap`] via
/// [`ParamStore::accumulate`].
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn with_finite_checks(store: &'a ParamStore) -> Self {
        Session {
            g: Graph::with_finite_checks(),
            store,
            bound: IndexMap::new(),
        }
    }

    /// Bind parameter `name` into the graph, reusing the existing node on
    /// repeat calls.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = self.g.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Backward pass from `loss`; returns gradients for every parameter
    /// that was bound and reached. Parameters the loss never touched are
    /// simply absent (treat as zero).
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        self.g.backward(loss)?;
        let mut out = GradMap::new();
        for (name, &var) in &self.bound {
            if let Some(grad) = self.g.grad(var) {
                out.insert(name.clone(), grad.to_vec());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_parameter_is_rejected() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros(2, 2)).unwrap();
        assert!(ps.insert("w", Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn reused_parameter_accumulates_one_summed_gradient() {
        // loss = 2*mean(w) + 2*mean(w) via a single binding of w
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut s = Session::new(&ps);
        let w = s.p("w").unwrap();
        let w2 = s.p("w").unwrap();
        assert_eq!(w, w2);
        let sum = s.g.mean_cols(w).unwrap();
        let sum = s.g.scale(sum, 2.0).unwrap();
        let twice = s.g.add(sum, sum).unwrap();
        let grads = s.backward(twice).unwrap();
        assert_eq!(grads["w"], vec![2.0, 2.0]);
        ps.accumulate(&grads).unwrap();
        ps.accumulate(&grads).unwrap();
        assert_eq!(ps.get("w").unwrap().grad().unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros(1, 2)).unwrap();
        ps.get_mut("w").unwrap().accumulate_grad(&[3.0, 4.0]);
        let pre = ps.clip_global_grad_norm(1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let g = ps.get("w").unwrap().grad().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
