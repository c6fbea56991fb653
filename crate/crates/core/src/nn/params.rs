use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::rng::RngStream;
use super::tensor::Tensor;
use super::NnError;

/// Named parameters, iterated in lexicographic path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<f32>) -> Result<(), NnError> {
        let path = path.into();
        if path.is_empty() || path.len() > u16::MAX as usize {
            return Err(NnError::Structure(format!(
                "invalid parameter path {path:?}"
            )));
        }
        if self.entries.contains_key(&path) {
            return Err(NnError::Structure(format!(
                "duplicate parameter path {path}"
            )));
        }
        self.entries.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f32>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// `(path, shape)` pairs in iteration order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// True when both trees have identical paths and shapes.
    pub fn same_structure(&self, other: &ParamTree) -> bool {
        self.signature() == other.signature()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

/// Parameters registered on a graph as trainable leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph<f32>, params: &ParamTree) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| (k.to_string(), graph.param(t.clone())))
            .collect();
        Self { vars }
    }

    /// Binds every parameter as a constant (inference only).
    pub fn bind_frozen(graph: &mut Graph<f32>, params: &ParamTree) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| (k.to_string(), graph.constant(t.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var, NnError> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| NnError::Structure(format!("missing parameter {path}")))
    }

    /// Collects gradients for every bound parameter into a tree mirroring `params`.
    pub fn grads(&self, graph: &Graph<f32>, params: &ParamTree) -> Result<ParamTree, NnError> {
        let mut out = ParamTree::new();
        for (path, t) in params.iter() {
            let g = graph.grad(self.get(path)?);
            out.insert(path, Tensor::new(t.shape(), g)?)?;
        }
        Ok(out)
    }
}

/// Kaiming-uniform (fan-in) kernel init: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], rng: &mut RngStream) -> Tensor<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.next_uniform() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}
