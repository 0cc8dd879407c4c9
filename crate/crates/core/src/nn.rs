//! Parameter storage and the small layers shared by every encoder.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named, ordered model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
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

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let current = &self.tensors[id.0];
        if current.shape() != tensor.shape() {
            return Err(CoreError::invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                current.shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Parameters bound to graph leaves for one forward pass, plus the dropout
/// source when running in training mode.
pub struct Bound {
    vars: Vec<Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Bound {
    /// Records every parameter as a leaf. Leaves are differentiable only
    /// when `trainable` is set.
    pub fn new<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self {
            vars,
            dropout_rng: None,
        }
    }

    /// Wraps leaves that were recorded elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self {
            vars,
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = g.constant(mask);
        Ok(g.mul(x, m)?)
    }
}

/// Collects the gradients of every bound parameter, in store order.
pub fn collect_grads<T: Real>(
    grads: &mut triplex_tensor::Gradients<T>,
    bound: &Bound,
) -> Vec<Tensor<T>> {
    bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("bound parameters are differentiable"))
        .collect()
}

pub(crate) fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// `y = x w + b` over the last axis; `w` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Uniform on [-1/sqrt(in), 1/sqrt(in)] for weight and bias alike.
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(vec![in_dim, out_dim], -bound, bound, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::uniform(vec![out_dim], -bound, bound, rng),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)?)
    }
}

/// Two-layer GELU feed-forward network with dropout on its output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        let y = self.fc2.forward(g, p, h)?;
        p.dropout(g, y, self.dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut g = Graph::<f64>::new();
        let mut b = Bound::from_vars(vec![]);
        let x = g.constant(Tensor::ones([4, 4]));
        assert_eq!(b.dropout(&mut g, x, 0.5).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut g = Graph::<f64>::new();
        let mut b = Bound::from_vars(vec![]).with_dropout(ChaCha8Rng::seed_from_u64(0));
        let x = g.constant(Tensor::ones([100, 100]));
        let y = b.dropout(&mut g, x, 0.3).unwrap();
        let mean = g.value(y).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn store_rejects_shape_changes() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros([2, 2]));
        assert!(s.set(id, Tensor::zeros([4])).is_err());
        assert_eq!(s.id("w"), Some(id));
        assert_eq!(s.num_elements(), 4);
    }
}
