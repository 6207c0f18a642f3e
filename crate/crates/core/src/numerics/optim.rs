//! Named parameters, global-norm clipping and AdamW.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Real, Tensor, Var};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor,
            grad: vec![T::zero(); n],
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step_count: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, tensor));
        Ok(ParamId(self.params.len() - 1))
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

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
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

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Ids ordered by parameter name.
    pub fn sorted_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids().collect();
        ids.sort_by(|a, b| self.params[a.0].name.cmp(&self.params[b.0].name));
        ids
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Records every parameter as a gradient leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| graph.leaf(p.tensor.clone()))
                .collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| graph.constant(p.tensor.clone()))
                .collect(),
        }
    }

    /// Adds the gradients of a reverse sweep into each parameter's `grad`.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in p.grad.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }
    }

    /// Adds a flat per-parameter gradient list (as produced by
    /// [`ParamSet::collect_grads`]) into `grad`.
    pub fn accumulate_flat(&mut self, grads: &[Vec<T>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }

    /// Extracts per-parameter gradients from a reverse sweep.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.numel()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.cast())
                .expect("names already unique");
        }
        out
    }
}

/// Graph handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && 0.0 < self.beta1
            && self.beta1 < self.beta2
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `clip_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm<T: Real>(params: &mut ParamSet<T>, clip_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum();
    let norm = sq.sqrt();
    if norm > clip_norm {
        let s = T::lit(clip_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update over every parameter.
pub fn adamw_step<T: Real>(params: &mut ParamSet<T>, cfg: &OptimConfig) {
    let lr = T::lit(cfg.learning_rate);
    let decay = T::one() - T::lit(cfg.learning_rate * cfg.weight_decay);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let eps = T::lit(cfg.eps);
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = T::one() - T::lit(cfg.beta1.powi(t));
        let bc2 = T::one() - T::lit(cfg.beta2.powi(t));
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let g = p.grad[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
