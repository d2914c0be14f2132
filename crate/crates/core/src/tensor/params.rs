use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

/// Handle to a tensor inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

/// Named parameters with per-parameter trainable flags and Adam moments.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// The clone is a distinct store: ids from the original do not resolve in it.
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        let mut param = Param { name, value, trainable: false, m: None, v: None };
        set_trainable(&mut param, trainable);
        self.params.push(param);
        Ok(ParamId { store: self.tag, index })
    }

    fn index(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.tag, "parameter id belongs to another store");
        id.index
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[self.index(id)].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.index(id);
        &mut self.params[i].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[self.index(id)].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId { store: self.tag, index })
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[self.index(id)].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let i = self.index(id);
        set_trainable(&mut self.params[i], trainable);
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            set_trainable(p, false);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.tag, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values across trainable tensors.
    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Trainable parameters without an entry in `grads` are updated with a
    /// zero gradient.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (id, g) in &grads.by_param {
            if id.store != self.tag {
                return Err(Error::Shape("gradient for a parameter of another store".into()));
            }
            let p = &self.params[id.index];
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (index, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let id = ParamId { store: self.tag, index };
            let grad = grads.by_param.get(&id).map(|g| g.data());
            let m = p.m.as_mut().expect("trainable parameter has moments").data_mut();
            let v = p.v.as_mut().expect("trainable parameter has moments").data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

fn set_trainable(p: &mut Param, trainable: bool) {
    p.trainable = trainable;
    if trainable && p.m.is_none() {
        p.m = Some(Tensor::zeros(p.value.shape()));
        p.v = Some(Tensor::zeros(p.value.shape()));
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match self.by_param.get_mut(&id) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.by_param.insert(id, grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_with_zero_moments_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::filled(&[3], 0.7), true).unwrap();
        let mut g = Gradients::default();
        g.insert(id, Tensor::zeros(&[3]));
        store.adam_step(&g, &AdamConfig::default()).unwrap();
        assert!(store.get(id).bit_eq(&Tensor::filled(&[3], 0.7)));
    }

    #[test]
    fn first_step_moves_by_lr_over_one_plus_eps() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(0.0), true).unwrap();
        let mut g = Gradients::default();
        g.insert(id, Tensor::scalar(1.0));
        store.adam_step(&g, &AdamConfig::default()).unwrap();
        let delta = store.get(id).data()[0];
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
        assert!((delta + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(0.3), true).unwrap();
        let b = store.insert("b", Tensor::scalar(0.3), true).unwrap();
        for k in 0..5 {
            let mut g = Gradients::default();
            g.insert(a, Tensor::scalar(0.1 * k as f64 - 0.2));
            g.insert(b, Tensor::scalar(0.1 * k as f64 - 0.2));
            store.adam_step(&g, &AdamConfig::default()).unwrap();
        }
        assert!(store.get(a).bit_eq(store.get(b)));
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::filled(&[2], 1.5), false).unwrap();
        let t = store.insert("t", Tensor::filled(&[2], 1.5), true).unwrap();
        for _ in 0..10 {
            let mut g = Gradients::default();
            g.insert(w, Tensor::filled(&[2], 1.0));
            g.insert(t, Tensor::filled(&[2], 1.0));
            store.adam_step(&g, &AdamConfig::default()).unwrap();
        }
        assert!(store.get(w).bit_eq(&Tensor::filled(&[2], 1.5)));
        assert!(store.get(t).data()[0] < 1.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        let mut g = Gradients::default();
        g.insert(id, Tensor::zeros(&[4]));
        assert!(matches!(store.adam_step(&g, &AdamConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1]), true).is_err());
    }
}
