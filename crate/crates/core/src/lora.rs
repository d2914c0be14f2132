//! Low-rank adapters on the frozen model's dense projections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{BaseLM, Mode, Projection, ProjectionHook};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub targets: Vec<Projection>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            targets: vec![Projection::Query, Projection::Value, Projection::Dense],
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    /// Parses a comma-separated target list such as `q,v,dense`.
    pub fn parse_targets(list: &str) -> Result<Vec<Projection>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("duplicate LoRA target".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Targets that actually receive adapters.
    pub fn active_targets(&self) -> &[Projection] {
        if self.enabled {
            &self.targets
        } else {
            &[]
        }
    }
}

/// Name of an adapter matrix inside a checkpoint.
pub fn adapter_name(layer: usize, target: Projection, matrix: char) -> String {
    format!("lora/{layer}/{target}/{matrix}")
}

#[derive(Debug, Clone, Copy)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: Projection,
    /// `[r, d_in]`
    pub a: ParamId,
    /// `[d_out, r]`
    pub b: ParamId,
}

/// Adapters registered in a trainable parameter store.
#[derive(Debug, Clone)]
pub struct LoraSet {
    config: LoraConfig,
    adapters: BTreeMap<(usize, Projection), LoraAdapter>,
}

/// Registers one adapter per (layer, target) in `store`, with A Gaussian and B zero.
pub fn attach_adapters(model: &BaseLM, config: &LoraConfig, store: &mut ParamStore, seed: u64) -> Result<LoraSet> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::Config("adapters attach only to a frozen base model".into()));
    }
    let mut adapters = BTreeMap::new();
    for layer in 0..model.config().layers {
        for &target in config.active_targets() {
            let (d_in, d_out) = model.projection_dims(target);
            let mut rng = Rng::stream(seed, "lora-init", (layer * Projection::ALL.len() + target as usize) as u64);
            let a =
                store.insert(adapter_name(layer, target, 'A'), rng.gaussian(&[config.rank, d_in], A_INIT_STD), true)?;
            let b = store.insert(adapter_name(layer, target, 'B'), Tensor::zeros(&[d_out, config.rank]), true)?;
            adapters.insert((layer, target), LoraAdapter { layer, target, a, b });
        }
    }
    Ok(LoraSet { config: config.clone(), adapters })
}

impl LoraSet {
    /// Resolves adapters already present in `store`, e.g. after loading a checkpoint.
    pub fn resolve(model: &BaseLM, config: &LoraConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut adapters = BTreeMap::new();
        for layer in 0..model.config().layers {
            for &target in config.active_targets() {
                let (d_in, d_out) = model.projection_dims(target);
                let a = store.require(&adapter_name(layer, target, 'A'))?;
                let b = store.require(&adapter_name(layer, target, 'B'))?;
                if store.get(a).shape() != [config.rank, d_in] || store.get(b).shape() != [d_out, config.rank] {
                    return Err(Error::MalformedCheckpoint(format!(
                        "adapter {layer}/{target} does not match rank {}",
                        config.rank
                    )));
                }
                adapters.insert((layer, target), LoraAdapter { layer, target, a, b });
            }
        }
        Ok(Self { config: config.clone(), adapters })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn get(&self, layer: usize, target: Projection) -> Option<&LoraAdapter> {
        self.adapters.get(&(layer, target))
    }

    /// Graph branch `base_out + (α/r)·(drop(x)·Aᵀ)·Bᵀ` for one projection.
    pub fn apply<'a>(
        &self,
        store: &'a ParamStore,
        g: &mut Graph<'a>,
        layer: usize,
        target: Projection,
        input: Var,
        base_out: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        let Some(ad) = self.adapters.get(&(layer, target)) else {
            return Ok(base_out);
        };
        let x = mode.dropout(g, input, self.config.dropout);
        let a = g.param(store, ad.a);
        let ax = g.matmul_t(x, a)?;
        let b = g.param(store, ad.b);
        let bax = g.matmul_t(ax, b)?;
        let delta = g.scale(bax, self.config.scale());
        g.add(base_out, delta)
    }

    /// Binds the adapters to the store holding their tensors.
    pub fn hook<'s>(&'s self, store: &'s ParamStore) -> LoraHook<'s> {
        LoraHook { set: self, store }
    }
}

pub struct LoraHook<'s> {
    set: &'s LoraSet,
    store: &'s ParamStore,
}

impl<'a> ProjectionHook<'a> for LoraHook<'a> {
    fn project(
        &self,
        g: &mut Graph<'a>,
        layer: usize,
        target: Projection,
        input: Var,
        base_out: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        self.set.apply(self.store, g, layer, target, input, base_out, mode)
    }
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` for rows of `x`, without dropout.
pub fn adapter_forward(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    let r = a.rows();
    if a.shape().len() != 2 || b.shape().len() != 2 || r == 0 || b.cols() != r {
        return Err(Error::Shape(format!("adapter A {:?} and B {:?} disagree on rank", a.shape(), b.shape())));
    }
    if a.cols() != w.cols() || b.rows() != w.rows() {
        return Err(Error::Shape(format!(
            "adapter A {:?}, B {:?} do not fit weight {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let base = x.matmul_t(w)?;
    let delta = x.matmul_t(a)?.matmul_t(b)?;
    let s = alpha / r as f64;
    let data = base.data().iter().zip(delta.data()).map(|(o, d)| o + s * d).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Trainable parameter counts of one detector configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub lora: usize,
    pub m1: usize,
    pub m2: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.lora + self.m1 + self.m2
    }
}

/// Elements of a mapping network `input → E/2 → E` with biases.
pub fn mapping_param_count(input: usize, embed_dim: usize) -> usize {
    let h = embed_dim / 2;
    input * h + h + h * embed_dim + embed_dim
}

/// Closed-form trainable counts: `r·(d_in + d_out)` per adapter plus the
/// mapping networks that are present.
pub fn count_trainable(model: &BaseLM, lora: &LoraConfig, audio_dim: Option<usize>, signals: bool) -> ParamCount {
    let e = model.embed_dim();
    let per_layer: usize = lora
        .active_targets()
        .iter()
        .map(|&t| {
            let (i, o) = model.projection_dims(t);
            lora.rank * (i + o)
        })
        .sum();
    ParamCount {
        lora: per_layer * model.config().layers,
        m1: audio_dim.map_or(0, |n| mapping_param_count(n, e)),
        m2: if signals { mapping_param_count(crate::features::SIGNAL_DIM, e) } else { 0 },
    }
}
