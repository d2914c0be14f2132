//! Mapping networks and context assembly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SIGNAL_DIM;
use crate::lm::{Mode, TokenId, Vocabulary};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Input modalities of one detector configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Modalities {
    pub text: bool,
    pub audio: bool,
    pub signals: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities { text: true, audio: true, signals: true };

    pub fn is_empty(&self) -> bool {
        !(self.text || self.audio || self.signals)
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.text, "t"), (self.audio, "a"), (self.signals, "b")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Modalities {
    type Err = Error;

    /// Comma-separated subset of `t`, `a`, `b`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "t" => &mut m.text,
                "a" => &mut m.audio,
                "b" => &mut m.signals,
                other => return Err(Error::Config(format!("unknown modality `{other}`"))),
            };
            if *slot {
                return Err(Error::Config(format!("modality `{part}` listed twice")));
            }
            *slot = true;
        }
        if m.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        Ok(m)
    }
}

impl Serialize for Modalities {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Modalities {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Componentwise mean over the rows of a `T×N` frame matrix.
pub fn mean_pool(frames: &Tensor) -> Result<Vec<f64>> {
    if frames.shape().len() != 2 || frames.rows() == 0 {
        return Err(Error::Empty("utterance has no frames".into()));
    }
    let n = frames.cols();
    let mut sum = vec![0.0; n];
    for r in 0..frames.rows() {
        for (s, x) in sum.iter_mut().zip(frames.row(r)) {
            *s += x;
        }
    }
    let t = frames.rows() as f64;
    Ok(sum.into_iter().map(|s| s / t).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixKind {
    Audio,
    Signals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    pub kind: PrefixKind,
    pub embedding: Vec<f64>,
}

pub const MAPPING_DROPOUT: f64 = 0.1;

/// `input → E/2 (tanh) → E`, both layers with biases; dropout on the hidden layer.
#[derive(Debug, Clone)]
pub struct MappingNet {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub dropout: f64,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MappingNet {
    /// Registers weights `<name>/w1, b1, w2, b2` in `store`; weights are
    /// N(0, 1/fan_in), biases zero.
    pub fn init(store: &mut ParamStore, name: &str, input: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if input == 0 || embed_dim < 2 {
            return Err(Error::Config(format!("mapping network {input} → {embed_dim}")));
        }
        let hidden = embed_dim / 2;
        let mut rng = Rng::stream(seed, &format!("mapping-init/{name}"), 0);
        let w1 =
            store.insert(format!("{name}/w1"), rng.gaussian(&[hidden, input], 1.0 / (input as f64).sqrt()), true)?;
        let b1 = store.insert(format!("{name}/b1"), Tensor::zeros(&[hidden]), true)?;
        let w2 = store.insert(
            format!("{name}/w2"),
            rng.gaussian(&[embed_dim, hidden], 1.0 / (hidden as f64).sqrt()),
            true,
        )?;
        let b2 = store.insert(format!("{name}/b2"), Tensor::zeros(&[embed_dim]), true)?;
        Ok(Self { name: name.into(), input, hidden, output: embed_dim, dropout: MAPPING_DROPOUT, w1, b1, w2, b2 })
    }

    /// Binds to weights already present in `store`.
    pub fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        let w1 = store.require(&format!("{name}/w1"))?;
        let b1 = store.require(&format!("{name}/b1"))?;
        let w2 = store.require(&format!("{name}/w2"))?;
        let b2 = store.require(&format!("{name}/b2"))?;
        let (hidden, input) = (store.get(w1).rows(), store.get(w1).cols());
        let output = store.get(w2).rows();
        if store.get(w2).cols() != hidden || store.get(b1).len() != hidden || store.get(b2).len() != output {
            return Err(Error::MalformedCheckpoint(format!("inconsistent mapping network `{name}`")));
        }
        Ok(Self { name: name.into(), input, hidden, output, dropout: MAPPING_DROPOUT, w1, b1, w2, b2 })
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }

    /// Maps rows `[B, input]` to `[B, E]`.
    pub fn forward<'a>(&self, store: &'a ParamStore, g: &mut Graph<'a>, x: Var, mode: &mut Mode) -> Result<Var> {
        if g.value(x).cols() != self.input {
            return Err(Error::Shape(format!("{} expects width {}, got {}", self.name, self.input, g.value(x).cols())));
        }
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.matmul_t(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h);
        let h = mode.dropout(g, h, self.dropout);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let y = g.matmul_t(h, w2)?;
        g.add_bias(y, b2)
    }

    fn map_one(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let y = self.forward(store, &mut g, xv, &mut Mode::Eval)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Audio prefix from a pooled `N`-vector, without dropout.
pub fn map_audio(pooled: &[f64], net: &MappingNet, store: &ParamStore) -> Result<Prefix> {
    if pooled.len() != net.input {
        return Err(Error::Shape(format!("pooled width {} for M1 of width {}", pooled.len(), net.input)));
    }
    Ok(Prefix { kind: PrefixKind::Audio, embedding: net.map_one(store, pooled)? })
}

/// Decoder-signal prefix from four scaled values in [0, 1], without dropout.
pub fn map_signals(scaled: &[f64], net: &MappingNet, store: &ParamStore) -> Result<Prefix> {
    check_scaled(scaled)?;
    Ok(Prefix { kind: PrefixKind::Signals, embedding: net.map_one(store, scaled)? })
}

pub(crate) fn check_scaled(scaled: &[f64]) -> Result<()> {
    if scaled.len() != SIGNAL_DIM {
        return Err(Error::Shape(format!("{} decoder signals, expected {SIGNAL_DIM}", scaled.len())));
    }
    if let Some(x) = scaled.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Config(format!("scaled decoder signal {x} outside [0, 1]")));
    }
    Ok(())
}

pub const PROMPT: &str = "directed decision:";

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledContext {
    /// `[S, E]`
    pub embeddings: Tensor,
    pub key_mask: Vec<bool>,
    /// Token id per row; `None` for prefix rows.
    pub tokens: Vec<Option<TokenId>>,
    /// Final prompt position, where the decision token is predicted.
    pub decision: usize,
}

/// Lays out `[a][b][hypothesis padded to max_tokens][prompt]`.
///
/// Prefixes must be given exactly for the selected modalities. Without the
/// text modality there is no hypothesis region; with it, the region is
/// right-padded with key-masked `<pad>` rows.
pub fn assemble_context(
    modalities: Modalities,
    audio: Option<&Prefix>,
    signals: Option<&Prefix>,
    hypothesis: &[TokenId],
    prompt: &[TokenId],
    embeddings: &Tensor,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<AssembledContext> {
    let e = embeddings.cols();
    if prompt.is_empty() {
        return Err(Error::Config("the prompt is required".into()));
    }
    for (selected, prefix, kind, name) in [
        (modalities.audio, audio, PrefixKind::Audio, "audio"),
        (modalities.signals, signals, PrefixKind::Signals, "decoder-signal"),
    ] {
        match (selected, prefix) {
            (false, Some(_)) => return Err(Error::Modality(format!("{name} prefix given but {name} is not selected"))),
            (true, None) => return Err(Error::Modality(format!("{name} is selected but no prefix was given"))),
            (true, Some(p)) if p.kind != kind || p.embedding.len() != e => {
                return Err(Error::Modality(format!("{name} prefix has the wrong kind or width")))
            }
            _ => {}
        }
    }
    if !modalities.text && !hypothesis.is_empty() {
        return Err(Error::Modality("hypothesis given but text is not selected".into()));
    }
    if hypothesis.len() > max_tokens {
        return Err(Error::SequenceTooLong { len: hypothesis.len(), max: max_tokens });
    }
    let mut data = Vec::new();
    let mut mask = Vec::new();
    let mut tokens = Vec::new();
    for p in [audio, signals].into_iter().flatten() {
        data.extend_from_slice(&p.embedding);
        mask.push(true);
        tokens.push(None);
    }
    let mut push_token = |id: TokenId, live: bool| {
        data.extend_from_slice(embeddings.row(id));
        mask.push(live);
        tokens.push(Some(id));
    };
    if modalities.text {
        for &id in hypothesis {
            push_token(id, true);
        }
        for _ in hypothesis.len()..max_tokens {
            push_token(vocab.pad(), false);
        }
    }
    for &id in prompt {
        push_token(id, true);
    }
    let s = mask.len();
    Ok(AssembledContext { embeddings: Tensor::new(vec![s, e], data)?, key_mask: mask, tokens, decision: s - 1 })
}
