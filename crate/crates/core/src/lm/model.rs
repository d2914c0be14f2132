use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AttentionLayout, Graph, ParamId, ParamStore, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 64, layers: 4, heads: 4, ff_dim: 256, max_seq_len: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// A dense projection inside a transformer block that an adapter may wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "v")]
    Value,
    /// Attention output projection.
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "ff_in")]
    FeedForwardIn,
    #[serde(rename = "ff_out")]
    FeedForwardOut,
}

impl Projection {
    pub const ALL: [Projection; 5] = [
        Projection::Query,
        Projection::Value,
        Projection::Dense,
        Projection::FeedForwardIn,
        Projection::FeedForwardOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
            Projection::Dense => "dense",
            Projection::FeedForwardIn => "ff_in",
            Projection::FeedForwardOut => "ff_out",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter target `{s}`")))
    }
}

/// Train mode carries the dropout stream; eval mode disables dropout.
pub enum Mode {
    Eval,
    Train(Rng),
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }

    /// Dropout in train mode, identity otherwise.
    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var, p: f64) -> Var {
        match self {
            Mode::Train(rng) if p > 0.0 => g.dropout(x, p, rng),
            _ => x,
        }
    }
}

/// Wraps a block's dense projections, e.g. with low-rank adapters.
pub trait ProjectionHook<'a> {
    /// Returns the (possibly modified) output of `target` in `layer`, given
    /// the projection's input and the frozen weight's output.
    fn project(
        &self,
        g: &mut Graph<'a>,
        layer: usize,
        target: Projection,
        input: Var,
        base_out: Var,
        mode: &mut Mode,
    ) -> Result<Var>;
}

/// Leaves every projection as the base weight computes it.
pub struct NoHook;

impl<'a> ProjectionHook<'a> for NoHook {
    fn project(&self, _: &mut Graph<'a>, _: usize, _: Projection, _: Var, base_out: Var, _: &mut Mode) -> Result<Var> {
        Ok(base_out)
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff_in_w: ParamId,
    ff_in_b: ParamId,
    ff_out_w: ParamId,
    ff_out_b: ParamId,
}

#[derive(Debug, Clone)]
struct BaseIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    head: ParamId,
}

impl BaseIds {
    fn resolve(store: &ParamStore, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let p = |s: &str| store.require(&format!("layers/{l}/{s}"));
                Ok(LayerIds {
                    ln1_gain: p("ln1/gain")?,
                    ln1_bias: p("ln1/bias")?,
                    wq: p("attn/q")?,
                    wk: p("attn/k")?,
                    wv: p("attn/v")?,
                    wo: p("attn/dense")?,
                    ln2_gain: p("ln2/gain")?,
                    ln2_bias: p("ln2/bias")?,
                    ff_in_w: p("ff/in/w")?,
                    ff_in_b: p("ff/in/b")?,
                    ff_out_w: p("ff/out/w")?,
                    ff_out_b: p("ff/out/b")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: store.require("tok_emb")?,
            pos_emb: store.require("pos_emb")?,
            layers,
            lnf_gain: store.require("ln_f/gain")?,
            lnf_bias: store.require("ln_f/bias")?,
            head: store.require("head")?,
        })
    }
}

/// Packed batch of sequences ready for the transformer.
#[derive(Debug, Clone)]
pub struct PackedInput {
    /// Absolute position of every row.
    pub positions: Vec<usize>,
    pub layout: AttentionLayout,
}

impl PackedInput {
    /// Packs sequences given as per-row position lists and key flags.
    pub fn new(sequences: &[(Vec<usize>, Vec<bool>)]) -> Result<Self> {
        let mut positions = Vec::new();
        let mut keys = Vec::new();
        let mut segments = Vec::with_capacity(sequences.len());
        for (pos, mask) in sequences {
            if pos.len() != mask.len() {
                return Err(Error::Shape("positions and key mask differ in length".into()));
            }
            if pos.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape("positions must increase within a sequence".into()));
            }
            let start = positions.len();
            positions.extend_from_slice(pos);
            keys.extend_from_slice(mask);
            segments.push(start..positions.len());
        }
        Ok(Self { positions, layout: AttentionLayout::new(segments, keys)? })
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Decoder-only transformer with learned absolute positions and pre-norm blocks.
#[derive(Debug)]
pub struct BaseLM {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    ids: BaseIds,
}

impl Clone for BaseLM {
    /// Ids are re-resolved against the cloned store.
    fn clone(&self) -> Self {
        let params = self.params.clone();
        let ids = BaseIds::resolve(&params, self.config.layers).expect("cloned store has every tensor");
        Self { config: self.config.clone(), vocab: self.vocab.clone(), params, ids }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseRecord {
    kind: String,
    model: ModelConfig,
    frozen: bool,
    vocab: Vocabulary,
}

const BASE_KIND: &str = "base_lm";

impl BaseLM {
    /// Fresh, trainable model initialised from `config.seed`.
    pub fn init(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let v = vocab.len();
        let mut rng = Rng::stream(config.seed, "lm-init", 0);
        let mut store = ParamStore::new();
        store.insert("tok_emb", rng.gaussian(&[v, e], INIT_STD), true)?;
        store.insert("pos_emb", rng.gaussian(&[config.max_seq_len, e], INIT_STD), true)?;
        let out_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        for l in 0..config.layers {
            let n = |s: &str| format!("layers/{l}/{s}");
            store.insert(n("ln1/gain"), Tensor::filled(&[e], 1.0), true)?;
            store.insert(n("ln1/bias"), Tensor::zeros(&[e]), true)?;
            store.insert(n("attn/q"), rng.gaussian(&[e, e], INIT_STD), true)?;
            store.insert(n("attn/k"), rng.gaussian(&[e, e], INIT_STD), true)?;
            store.insert(n("attn/v"), rng.gaussian(&[e, e], INIT_STD), true)?;
            store.insert(n("attn/dense"), rng.gaussian(&[e, e], out_std), true)?;
            store.insert(n("ln2/gain"), Tensor::filled(&[e], 1.0), true)?;
            store.insert(n("ln2/bias"), Tensor::zeros(&[e]), true)?;
            store.insert(n("ff/in/w"), rng.gaussian(&[config.ff_dim, e], INIT_STD), true)?;
            store.insert(n("ff/in/b"), Tensor::zeros(&[config.ff_dim]), true)?;
            store.insert(n("ff/out/w"), rng.gaussian(&[e, config.ff_dim], out_std), true)?;
            store.insert(n("ff/out/b"), Tensor::zeros(&[e]), true)?;
        }
        store.insert("ln_f/gain", Tensor::filled(&[e], 1.0), true)?;
        store.insert("ln_f/bias", Tensor::zeros(&[e]), true)?;
        store.insert("head", rng.gaussian(&[v, e], INIT_STD), true)?;
        let ids = BaseIds::resolve(&store, config.layers)?;
        Ok(Self { config, vocab, params: store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Marks every base tensor non-trainable.
    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.ids().all(|id| !self.params.is_trainable(id))
    }

    pub fn token_embeddings(&self) -> &Tensor {
        self.params.get(self.ids.tok_emb)
    }

    /// Input and output width of `target`.
    pub fn projection_dims(&self, target: Projection) -> (usize, usize) {
        let (e, f) = (self.config.embed_dim, self.config.ff_dim);
        match target {
            Projection::Query | Projection::Value | Projection::Dense => (e, e),
            Projection::FeedForwardIn => (e, f),
            Projection::FeedForwardOut => (f, e),
        }
    }

    pub fn projection_weight(&self, layer: usize, target: Projection) -> &Tensor {
        let ids = &self.ids.layers[layer];
        let id = match target {
            Projection::Query => ids.wq,
            Projection::Value => ids.wv,
            Projection::Dense => ids.wo,
            Projection::FeedForwardIn => ids.ff_in_w,
            Projection::FeedForwardOut => ids.ff_out_w,
        };
        self.params.get(id)
    }

    pub fn embed_tokens<'a>(&'a self, g: &mut Graph<'a>, ids: &[TokenId]) -> Result<Var> {
        let table = g.param(&self.params, self.ids.tok_emb);
        g.gather(table, ids)
    }

    /// Runs the transformer blocks over packed input embeddings `[rows, E]`.
    pub fn hidden<'a>(
        &'a self,
        g: &mut Graph<'a>,
        input: Var,
        packed: &PackedInput,
        hook: &dyn ProjectionHook<'a>,
        mode: &mut Mode,
    ) -> Result<Var> {
        if let Some(&p) = packed.positions.iter().max() {
            if p >= self.config.max_seq_len {
                return Err(Error::SequenceTooLong { len: p + 1, max: self.config.max_seq_len });
            }
        }
        let w = g.value(input);
        if w.cols() != self.config.embed_dim || w.rows() != packed.rows() {
            return Err(Error::Shape(format!(
                "input {:?} for {} rows of width {}",
                w.shape(),
                packed.rows(),
                self.config.embed_dim
            )));
        }
        let pos_table = g.param(&self.params, self.ids.pos_emb);
        let pos = g.gather(pos_table, &packed.positions)?;
        let mut x = g.add(input, pos)?;
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let p = |g: &mut Graph<'a>, id| g.param(&self.params, id);
            let (lg, lb) = (p(g, ids.ln1_gain), p(g, ids.ln1_bias));
            let h = g.layer_norm(x, lg, lb)?;
            let wq = p(g, ids.wq);
            let q0 = g.matmul_t(h, wq)?;
            let q = hook.project(g, l, Projection::Query, h, q0, mode)?;
            let wk = p(g, ids.wk);
            let k = g.matmul_t(h, wk)?;
            let wv = p(g, ids.wv);
            let v0 = g.matmul_t(h, wv)?;
            let v = hook.project(g, l, Projection::Value, h, v0, mode)?;
            let a = g.attention(q, k, v, self.config.heads, &packed.layout)?;
            let wo = p(g, ids.wo);
            let o0 = g.matmul_t(a, wo)?;
            let o = hook.project(g, l, Projection::Dense, a, o0, mode)?;
            x = g.add(x, o)?;

            let (lg, lb) = (p(g, ids.ln2_gain), p(g, ids.ln2_bias));
            let h = g.layer_norm(x, lg, lb)?;
            let (w1, b1) = (p(g, ids.ff_in_w), p(g, ids.ff_in_b));
            let f0 = g.matmul_t(h, w1)?;
            let f0 = g.add_bias(f0, b1)?;
            let f = hook.project(g, l, Projection::FeedForwardIn, h, f0, mode)?;
            let f = g.gelu(f);
            let (w2, b2) = (p(g, ids.ff_out_w), p(g, ids.ff_out_b));
            let y0 = g.matmul_t(f, w2)?;
            let y0 = g.add_bias(y0, b2)?;
            let y = hook.project(g, l, Projection::FeedForwardOut, f, y0, mode)?;
            x = g.add(x, y)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the selected rows of `hidden`.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.select_rows(hidden, rows)?;
        let (lg, lb) = (g.param(&self.params, self.ids.lnf_gain), g.param(&self.params, self.ids.lnf_bias));
        let h = g.layer_norm(h, lg, lb)?;
        let head = g.param(&self.params, self.ids.head);
        g.matmul_t(h, head)
    }

    /// Per-position logits `[S, |V|]` for one context of embeddings `[S, E]`.
    ///
    /// Attention is causal; positions whose `key_mask` entry is false are
    /// never attended to.
    pub fn forward_logits(&self, context: &Tensor, key_mask: &[bool]) -> Result<Tensor> {
        let mut out = self.forward_logits_batch(&[(context.clone(), key_mask.to_vec())])?;
        Ok(out.remove(0))
    }

    pub fn forward_logits_batch(&self, contexts: &[(Tensor, Vec<bool>)]) -> Result<Vec<Tensor>> {
        let mut seqs = Vec::with_capacity(contexts.len());
        let mut data = Vec::new();
        for (ctx, mask) in contexts {
            let s = ctx.rows();
            if s > self.config.max_seq_len {
                return Err(Error::SequenceTooLong { len: s, max: self.config.max_seq_len });
            }
            if ctx.cols() != self.config.embed_dim || mask.len() != s {
                return Err(Error::Shape(format!(
                    "context {:?} with mask of {} for width {}",
                    ctx.shape(),
                    mask.len(),
                    self.config.embed_dim
                )));
            }
            seqs.push(((0..s).collect(), mask.clone()));
            data.extend_from_slice(ctx.data());
        }
        let packed = PackedInput::new(&seqs)?;
        let rows = packed.rows();
        let mut g = Graph::new();
        let input = g.constant(Tensor::from_parts(vec![rows, self.config.embed_dim], data));
        let h = self.hidden(&mut g, input, &packed, &NoHook, &mut Mode::Eval)?;
        let all: Vec<usize> = (0..rows).collect();
        let logits = self.logits(&mut g, h, &all)?;
        let lv = g.value(logits);
        if !lv.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let v = self.vocab.len();
        Ok(packed
            .layout
            .segments()
            .iter()
            .map(|s| Tensor::from_parts(vec![s.len(), v], lv.data()[s.start * v..s.end * v].to_vec()))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let record = BaseRecord {
            kind: BASE_KIND.into(),
            model: self.config.clone(),
            frozen: self.is_frozen(),
            vocab: self.vocab.clone(),
        };
        let mut c = Checkpoint::new(serde_json::to_string(&record).expect("base record serialises"));
        for (name, t) in self.params.named_tensors() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let record: BaseRecord = serde_json::from_str(&c.config)?;
        if record.kind != BASE_KIND {
            return Err(Error::MalformedCheckpoint(format!(
                "expected a {BASE_KIND} checkpoint, found `{}`",
                record.kind
            )));
        }
        record.model.validate()?;
        let mut store = ParamStore::new();
        for (name, t) in &c.tensors {
            store.insert(name.clone(), t.clone(), !record.frozen)?;
        }
        let ids = BaseIds::resolve(&store, record.model.layers)?;
        let e = record.model.embed_dim;
        let v = record.vocab.len();
        if store.get(ids.tok_emb).shape() != [v, e] || store.get(ids.head).shape() != [v, e] {
            return Err(Error::MalformedCheckpoint("embedding tables disagree with vocabulary".into()));
        }
        Ok(Self { config: record.model, vocab: record.vocab, params: store, ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// True when every tensor of `other` is bitwise equal to this model's.
    pub fn bit_eq(&self, other: &BaseLM) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .named_tensors()
                .zip(other.params.named_tensors())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BaseLM {
        let vocab = Vocabulary::build(["a", "b", "c"], 16).unwrap();
        let cfg = ModelConfig { embed_dim: 8, layers: 2, heads: 2, ff_dim: 16, max_seq_len: 12, seed: 4 };
        BaseLM::init(cfg, vocab).unwrap()
    }

    fn context(seed: u64, s: usize) -> Tensor {
        Rng::stream(seed, "ctx", 0).gaussian(&[s, 8], 1.0)
    }

    #[test]
    fn logits_have_one_row_per_position() {
        let m = small();
        let out = m.forward_logits(&context(1, 5), &[true; 5]).unwrap();
        assert_eq!(out.shape(), &[5, 16]);
        assert!(out.is_finite());
    }

    #[test]
    fn later_positions_cannot_leak_backwards() {
        let m = small();
        let ctx = context(1, 6);
        let base = m.forward_logits(&ctx, &[true; 6]).unwrap();
        for j in 0..6 {
            let mut p = ctx.clone();
            for c in 0..8 {
                p.data_mut()[j * 8 + c] += 3.0;
            }
            let out = m.forward_logits(&p, &[true; 6]).unwrap();
            for i in 0..j {
                assert_eq!(base.row(i), out.row(i), "position {i} changed when {j} moved");
            }
            assert_ne!(base.row(j), out.row(j));
        }
    }

    #[test]
    fn masked_positions_do_not_influence_unmasked_logits() {
        let m = small();
        let ctx = context(2, 6);
        let mask = [true, true, false, false, true, true];
        let base = m.forward_logits(&ctx, &mask).unwrap();
        let mut p = ctx.clone();
        for c in 0..8 {
            p.data_mut()[2 * 8 + c] = -4.0;
            p.data_mut()[3 * 8 + c] = 9.0;
        }
        let out = m.forward_logits(&p, &mask).unwrap();
        for i in [0, 1, 4, 5] {
            assert_eq!(base.row(i), out.row(i));
        }
    }

    #[test]
    fn batched_rows_equal_single_calls() {
        let m = small();
        let items = vec![
            (context(3, 4), vec![true; 4]),
            (context(4, 7), vec![true, false, true, true, true, true, true]),
            (context(5, 1), vec![true]),
        ];
        let batch = m.forward_logits_batch(&items).unwrap();
        for ((ctx, mask), b) in items.iter().zip(&batch) {
            let single = m.forward_logits(ctx, mask).unwrap();
            assert!(single.bit_eq(b));
        }
    }

    #[test]
    fn too_long_context_is_rejected() {
        let m = small();
        assert!(matches!(
            m.forward_logits(&context(1, 13), &[true; 13]),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let mut m = small();
        m.freeze();
        let back = BaseLM::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert!(m.bit_eq(&back));
        assert!(back.is_frozen());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.vocab(), m.vocab());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { embed_dim: 10, heads: 4, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn projection_names_parse() {
        assert_eq!("dense".parse::<Projection>().unwrap(), Projection::Dense);
        assert!("k".parse::<Projection>().is_err());
    }
}
