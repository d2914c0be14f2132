//! Targets, the detector objective, the training loop and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameResolver, Label, MultimodalExample};
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, mass_coverage, EvalResult, Score};
use crate::features::{DecoderSignals, ProviderTag, ScalerStats, SIGNAL_DIM};
use crate::lm::checkpoint::Checkpoint;
use crate::lm::{BaseLM, Mode, PackedInput, TokenId, Vocabulary, DEFAULT_MAX_TOKENS};
use crate::lora::{attach_adapters, count_trainable, LoraConfig, LoraSet, ParamCount};
use crate::prefix::{
    assemble_context, check_scaled, map_audio, map_signals, mean_pool, AssembledContext, MappingNet, Modalities,
    Prefix, PROMPT,
};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AttentionLayout, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only the decision token.
    #[default]
    DecisionOnly,
    /// The decision token and every unpadded hypothesis token.
    FullSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss_mask: LossMask,
    pub seed: u64,
    /// Hypothesis length `l`.
    pub max_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss_mask: LossMask::DecisionOnly,
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("hypothesis length must be positive".into()));
        }
        Ok(())
    }
}

pub fn prompt_ids(vocab: &Vocabulary) -> Vec<TokenId> {
    vocab.tokenize(PROMPT, usize::MAX)
}

pub fn decision_token(vocab: &Vocabulary, label: Label) -> TokenId {
    if label.is_directed() {
        vocab.yes()
    } else {
        vocab.no()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub tokens: Vec<TokenId>,
    /// Positions contributing to the loss.
    pub mask: Vec<bool>,
}

/// `[hypothesis, <pad> up to l, prompt, decision]` with its loss mask.
pub fn build_target_sequence(
    vocab: &Vocabulary,
    hypothesis: &[TokenId],
    label: Label,
    max_tokens: usize,
    policy: LossMask,
) -> Result<TargetSequence> {
    if hypothesis.len() > max_tokens {
        return Err(Error::SequenceTooLong { len: hypothesis.len(), max: max_tokens });
    }
    let mut tokens = hypothesis.to_vec();
    tokens.resize(max_tokens, vocab.pad());
    tokens.extend(prompt_ids(vocab));
    tokens.push(decision_token(vocab, label));
    let mut mask = vec![false; tokens.len()];
    if policy == LossMask::FullSequence {
        mask[..hypothesis.len()].fill(true);
    }
    *mask.last_mut().expect("nonempty") = true;
    Ok(TargetSequence { tokens, mask })
}

/// `−Σ_masked log softmax(logits_j)[targets_j]`, row `j` of `logits`
/// predicting `targets[j]`.
pub fn sequence_loss(logits: &Tensor, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    if logits.rows() != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("loss mask selects no position".into()));
    }
    let mut loss = 0.0;
    for (j, (&t, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let row = logits.row(j);
        if t >= row.len() {
            return Err(Error::Shape(format!("target {t} of {} classes", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok(loss)
}

/// One example reduced to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub label: Label,
    pub tokens: Vec<TokenId>,
    pub signals: DecoderSignals,
    /// Mean-pooled frames; absent when audio was not resolved.
    pub pooled: Option<Vec<f64>>,
}

/// Tokenises hypotheses and, given a resolver, pools audio frames.
pub fn encode_examples(
    examples: &[MultimodalExample],
    vocab: &Vocabulary,
    max_tokens: usize,
    mut frames: Option<&mut FrameResolver>,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| {
            let pooled = match frames.as_deref_mut() {
                Some(r) => Some(mean_pool(&r.resolve(ex)?.frames)?),
                None => None,
            };
            Ok(EncodedExample {
                id: ex.id.clone(),
                label: ex.label,
                tokens: vocab.tokenize(&ex.text, max_tokens),
                signals: ex.signals,
                pooled,
            })
        })
        .collect()
}

const DETECTOR_KIND: &str = "detector";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorRecord {
    kind: String,
    modalities: Modalities,
    lora: LoraConfig,
    max_tokens: usize,
    scaler: Option<ScalerStats>,
}

/// Trainable state on top of a frozen base: adapters and mapping networks.
#[derive(Debug)]
pub struct Detector {
    modalities: Modalities,
    lora_config: LoraConfig,
    max_tokens: usize,
    params: ParamStore,
    lora: LoraSet,
    m1: Option<MappingNet>,
    m2: Option<MappingNet>,
    scaler: Option<ScalerStats>,
    prompt: Vec<TokenId>,
}

/// Row bookkeeping for one packed batch.
struct BatchPlan {
    packed: PackedInput,
    /// Rows of the stacked `[audio; signals; tokens]` matrix in packed order.
    order: Vec<usize>,
    token_ids: Vec<TokenId>,
    decision_rows: Vec<usize>,
    /// `(row, target)` for hypothesis tokens under the full-sequence policy.
    hypothesis_targets: Vec<(usize, TokenId)>,
}

impl Detector {
    /// Fresh adapters (B = 0) and mapping networks for `modalities`.
    pub fn new(
        base: &BaseLM,
        modalities: Modalities,
        lora: &LoraConfig,
        audio_dim: Option<usize>,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let prompt = prompt_ids(base.vocab());
        let longest = modalities.audio as usize + modalities.signals as usize + max_tokens + prompt.len();
        if longest > base.config().max_seq_len {
            return Err(Error::SequenceTooLong { len: longest, max: base.config().max_seq_len });
        }
        let mut params = ParamStore::new();
        let lora_set = attach_adapters(base, lora, &mut params, seed)?;
        let e = base.embed_dim();
        let m1 = match (modalities.audio, audio_dim) {
            (true, Some(n)) => Some(MappingNet::init(&mut params, "m1", n, e, seed)?),
            (true, None) => return Err(Error::Config("audio is selected but its width is unknown".into())),
            (false, _) => None,
        };
        let m2 =
            if modalities.signals { Some(MappingNet::init(&mut params, "m2", SIGNAL_DIM, e, seed)?) } else { None };
        Ok(Self {
            modalities,
            lora_config: lora.clone(),
            max_tokens,
            params,
            lora: lora_set,
            m1,
            m2,
            scaler: None,
            prompt,
        })
    }

    pub fn modalities(&self) -> Modalities {
        self.modalities
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora_config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn lora(&self) -> &LoraSet {
        &self.lora
    }

    pub fn m1(&self) -> Option<&MappingNet> {
        self.m1.as_ref()
    }

    pub fn m2(&self) -> Option<&MappingNet> {
        self.m2.as_ref()
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn scaler(&self) -> Option<&ScalerStats> {
        self.scaler.as_ref()
    }

    pub fn set_scaler(&mut self, scaler: Option<ScalerStats>) {
        self.scaler = scaler;
    }

    /// Fits the min-max scaler when decoder signals are used.
    pub fn fit_scaler(&mut self, train: &[EncodedExample]) -> Result<()> {
        if self.modalities.signals {
            let s: Vec<DecoderSignals> = train.iter().map(|e| e.signals).collect();
            self.scaler = Some(ScalerStats::fit(&s)?);
        }
        Ok(())
    }

    pub fn param_count(&self) -> ParamCount {
        let lora = self.lora.adapters().map(|a| self.params.get(a.a).len() + self.params.get(a.b).len()).sum();
        ParamCount {
            lora,
            m1: self.m1.as_ref().map_or(0, MappingNet::param_count),
            m2: self.m2.as_ref().map_or(0, MappingNet::param_count),
        }
    }

    fn scaled(&self, ex: &EncodedExample) -> Result<[f64; SIGNAL_DIM]> {
        let scaler =
            self.scaler.as_ref().ok_or_else(|| Error::Config("decoder-signal scaler has not been fitted".into()))?;
        let s = scaler.apply(&ex.signals);
        check_scaled(&s)?;
        Ok(s)
    }

    fn pooled<'e>(&self, ex: &'e EncodedExample) -> Result<&'e [f64]> {
        let net = self.m1.as_ref().expect("audio detector has M1");
        match &ex.pooled {
            Some(p) if p.len() == net.input => Ok(p),
            Some(p) => Err(Error::Shape(format!(
                "`{}` has pooled audio of width {}, M1 expects {}",
                ex.id,
                p.len(),
                net.input
            ))),
            None => Err(Error::Modality(format!("`{}` has no audio features", ex.id))),
        }
    }

    /// Unpacked context of one example, exactly as laid out for the model.
    pub fn assemble(&self, base: &BaseLM, ex: &EncodedExample) -> Result<AssembledContext> {
        let audio = match &self.m1 {
            Some(net) => Some(map_audio(self.pooled(ex)?, net, &self.params)?),
            None => None,
        };
        let signals: Option<Prefix> = match &self.m2 {
            Some(net) => Some(map_signals(&self.scaled(ex)?, net, &self.params)?),
            None => None,
        };
        let hyp: &[TokenId] = if self.modalities.text { &ex.tokens } else { &[] };
        assemble_context(
            self.modalities,
            audio.as_ref(),
            signals.as_ref(),
            hyp,
            &self.prompt,
            base.token_embeddings(),
            base.vocab(),
            self.max_tokens,
        )
    }

    /// Logits at every row of an assembled context, without dropout.
    pub fn context_logits(&self, base: &BaseLM, ctx: &AssembledContext) -> Result<Tensor> {
        let s = ctx.key_mask.len();
        let packed = PackedInput {
            positions: (0..s).collect(),
            layout: AttentionLayout::new(vec![0..s], ctx.key_mask.clone())?,
        };
        let mut g = Graph::new();
        let x = g.constant_ref(&ctx.embeddings);
        let hook = self.lora.hook(&self.params);
        let h = base.hidden(&mut g, x, &packed, &hook, &mut Mode::Eval)?;
        let rows: Vec<usize> = (0..s).collect();
        let l = base.logits(&mut g, h, &rows)?;
        Ok(g.value(l).clone())
    }

    fn plan(&self, batch: &[&EncodedExample], policy: LossMask) -> Result<BatchPlan> {
        let b = batch.len();
        let (audio, signals, text) = (self.modalities.audio, self.modalities.signals, self.modalities.text);
        let n_pref = audio as usize + signals as usize;
        let s_off = if audio { b } else { 0 };
        let tok_off = n_pref * b;
        let mut order = Vec::new();
        let mut token_ids = Vec::new();
        let mut seqs = Vec::with_capacity(b);
        let mut decision_rows = Vec::with_capacity(b);
        let mut hypothesis_targets = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            if ex.tokens.len() > self.max_tokens {
                return Err(Error::SequenceTooLong { len: ex.tokens.len(), max: self.max_tokens });
            }
            let start = order.len();
            let mut positions = Vec::new();
            if audio {
                order.push(i);
                positions.push(positions.len());
            }
            if signals {
                order.push(s_off + i);
                positions.push(positions.len());
            }
            if text {
                for (j, &t) in ex.tokens.iter().enumerate() {
                    if policy == LossMask::FullSequence && order.len() > start {
                        hypothesis_targets.push((order.len() - 1, t));
                    }
                    order.push(tok_off + token_ids.len());
                    token_ids.push(t);
                    positions.push(n_pref + j);
                }
            }
            let prompt_start = n_pref + if text { self.max_tokens } else { 0 };
            for (k, &t) in self.prompt.iter().enumerate() {
                order.push(tok_off + token_ids.len());
                token_ids.push(t);
                positions.push(prompt_start + k);
            }
            decision_rows.push(order.len() - 1);
            let n = positions.len();
            seqs.push((positions, vec![true; n]));
        }
        Ok(BatchPlan { packed: PackedInput::new(&seqs)?, order, token_ids, decision_rows, hypothesis_targets })
    }

    /// Final hidden states of a packed batch.
    fn hidden<'a>(
        &'a self,
        base: &'a BaseLM,
        g: &mut Graph<'a>,
        batch: &[&EncodedExample],
        plan: &BatchPlan,
        mode: &mut Mode,
    ) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(net) = &self.m1 {
            let mut data = Vec::with_capacity(batch.len() * net.input);
            for ex in batch {
                data.extend_from_slice(self.pooled(ex)?);
            }
            let x = g.constant(Tensor::new(vec![batch.len(), net.input], data)?);
            parts.push(net.forward(&self.params, g, x, mode)?);
        }
        if let Some(net) = &self.m2 {
            let mut data = Vec::with_capacity(batch.len() * SIGNAL_DIM);
            for ex in batch {
                data.extend_from_slice(&self.scaled(ex)?);
            }
            let x = g.constant(Tensor::new(vec![batch.len(), SIGNAL_DIM], data)?);
            parts.push(net.forward(&self.params, g, x, mode)?);
        }
        parts.push(base.embed_tokens(g, &plan.token_ids)?);
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let input = g.select_rows(stacked, &plan.order)?;
        let hook = self.lora.hook(&self.params);
        base.hidden(g, input, &plan.packed, &hook, mode)
    }

    /// Batch objective: masked target NLL summed per example, averaged over the batch.
    pub fn batch_loss<'a>(
        &'a self,
        base: &'a BaseLM,
        g: &mut Graph<'a>,
        batch: &[&EncodedExample],
        policy: LossMask,
        mode: &mut Mode,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let plan = self.plan(batch, policy)?;
        let h = self.hidden(base, g, batch, &plan, mode)?;
        let vocab = base.vocab();
        let mut rows = plan.decision_rows.clone();
        let mut targets: Vec<TokenId> = batch.iter().map(|e| decision_token(vocab, e.label)).collect();
        for &(r, t) in &plan.hypothesis_targets {
            rows.push(r);
            targets.push(t);
        }
        let logits = base.logits(g, h, &rows)?;
        let w = vec![1.0 / batch.len() as f64; rows.len()];
        g.cross_entropy(logits, &targets, &w)
    }

    /// Decision-position logits `[B, |V|]`, without dropout.
    pub fn decision_logits(&self, base: &BaseLM, batch: &[&EncodedExample]) -> Result<Tensor> {
        let plan = self.plan(batch, LossMask::DecisionOnly)?;
        let mut g = Graph::new();
        let h = self.hidden(base, &mut g, batch, &plan, &mut Mode::Eval)?;
        let l = base.logits(&mut g, h, &plan.decision_rows)?;
        Ok(g.value(l).clone())
    }

    /// Scores in chunks; the model is only read.
    pub fn score(&self, base: &BaseLM, examples: &[EncodedExample]) -> Result<Vec<Score>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let batch: Vec<&EncodedExample> = chunk.iter().collect();
            let logits = self.decision_logits(base, &batch)?;
            for (i, ex) in chunk.iter().enumerate() {
                out.push(Score::from_logits(&ex.id, ex.label, logits.row(i), base.vocab())?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let record = DetectorRecord {
            kind: DETECTOR_KIND.into(),
            modalities: self.modalities,
            lora: self.lora_config.clone(),
            max_tokens: self.max_tokens,
            scaler: self.scaler,
        };
        let mut c = Checkpoint::new(serde_json::to_string(&record).expect("detector record serialises"));
        for (name, t) in self.params.named_tensors() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(base: &BaseLM, c: &Checkpoint) -> Result<Self> {
        let record: DetectorRecord = serde_json::from_str(&c.config)?;
        if record.kind != DETECTOR_KIND {
            return Err(Error::MalformedCheckpoint(format!("expected a detector, found `{}`", record.kind)));
        }
        let mut params = ParamStore::new();
        for (name, t) in &c.tensors {
            params.insert(name.clone(), t.clone(), true)?;
        }
        let lora = LoraSet::resolve(base, &record.lora, &params)?;
        let m1 = record.modalities.audio.then(|| MappingNet::resolve(&params, "m1")).transpose()?;
        let m2 = record.modalities.signals.then(|| MappingNet::resolve(&params, "m2")).transpose()?;
        let expected = lora.len() * 2 + m1.is_some() as usize * 4 + m2.is_some() as usize * 4;
        if params.len() != expected {
            return Err(Error::MalformedCheckpoint(format!(
                "{} tensors where the configuration needs {expected}",
                params.len()
            )));
        }
        Ok(Self {
            modalities: record.modalities,
            lora_config: record.lora,
            max_tokens: record.max_tokens,
            params,
            lora,
            m1,
            m2,
            scaler: record.scaler,
            prompt: prompt_ids(base.vocab()),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(base: &BaseLM, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(base, &Checkpoint::load(path)?)
    }

    /// Bitwise comparison of configuration and every tensor.
    pub fn bit_eq(&self, other: &Detector) -> bool {
        self.to_checkpoint().to_bytes() == other.to_checkpoint().to_bytes()
    }
}

/// One configuration of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: String,
    pub modalities: Modalities,
    #[serde(default)]
    pub lora: LoraConfig,
    pub train_size: usize,
    #[serde(default = "default_provider")]
    pub provider: ProviderTag,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_provider() -> ProviderTag {
    ProviderTag::Specialized256
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

pub const FROZEN_ROW: &str = "Multi 5";

impl AblationSpec {
    pub fn new(name: &str, modalities: Modalities, lora: LoraConfig, train_size: usize, provider: ProviderTag) -> Self {
        Self { name: name.into(), modalities, lora, train_size, provider, seeds: default_seeds() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config(format!("`{}` selects no modality", self.name)));
        }
        self.lora.validate()?;
        if self.train_size == 0 {
            return Err(Error::Config(format!("`{}` has no training examples", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("`{}` has no seeds", self.name)));
        }
        if self.name == FROZEN_ROW && (self.lora.enabled || self.modalities != Modalities::ALL) {
            return Err(Error::Config(format!("`{FROZEN_ROW}` is all modalities with LoRA disabled")));
        }
        Ok(())
    }
}

/// Ablation rows in table order, once per provider, at `full_size` training
/// examples; the data-size rows use `sizes`.
pub fn table1_specs(providers: &[ProviderTag], full_size: usize, sizes: &[usize]) -> Vec<AblationSpec> {
    let m = |s: &str| s.parse::<Modalities>().expect("valid modality list");
    let mut rows: Vec<(String, Modalities, LoraConfig, usize)> = vec![
        ("Uni 1".into(), m("t"), LoraConfig::default(), full_size),
        ("Uni 2".into(), m("a"), LoraConfig::default(), full_size),
        ("Uni 3".into(), m("b"), LoraConfig::default(), full_size),
        ("Multi 1".into(), m("t,b"), LoraConfig::default(), full_size),
        ("Multi 2".into(), m("a,b"), LoraConfig::default(), full_size),
        ("Multi 3".into(), m("t,a"), LoraConfig::default(), full_size),
        ("Multi 4".into(), Modalities::ALL, LoraConfig::default(), full_size),
        (FROZEN_ROW.into(), Modalities::ALL, LoraConfig::disabled(), full_size),
    ];
    for (i, &n) in sizes.iter().enumerate() {
        rows.push((format!("Multi 4.{}", i + 1), Modalities::ALL, LoraConfig::default(), n));
    }
    rows.into_iter()
        .flat_map(|(name, mods, lora, n)| {
            providers.iter().map(move |&p| AblationSpec::new(&name, mods, lora.clone(), n, p))
        })
        .collect()
}

pub const DEFAULT_SIZE_SWEEP: [usize; 5] = [4000, 2000, 1000, 500, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub spec: AblationSpec,
    pub config: TrainConfig,
    pub dataset_hash: String,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub params: ParamCount,
    pub trainable_params: usize,
    /// Left out of serialised reports so that they are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Trains adapters and mapping networks on the first `spec.train_size`
/// examples of `train` with seed `config.seed`.
pub fn train_model(
    base: &BaseLM,
    spec: &AblationSpec,
    config: &TrainConfig,
    train: &[EncodedExample],
    dataset_hash: &str,
) -> Result<(Detector, TrainReport)> {
    let started = Instant::now();
    spec.validate()?;
    config.validate()?;
    if !base.is_frozen() {
        return Err(Error::Config("the base model must be frozen before training".into()));
    }
    if spec.train_size > train.len() {
        return Err(Error::Config(format!(
            "`{}` needs {} training examples, {} are available",
            spec.name,
            spec.train_size,
            train.len()
        )));
    }
    let subset = &train[..spec.train_size];
    let audio_dim = if spec.modalities.audio {
        let n = subset[0]
            .pooled
            .as_ref()
            .ok_or_else(|| Error::Modality("audio is selected but examples carry no audio features".into()))?
            .len();
        Some(n)
    } else {
        None
    };
    let mut det = Detector::new(base, spec.modalities, &spec.lora, audio_dim, config.max_tokens, config.seed)?;
    det.fit_scaler(subset)?;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..subset.len()).collect();
        Rng::stream(config.seed, "train-shuffle", epoch as u64).shuffle(&mut order);
        let mut mode = Mode::Train(Rng::stream(config.seed, "train-dropout", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &subset[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let loss = det.batch_loss(base, &mut g, &batch, config.loss_mask, &mut mode)?;
                let v = g.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
                }
                total += v;
                g.backward(loss)?
            };
            det.params.adam_step(&grads, &config.adam)?;
            batches += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    let params = count_trainable(base, &spec.lora, audio_dim, spec.modalities.signals);
    let trainable_params = det.params.trainable_elements();
    if params.total() != trainable_params {
        return Err(Error::Config(format!(
            "closed-form count {} differs from the {trainable_params} trainable elements",
            params.total()
        )));
    }
    let report = TrainReport {
        spec: spec.clone(),
        config: config.clone(),
        dataset_hash: dataset_hash.into(),
        epoch_loss,
        params,
        trainable_params,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((det, report))
}

/// Scores `eval` and computes the EER.
pub fn evaluate(base: &BaseLM, det: &Detector, eval: &[EncodedExample]) -> Result<(Vec<Score>, EvalResult)> {
    let scores = det.score(base, eval)?;
    let result = compute_eer(&scores)?;
    Ok((scores, result))
}

/// Shared, read-only inputs of an ablation sweep.
pub struct AblationData<'d> {
    pub dataset: &'d Dataset,
    pub dataset_hash: String,
    /// Directory that relative frame sidecar paths are resolved against.
    pub frames_dir: PathBuf,
}

/// Encoded train and eval splits, audio resolved with `provider` when given.
pub fn encode_dataset(
    data: &AblationData<'_>,
    vocab: &Vocabulary,
    max_tokens: usize,
    provider: Option<ProviderTag>,
) -> Result<(Vec<EncodedExample>, Vec<EncodedExample>)> {
    let mut resolver = provider.map(|p| {
        let over = (p != ProviderTag::External).then_some(p);
        FrameResolver::new(&data.frames_dir).with_provider(over)
    });
    let train = encode_examples(&data.dataset.train, vocab, max_tokens, resolver.as_mut())?;
    let eval = encode_examples(&data.dataset.eval, vocab, max_tokens, resolver.as_mut())?;
    Ok((train, eval))
}

/// One (row, seed) result; serialised as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub name: String,
    pub modalities: Modalities,
    pub lora: bool,
    pub train_size: usize,
    pub provider: ProviderTag,
    pub seed: u64,
    pub params: usize,
    pub eer: f64,
    pub threshold: f64,
    pub mass_coverage: f64,
    pub epoch_loss: Vec<f64>,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    modalities: Modalities,
    lora: String,
    train_size: usize,
    provider: Option<ProviderTag>,
    seed: u64,
}

struct RunOutcome {
    params: usize,
    eer: f64,
    threshold: f64,
    mass_coverage: f64,
    epoch_loss: Vec<f64>,
}

/// Trains and evaluates every (spec, seed) pair on up to `jobs` threads.
///
/// Rows without audio do not depend on the provider and are trained once.
/// `progress` sees each record as soon as its run finishes.
pub fn run_ablation(
    base: &BaseLM,
    specs: &[AblationSpec],
    config: &TrainConfig,
    data: &AblationData<'_>,
    jobs: usize,
    progress: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Vec<RunRecord>> {
    for s in specs {
        s.validate()?;
        if s.train_size > data.dataset.train.len() {
            return Err(Error::Config(format!(
                "`{}` needs {} training examples, the dataset has {}",
                s.name,
                s.train_size,
                data.dataset.train.len()
            )));
        }
    }
    let key = |s: &AblationSpec, seed: u64| RunKey {
        modalities: s.modalities,
        lora: serde_json::to_string(&s.lora).expect("lora config serialises"),
        train_size: s.train_size,
        provider: s.modalities.audio.then_some(s.provider),
        seed,
    };
    let mut unique: BTreeMap<RunKey, (AblationSpec, u64)> = BTreeMap::new();
    for s in specs {
        for &seed in &s.seeds {
            unique.entry(key(s, seed)).or_insert_with(|| (s.clone(), seed));
        }
    }
    let mut encodings: BTreeMap<Option<ProviderTag>, (Vec<EncodedExample>, Vec<EncodedExample>)> = BTreeMap::new();
    for k in unique.keys() {
        if let std::collections::btree_map::Entry::Vacant(e) = encodings.entry(k.provider) {
            e.insert(encode_dataset(data, base.vocab(), config.max_tokens, k.provider)?);
        }
    }
    let work: Vec<(&RunKey, &(AblationSpec, u64))> = unique.iter().collect();
    let run = |(k, (spec, seed)): &(&RunKey, &(AblationSpec, u64))| -> Result<(RunKey, RunOutcome)> {
        let (train, eval) = &encodings[&k.provider];
        let cfg = TrainConfig { seed: *seed, ..config.clone() };
        let (det, report) = train_model(base, spec, &cfg, train, &data.dataset_hash)?;
        let (scores, result) = evaluate(base, &det, eval)?;
        let outcome = RunOutcome {
            params: report.trainable_params,
            eer: result.eer,
            threshold: result.threshold,
            mass_coverage: mass_coverage(&scores, 0.99),
            epoch_loss: report.epoch_loss,
        };
        progress(&record(spec, *seed, &outcome, &data.dataset_hash));
        Ok(((*k).clone(), outcome))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: BTreeMap<RunKey, RunOutcome> =
        pool.install(|| work.par_iter().map(run).collect::<Result<Vec<_>>>())?.into_iter().collect();
    Ok(specs
        .iter()
        .flat_map(|s| s.seeds.iter().map(move |&seed| (s, seed)))
        .map(|(s, seed)| record(s, seed, &outcomes[&key(s, seed)], &data.dataset_hash))
        .collect())
}

fn record(spec: &AblationSpec, seed: u64, o: &RunOutcome, hash: &str) -> RunRecord {
    RunRecord {
        name: spec.name.clone(),
        modalities: spec.modalities,
        lora: spec.lora.enabled,
        train_size: spec.train_size,
        provider: spec.provider,
        seed,
        params: o.params,
        eer: o.eer,
        threshold: o.threshold,
        mass_coverage: o.mass_coverage,
        epoch_loss: o.epoch_loss.clone(),
        dataset_hash: hash.into(),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One line of the aggregated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub modalities: Modalities,
    pub lora: bool,
    pub train_size: usize,
    pub params: BTreeMap<ProviderTag, usize>,
    /// Median EER over seeds.
    pub eer: BTreeMap<ProviderTag, f64>,
    pub seeds: BTreeMap<ProviderTag, usize>,
}

/// Groups records by row name in first-seen order and takes seed medians.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<TableRow>> {
    if let Some(first) = records.first() {
        if let Some(r) = records.iter().find(|r| r.dataset_hash != first.dataset_hash) {
            return Err(Error::Config(format!(
                "rows `{}` and `{}` were run on different datasets",
                first.name, r.name
            )));
        }
    }
    let mut rows: Vec<TableRow> = Vec::new();
    let mut eers: Vec<BTreeMap<ProviderTag, Vec<f64>>> = Vec::new();
    for r in records {
        let i = match rows.iter().position(|t| t.name == r.name) {
            Some(i) => i,
            None => {
                rows.push(TableRow {
                    name: r.name.clone(),
                    modalities: r.modalities,
                    lora: r.lora,
                    train_size: r.train_size,
                    params: BTreeMap::new(),
                    eer: BTreeMap::new(),
                    seeds: BTreeMap::new(),
                });
                eers.push(BTreeMap::new());
                rows.len() - 1
            }
        };
        let row = &mut rows[i];
        if row.modalities != r.modalities || row.lora != r.lora || row.train_size != r.train_size {
            return Err(Error::Config(format!("row `{}` has conflicting configurations", r.name)));
        }
        row.params.insert(r.provider, r.params);
        eers[i].entry(r.provider).or_default().push(r.eer);
    }
    for (row, e) in rows.iter_mut().zip(eers) {
        for (p, v) in e {
            row.seeds.insert(p, v.len());
            row.eer.insert(p, median(&v).expect("nonempty"));
        }
    }
    Ok(rows)
}

/// Aligned text table with one EER column per provider.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut providers: Vec<ProviderTag> = rows.iter().flat_map(|r| r.eer.keys().copied()).collect();
    providers.sort();
    providers.dedup();
    let mut header = vec!["Name".to_string(), "LoRA".into(), "Modalities".into(), "Train".into()];
    for p in &providers {
        header.push(format!("# Param {p}"));
        header.push(format!("EER {p}"));
    }
    let mut lines = vec![header];
    for r in rows {
        let mut cells = vec![
            r.name.clone(),
            if r.lora { "yes" } else { "no" }.into(),
            r.modalities.to_string(),
            r.train_size.to_string(),
        ];
        for p in &providers {
            cells.push(r.params.get(p).map_or("-".into(), |n| n.to_string()));
            cells.push(r.eer.get(p).map_or("-".into(), |e| format!("{:.2}%", 100.0 * e)));
        }
        lines.push(cells);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

pub fn records_to_jsonl(records: &[RunRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialise") + "\n").collect()
}

pub fn parse_run_records(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}
