use serde::{Deserialize, Serialize};

use super::model::{BaseLM, Mode, ModelConfig, NoHook, PackedInput};
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Sentences longer than this are truncated.
    pub max_tokens: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 32, adam: AdamConfig::default(), max_tokens: super::vocab::DEFAULT_MAX_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean next-token loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub sequences: usize,
}

fn encode(vocab: &Vocabulary, corpus: &[String], max_tokens: usize) -> Vec<Vec<TokenId>> {
    corpus.iter().map(|s| vocab.tokenize(s, max_tokens)).filter(|t| t.len() >= 2).collect()
}

/// Mean next-token negative log-likelihood over `batch`, as a graph scalar.
fn batch_loss<'a>(model: &'a BaseLM, g: &mut Graph<'a>, batch: &[&[TokenId]]) -> Result<crate::tensor::Var> {
    let seqs: Vec<_> = batch.iter().map(|t| ((0..t.len()).collect::<Vec<_>>(), vec![true; t.len()])).collect();
    let packed = PackedInput::new(&seqs)?;
    let ids: Vec<TokenId> = batch.iter().flat_map(|t| t.iter().copied()).collect();
    let x = model.embed_tokens(g, &ids)?;
    let h = model.hidden(g, x, &packed, &NoHook, &mut Mode::Eval)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (seg, t) in packed.layout.segments().iter().zip(batch) {
        for j in 0..t.len() - 1 {
            rows.push(seg.start + j);
            targets.push(t[j + 1]);
        }
    }
    let logits = model.logits(g, h, &rows)?;
    let w = vec![1.0 / targets.len() as f64; targets.len()];
    g.cross_entropy(logits, &targets, &w)
}

/// Trains a fresh model on next-token prediction over `corpus`, then freezes it.
pub fn pretrain_base(
    model_config: ModelConfig,
    vocab: Vocabulary,
    corpus: &[String],
    config: &PretrainConfig,
) -> Result<(BaseLM, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if config.max_tokens > model_config.max_seq_len {
        return Err(Error::SequenceTooLong { len: config.max_tokens, max: model_config.max_seq_len });
    }
    let seed = model_config.seed;
    let mut model = BaseLM::init(model_config, vocab)?;
    let data = encode(model.vocab(), corpus, config.max_tokens);
    if data.is_empty() {
        return Err(Error::Empty("pretraining corpus has no sentence of two or more tokens".into()));
    }
    let mut report = PretrainReport { epoch_loss: Vec::with_capacity(config.epochs), sequences: data.len() };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::stream(seed, "pretrain-shuffle", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let grads = {
                let mut g = Graph::new();
                let loss = batch_loss(&model, &mut g, &batch)?;
                total += g.value(loss).data()[0];
                g.backward(loss)?
            };
            model.params_mut().adam_step(&grads, &config.adam)?;
            batches += 1;
        }
        report.epoch_loss.push(total / batches as f64);
    }
    model.freeze();
    Ok((model, report))
}

/// exp of the mean next-token negative log-likelihood over `sentences`.
pub fn perplexity(model: &BaseLM, sentences: &[String], max_tokens: usize) -> Result<f64> {
    let data = encode(model.vocab(), sentences, max_tokens);
    if data.is_empty() {
        return Err(Error::Empty("perplexity sample".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(64) {
        let batch: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let n: usize = batch.iter().map(|t| t.len() - 1).sum();
        let mut g = Graph::new();
        let loss = batch_loss(model, &mut g, &batch)?;
        nll += g.value(loss).data()[0] * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients_in, GradCheckConfig};

    fn tiny() -> (ModelConfig, Vocabulary, Vec<String>) {
        let corpus: Vec<String> = ["set an alarm", "tell me a joke", "set a timer", "tell me the time"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = Vocabulary::build(corpus.iter().map(String::as_str), 24).unwrap();
        let cfg = ModelConfig { embed_dim: 8, layers: 1, heads: 2, ff_dim: 12, max_seq_len: 16, seed: 11 };
        (cfg, vocab, corpus)
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (cfg, vocab, _) = tiny();
        assert!(matches!(pretrain_base(cfg, vocab, &[], &PretrainConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (cfg, vocab, corpus) = tiny();
        let init = BaseLM::init(cfg.clone(), vocab.clone()).unwrap();
        let pc = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let (m, report) = pretrain_base(cfg, vocab, &corpus, &pc).unwrap();
        assert!(m.bit_eq(&init));
        assert!(m.is_frozen());
        assert!(report.epoch_loss.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let (cfg, vocab, corpus) = tiny();
        let corpus: Vec<String> = corpus.iter().cycle().take(64).cloned().collect();
        let pc = PretrainConfig { epochs: 4, batch_size: 8, ..PretrainConfig::default() };
        let (a, ra) = pretrain_base(cfg.clone(), vocab.clone(), &corpus, &pc).unwrap();
        let (b, _) = pretrain_base(cfg, vocab, &corpus, &pc).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert!(ra.epoch_loss.last().unwrap() < &ra.epoch_loss[0]);
        let ppl = perplexity(&a, &corpus, 16).unwrap();
        assert!(ppl < 24.0, "{ppl}");
    }

    #[test]
    fn next_token_loss_gradients_match_finite_differences() {
        let (cfg, vocab, corpus) = tiny();
        let cfg = ModelConfig { layers: 2, ..cfg };
        let mut model = BaseLM::init(cfg, vocab).unwrap();
        let data = encode(model.vocab(), &corpus, 16);
        let gc = GradCheckConfig { coords_per_param: 6, step: 1e-4, ..GradCheckConfig::default() };
        let report = check_gradients_in(&mut model, BaseLM::params_mut, &gc, |m, g| {
            let batch: Vec<&[TokenId]> = data.iter().map(Vec::as_slice).collect();
            batch_loss(m, g, &batch)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
