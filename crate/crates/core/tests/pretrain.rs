use ddsd::dataset::grammar::grammar_words;
use ddsd::dataset::{pretraining_corpus, DatasetSpec, DEFAULT_CORPUS_SIZE};
use ddsd::lm::{
    perplexity, pretrain_base, ModelConfig, PretrainConfig, Vocabulary, DEFAULT_MAX_TOKENS, DEFAULT_VOCAB_SIZE,
};

#[test]
fn default_pretraining_reaches_low_held_out_perplexity() {
    let vocab = Vocabulary::build(grammar_words(), DEFAULT_VOCAB_SIZE).unwrap();
    let corpus = pretraining_corpus(&DatasetSpec::default(), DEFAULT_CORPUS_SIZE);
    let (base, report) = pretrain_base(ModelConfig::default(), vocab, &corpus, &PretrainConfig::default()).unwrap();
    assert!(base.is_frozen());
    assert!(report.epoch_loss.windows(2).all(|w| w[1] < w[0]), "{:?}", report.epoch_loss);

    // A different seed gives sentences the model has not been trained on.
    let held_out = pretraining_corpus(&DatasetSpec { seed: 977, ..DatasetSpec::default() }, 2000);
    let ppl = perplexity(&base, &held_out, DEFAULT_MAX_TOKENS).unwrap();
    assert!(ppl < 20.0, "{ppl}");

    let untrained = ddsd::lm::BaseLM::init(ModelConfig::default(), base.vocab().clone()).unwrap();
    let uniform = perplexity(&untrained, &held_out, DEFAULT_MAX_TOKENS).unwrap();
    assert!(uniform > 250.0, "{uniform}");
    println!("held-out perplexity {ppl:.3}, untrained {uniform:.1}");
}
