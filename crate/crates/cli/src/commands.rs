use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ddsd::dataset::grammar::grammar_words;
use ddsd::dataset::{
    pretraining_corpus, read_dataset, write_dataset, Dataset, Manifest, EVAL_FILE, MANIFEST_FILE, TRAIN_FILE,
};
use ddsd::evaluation::{det_curve, mass_coverage, read_scores, write_det, write_scores};
use ddsd::features::ProviderTag;
use ddsd::lm::{pretrain_base, BaseLM, Vocabulary, DEFAULT_VOCAB_SIZE};
use ddsd::lora::LoraConfig;
use ddsd::training::{
    encode_dataset, evaluate, parse_run_records, records_to_jsonl, render_table, run_ablation, summarize, train_model,
    AblationData, AblationSpec, Detector, RunRecord, TrainReport,
};
use serde::Serialize;

use crate::artifacts::{json_bytes, OutputDir};
use crate::config::RunConfig;
use crate::{EvalArgs, GenDataArgs, PretrainArgs, ReportArgs, SweepArgs, TrainArgs};

pub const BASE_FILE: &str = "base.ckpt";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.json";
pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const DET_FILE: &str = "det.txt";
pub const EER_FILE: &str = "eer.json";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const TABLE_FILE: &str = "table.txt";

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .with_context(|| format!("no {name} path: pass --{name} or set paths.{name} in the config"))
}

/// `path` itself, or `file` inside it when `path` is a directory.
fn file_or_dir(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_base(path: &Path) -> Result<BaseLM> {
    let path = file_or_dir(path, BASE_FILE);
    let base = BaseLM::load(&path).with_context(|| format!("loading base model {}", path.display()))?;
    ensure!(base.is_frozen(), "{} is not a frozen base model", path.display());
    Ok(base)
}

fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = RunConfig::from_arg(args.common.config.as_deref())?;
    if let Some(seed) = config.resolve_seed(args.seed)? {
        config.dataset.seed = seed;
    }
    let spec = &mut config.dataset;
    spec.train_size = args.train.unwrap_or(spec.train_size);
    spec.eval_size = args.eval.unwrap_or(spec.eval_size);
    spec.provider = args.provider.unwrap_or(spec.provider);
    spec.inline_frames |= args.inline_frames;
    let out = required(args.common.out, &config.paths.out, "out")?;
    config.paths.out = Some(out.clone());

    let data = ddsd::dataset::gen_dataset(&config.dataset)?;
    let mut dir = OutputDir::create(&out, "gen-data", &config)?;
    let manifest = write_dataset(&out, &config.dataset, &data)?;
    for f in [TRAIN_FILE, EVAL_FILE, MANIFEST_FILE] {
        dir.record(f)?;
    }
    let (back, _) = load_dataset(&out)?;
    ensure!(back == manifest, "manifest in {} does not read back", out.display());
    dir.finish()?;
    println!(
        "wrote {} train and {} eval examples to {} (dataset hash {})",
        data.train.len(),
        data.eval.len(),
        out.display(),
        manifest.dataset_hash
    );
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut config = RunConfig::from_arg(args.common.config.as_deref())?;
    if let Some(seed) = config.resolve_seed(args.seed)? {
        config.model.seed = seed;
    }
    config.corpus.sentences = args.sentences.unwrap_or(config.corpus.sentences);
    config.pretrain.epochs = args.epochs.unwrap_or(config.pretrain.epochs);
    let out = required(args.common.out, &config.paths.out, "out")?;
    config.paths.out = Some(out.clone());

    let vocab = Vocabulary::build(grammar_words(), DEFAULT_VOCAB_SIZE)?;
    let corpus = pretraining_corpus(&config.dataset, config.corpus.sentences);
    eprintln!("pretraining on {} sentences for {} epochs", corpus.len(), config.pretrain.epochs);
    let (base, report) = pretrain_base(config.model.clone(), vocab, &corpus, &config.pretrain)?;
    let mut dir = OutputDir::create(&out, "pretrain", &config)?;
    let path = dir.write(BASE_FILE, &base.to_checkpoint().to_bytes())?;
    dir.write(PRETRAIN_REPORT_FILE, &json_bytes(&report)?)?;
    ensure!(load_base(&path)?.bit_eq(&base), "{} does not read back", path.display());
    dir.finish()?;
    println!("epoch loss {:?}; wrote {}", report.epoch_loss, path.display());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::from_arg(args.common.config.as_deref())?;
    if let Some(seed) = config.resolve_seed(args.seed)? {
        config.train.seed = seed;
    }
    let run = &mut config.run;
    run.modalities = args.modalities.unwrap_or(run.modalities);
    run.train_size = args.train_size.or(run.train_size);
    run.provider = args.provider.or(run.provider);
    if args.no_lora {
        config.lora = LoraConfig::disabled();
    }
    config.train.epochs = args.epochs.unwrap_or(config.train.epochs);
    if let Some(m) = args.loss_mask {
        config.train.loss_mask = m.into();
    }
    let data_dir = required(args.data, &config.paths.data, "data")?;
    let base_path = required(args.base, &config.paths.base, "base")?;
    let out = required(args.common.out, &config.paths.out, "out")?;
    config.paths.data = Some(data_dir.clone());
    config.paths.base = Some(base_path.clone());
    config.paths.out = Some(out.clone());

    let base = load_base(&base_path)?;
    let (manifest, dataset) = load_dataset(&data_dir)?;
    let provider = config.run.provider.unwrap_or(manifest.spec.provider);
    let spec = AblationSpec {
        name: config.run.name.clone(),
        modalities: config.run.modalities,
        lora: config.lora.clone(),
        train_size: config.run.train_size.unwrap_or(dataset.train.len()),
        provider,
        seeds: vec![config.train.seed],
    };
    spec.validate()?;
    let data =
        AblationData { dataset: &dataset, dataset_hash: manifest.dataset_hash.clone(), frames_dir: data_dir.clone() };
    let audio = spec.modalities.audio.then_some(provider);
    let (train, _) = encode_dataset(&data, base.vocab(), config.train.max_tokens, audio)?;
    eprintln!("training {} on {} examples", spec.modalities, spec.train_size);
    let (det, report) = train_model(&base, &spec, &config.train, &train, &manifest.dataset_hash)?;

    let mut dir = OutputDir::create(&out, "train", &config)?;
    let path = dir.write(DETECTOR_FILE, &det.to_checkpoint().to_bytes())?;
    dir.write(TRAIN_REPORT_FILE, &json_bytes(&report)?)?;
    let back = Detector::load(&base, &path).with_context(|| format!("reading back {}", path.display()))?;
    ensure!(back.bit_eq(&det), "{} does not read back", path.display());
    dir.finish()?;
    println!(
        "{} trainable parameters, epoch loss {:?}, {:.1} s; wrote {}",
        report.trainable_params,
        report.epoch_loss,
        report.wall_time_secs,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    eer: f64,
    threshold: f64,
    n_directed: usize,
    n_non_directed: usize,
    /// Share of examples with p_yes + p_no >= 0.99.
    mass_coverage: f64,
    provider: Option<ProviderTag>,
    dataset_hash: String,
}

/// Provider the detector was trained with, if its report sits next to it.
fn trained_provider(detector: &Path) -> Result<Option<ProviderTag>> {
    let dir = if detector.is_dir() {
        detector.to_path_buf()
    } else {
        detector.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let path = dir.join(TRAIN_REPORT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: TrainReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(report.spec.provider))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut config = RunConfig::from_arg(args.common.config.as_deref())?;
    config.resolve_seed(None)?;
    let data_dir = required(args.data, &config.paths.data, "data")?;
    let base_path = required(args.base, &config.paths.base, "base")?;
    let det_path = required(args.detector, &config.paths.detector, "detector")?;
    let out = required(args.common.out, &config.paths.out, "out")?;
    config.paths.data = Some(data_dir.clone());
    config.paths.base = Some(base_path.clone());
    config.paths.detector = Some(det_path.clone());
    config.paths.out = Some(out.clone());

    let base = load_base(&base_path)?;
    let det_file = file_or_dir(&det_path, DETECTOR_FILE);
    let det = Detector::load(&base, &det_file).with_context(|| format!("loading detector {}", det_file.display()))?;
    let (manifest, dataset) = load_dataset(&data_dir)?;
    let provider = match args.provider.or(config.run.provider) {
        Some(p) => Some(p),
        None => trained_provider(&det_path)?.or(Some(manifest.spec.provider)),
    };
    let provider = provider.filter(|_| det.modalities().audio);
    config.run.provider = provider;
    config.run.modalities = det.modalities();
    let data =
        AblationData { dataset: &dataset, dataset_hash: manifest.dataset_hash.clone(), frames_dir: data_dir.clone() };
    let (_, eval_set) = encode_dataset(&data, base.vocab(), det.max_tokens(), provider)?;
    let (scores, result) = evaluate(&base, &det, &eval_set)?;

    let mut dir = OutputDir::create(&out, "eval", &config)?;
    write_scores(&scores, dir.path(SCORES_FILE))?;
    dir.record(SCORES_FILE)?;
    write_det(&det_curve(&scores)?, dir.path(DET_FILE))?;
    dir.record(DET_FILE)?;
    let summary = EvalSummary {
        eer: result.eer,
        threshold: result.threshold,
        n_directed: result.n_directed,
        n_non_directed: result.n_non_directed,
        mass_coverage: mass_coverage(&scores, 0.99),
        provider,
        dataset_hash: manifest.dataset_hash,
    };
    dir.write(EER_FILE, &json_bytes(&summary)?)?;
    ensure!(read_scores(dir.path(SCORES_FILE))? == scores, "{} does not read back", dir.path(SCORES_FILE).display());
    dir.finish()?;
    println!(
        "EER {:.4} at threshold {:.6} on {} examples; p_yes + p_no >= 0.99 on {:.1}%",
        summary.eer,
        summary.threshold,
        scores.len(),
        100.0 * summary.mass_coverage
    );
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let mut config = RunConfig::from_arg(args.common.config.as_deref())?;
    config.resolve_seed(None)?;
    config.sweep.jobs = args.jobs.unwrap_or(config.sweep.jobs);
    config.train.epochs = args.epochs.unwrap_or(config.train.epochs);
    let data_dir = required(args.data, &config.paths.data, "data")?;
    let base_path = required(args.base, &config.paths.base, "base")?;
    let out = required(args.common.out, &config.paths.out, "out")?;
    config.paths.data = Some(data_dir.clone());
    config.paths.base = Some(base_path.clone());
    config.paths.out = Some(out.clone());

    let base = load_base(&base_path)?;
    let (manifest, dataset) = load_dataset(&data_dir)?;
    let specs = config.ablation_specs(dataset.train.len())?;
    let data =
        AblationData { dataset: &dataset, dataset_hash: manifest.dataset_hash.clone(), frames_dir: data_dir.clone() };
    let runs: usize = specs.iter().map(|s| s.seeds.len()).sum();
    eprintln!("sweeping {} rows ({runs} runs) on {} threads", specs.len(), config.sweep.jobs);
    let progress = |r: &RunRecord| {
        eprintln!(
            "  {:<10} {:<6} {:<16} n={:<5} seed={} EER {:.4}",
            r.name,
            r.modalities.to_string(),
            r.provider.to_string(),
            r.train_size,
            r.seed,
            r.eer
        );
    };
    let records = run_ablation(&base, &specs, &config.train, &data, config.sweep.jobs, &progress)?;
    let table = render_table(&summarize(&records)?);

    let mut dir = OutputDir::create(&out, "sweep", &config)?;
    let jsonl = records_to_jsonl(&records);
    let path = dir.write(RUNS_FILE, jsonl.as_bytes())?;
    dir.write(TABLE_FILE, table.as_bytes())?;
    let back = parse_run_records(&std::fs::read_to_string(&path)?)?;
    ensure!(back == records, "{} does not read back", path.display());
    dir.finish()?;
    print!("{table}");
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<()> {
    let path = file_or_dir(&args.input, RUNS_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_run_records(&text).with_context(|| format!("parsing {}", path.display()))?;
    if records.is_empty() {
        bail!("{} holds no run records", path.display());
    }
    print!("{}", render_table(&summarize(&records)?));
    Ok(())
}
