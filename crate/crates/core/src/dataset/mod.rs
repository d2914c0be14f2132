//! Synthetic multimodal benchmark and its JSON Lines record format.
//!
//! One example per line, fields in this order:
//!
//! ```text
//! {"id": "train-000000", "label": "directed" | "non_directed", "text": "...",
//!  "signals": {"graph_cost_avg": .., "acoustic_cost_avg": .., "confidence_avg": .., "alt_words_avg": ..},
//!  "frames": [[..], ..]            T×N inline matrix, or
//!  "frames_ref": "synth:<provider>:<seed>" | "file:<sidecar path>",
//!  "split": "train" | "eval"}
//! ```
//!
//! `synth:` references are regenerated from the seed; `file:` references name
//! a checkpoint container, relative to the dataset file, holding one tensor
//! per example id.

pub mod grammar;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{synth_audio_with, synth_signals, AudioFrames, DecoderSignals, ProviderSpec, ProviderTag};
use crate::lm::Checkpoint;
use crate::rng::Rng;
use crate::tensor::Tensor;
use grammar::{display, TemplateSet, AMBIGUOUS_SET, ANSWER_SET, DIRECTED_SET, NON_DIRECTED_SET, TRIGGER_WORD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Directed,
    NonDirected,
}

impl Label {
    /// +1 for directed, −1 otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Label::Directed => 1.0,
            Label::NonDirected => -1.0,
        }
    }

    pub fn is_directed(self) -> bool {
        self == Label::Directed
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Directed => "directed",
            Label::NonDirected => "non_directed",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Where an example's audio frames live.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    Inline(Tensor),
    Ref(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub label: Label,
    pub text: String,
    pub signals: DecoderSignals,
    pub frames: FrameSource,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: Label,
    text: String,
    signals: DecoderSignals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames_ref: Option<String>,
    split: Split,
}

impl MultimodalExample {
    fn to_record(&self) -> Record {
        let (frames, frames_ref) = match &self.frames {
            FrameSource::Inline(t) => (Some((0..t.rows()).map(|r| t.row(r).to_vec()).collect()), None),
            FrameSource::Ref(r) => (None, Some(r.clone())),
        };
        Record {
            id: self.id.clone(),
            label: self.label,
            text: self.text.clone(),
            signals: self.signals,
            frames,
            frames_ref,
            split: self.split,
        }
    }

    fn from_record(r: Record) -> Result<Self> {
        r.signals.validate()?;
        let frames = match (r.frames, r.frames_ref) {
            (Some(rows), None) => {
                let t = rows.len();
                let n = rows.first().map_or(0, Vec::len);
                if t == 0 || n == 0 || rows.iter().any(|row| row.len() != n) {
                    return Err(Error::Shape("frames must be a nonempty rectangular matrix".into()));
                }
                FrameSource::Inline(Tensor::new(vec![t, n], rows.concat())?)
            }
            (None, Some(reference)) => FrameSource::Ref(reference),
            _ => return Err(Error::Config("exactly one of `frames` and `frames_ref` is required".into())),
        };
        Ok(Self { id: r.id, label: r.label, text: r.text, signals: r.signals, frames, split: r.split })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("records serialise")
    }
}

/// Serialises examples as JSON Lines.
pub fn records_to_bytes(examples: &[MultimodalExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in examples {
        out.extend_from_slice(e.to_json_line().as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn write_records(examples: &[MultimodalExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&records_to_bytes(examples)).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Parses JSON Lines; blank lines are skipped, ids must be unique.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<MultimodalExample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let ex = MultimodalExample::from_record(rec).map_err(|e| parse(e.to_string()))?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MultimodalExample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_records(BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_directed_fraction: f64,
    pub provider: ProviderTag,
    pub seed: u64,
    /// Fraction of each class drawn from the shared ambiguous pool.
    pub ambiguity: f64,
    /// Probability that a directed-template utterance starts with the trigger marker.
    pub trigger_fraction: f64,
    /// Store frames inline instead of as regenerable references.
    pub inline_frames: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_size: 8000,
            eval_size: 2000,
            eval_directed_fraction: 0.40,
            provider: ProviderTag::Specialized256,
            seed: 42,
            ambiguity: 0.25,
            trigger_fraction: 0.0,
            inline_frames: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.train_size.is_multiple_of(2) {
            return Err(Error::Config(format!("train size {} cannot be split exactly in half", self.train_size)));
        }
        for (name, p) in [
            ("eval_directed_fraction", self.eval_directed_fraction),
            ("ambiguity", self.ambiguity),
            ("trigger_fraction", self.trigger_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.provider == ProviderTag::External {
            return Err(Error::Config("external frames cannot be generated; ingest them as records".into()));
        }
        Ok(())
    }

    pub fn eval_directed(&self) -> usize {
        (self.eval_directed_fraction * self.eval_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<MultimodalExample>,
    pub eval: Vec<MultimodalExample>,
}

/// Hypothesis words for one utterance of `label`.
pub fn sample_text(spec: &DatasetSpec, id: &str, label: Label) -> String {
    let mut rng = Rng::stream(spec.seed, &format!("text/{id}"), 0);
    let ambiguous = rng.bernoulli(spec.ambiguity);
    let set: TemplateSet = match (ambiguous, label) {
        (true, _) => AMBIGUOUS_SET,
        (false, Label::Directed) => DIRECTED_SET,
        (false, Label::NonDirected) => NON_DIRECTED_SET,
    };
    let mut words = set.sample(&mut rng);
    if !ambiguous && label.is_directed() && spec.trigger_fraction > 0.0 && rng.bernoulli(spec.trigger_fraction) {
        words.insert(0, TRIGGER_WORD);
    }
    display(&words)
}

pub fn synth_ref(tag: ProviderTag, seed: u64) -> String {
    format!("synth:{tag}:{seed}")
}

/// Generates both splits. Train labels alternate so every even-length
/// prefix is balanced; eval holds exactly `round(fraction · n)` directed
/// examples in shuffled order.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train_labels: Vec<Label> =
        (0..spec.train_size).map(|i| if i % 2 == 0 { Label::Directed } else { Label::NonDirected }).collect();
    let n_dir = spec.eval_directed();
    let mut eval_labels: Vec<Label> =
        (0..spec.eval_size).map(|i| if i < n_dir { Label::Directed } else { Label::NonDirected }).collect();
    Rng::stream(spec.seed, "eval-labels", 0).shuffle(&mut eval_labels);

    let provider = spec.provider.spec().expect("validated provider");
    let direction = provider.direction(spec.seed);
    let make = |split: Split, labels: &[Label]| -> Result<Vec<MultimodalExample>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let id = format!("{}-{i:06}", split.name());
                let frames = if spec.inline_frames {
                    FrameSource::Inline(synth_audio_with(&id, label, split, &provider, spec.seed, &direction)?.frames)
                } else {
                    FrameSource::Ref(synth_ref(spec.provider, spec.seed))
                };
                Ok(MultimodalExample {
                    text: sample_text(spec, &id, label),
                    signals: synth_signals(&id, label, spec.seed),
                    frames,
                    split,
                    label,
                    id,
                })
            })
            .collect()
    };
    Ok(Dataset { train: make(Split::Train, &train_labels)?, eval: make(Split::Eval, &eval_labels)? })
}

/// Every this many pretraining sentences, one is drawn from the answer templates.
pub const ANSWER_EVERY: usize = 10;

/// Sentences in the default pretraining corpus.
pub const DEFAULT_CORPUS_SIZE: usize = 20_000;

/// Pretraining sentences from the benchmark grammar with labels discarded,
/// interleaved with answer sentences.
pub fn pretraining_corpus(spec: &DatasetSpec, sentences: usize) -> Vec<String> {
    (0..sentences)
        .map(|i| {
            let id = format!("corpus-{i:06}");
            if i % ANSWER_EVERY == ANSWER_EVERY - 1 {
                let mut rng = Rng::stream(spec.seed, &format!("text/{id}"), 0);
                return display(&ANSWER_SET.sample(&mut rng));
            }
            let label = if i % 2 == 0 { Label::Directed } else { Label::NonDirected };
            sample_text(spec, &id, label)
        })
        .collect()
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a dataset: SHA-256 over both splits' record bytes.
pub fn dataset_hash(train: &[MultimodalExample], eval: &[MultimodalExample]) -> String {
    let mut h = Sha256::new();
    h.update(sha256_hex(&records_to_bytes(train)).as_bytes());
    h.update(sha256_hex(&records_to_bytes(eval)).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub train_file: String,
    pub eval_file: String,
    pub train_sha256: String,
    pub eval_sha256: String,
    pub dataset_hash: String,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.jsonl`, `eval.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, data: &Dataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let train = records_to_bytes(&data.train);
    let eval = records_to_bytes(&data.eval);
    for (name, bytes) in [(TRAIN_FILE, &train), (EVAL_FILE, &eval)] {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::file(&p, e))?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        train_file: TRAIN_FILE.into(),
        eval_file: EVAL_FILE.into(),
        train_sha256: sha256_hex(&train),
        eval_sha256: sha256_hex(&eval),
        dataset_hash: dataset_hash(&data.train, &data.eval),
    };
    let p = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&p, json).map_err(|e| Error::file(&p, e))?;
    Ok(manifest)
}

/// Reads a dataset directory and checks its files against the manifest.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Dataset)> {
    let dir = dir.as_ref();
    let mp = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::file(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let load = |name: &str, expected: &str| -> Result<Vec<MultimodalExample>> {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::file(&p, e))?;
        if sha256_hex(&bytes) != expected {
            return Err(Error::Config(format!("{} does not match its manifest hash", p.display())));
        }
        parse_records(&bytes[..])
    };
    let train = load(&manifest.train_file, &manifest.train_sha256)?;
    let eval = load(&manifest.eval_file, &manifest.eval_sha256)?;
    let ids: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    if let Some(e) = eval.iter().find(|e| ids.contains(e.id.as_str())) {
        return Err(Error::DuplicateId(e.id.clone()));
    }
    Ok((manifest, Dataset { train, eval }))
}

/// Writes frames to a sidecar container keyed by example id.
pub fn write_frames_sidecar<'t>(
    path: impl AsRef<Path>,
    frames: impl IntoIterator<Item = (&'t str, &'t Tensor)>,
) -> Result<()> {
    let mut c = Checkpoint::new(r#"{"kind":"frames"}"#.into());
    for (id, t) in frames {
        c.push(id, t.clone());
    }
    c.save(path)
}

/// Materialises audio frames, regenerating `synth:` references and caching
/// `file:` sidecars.
pub struct FrameResolver {
    base_dir: PathBuf,
    /// Synthetic provider to use instead of the one named in a reference.
    provider_override: Option<ProviderTag>,
    sidecars: HashMap<PathBuf, HashMap<String, Tensor>>,
    directions: HashMap<(ProviderTag, u64), (ProviderSpec, Vec<f64>)>,
}

impl FrameResolver {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            provider_override: None,
            sidecars: HashMap::new(),
            directions: HashMap::new(),
        }
    }

    /// Regenerates synthetic references with `tag` instead of their own provider.
    pub fn with_provider(mut self, tag: Option<ProviderTag>) -> Self {
        self.provider_override = tag;
        self
    }

    pub fn resolve(&mut self, ex: &MultimodalExample) -> Result<AudioFrames> {
        match &ex.frames {
            FrameSource::Inline(t) => Ok(AudioFrames { tag: ProviderTag::External, frames: t.clone() }),
            FrameSource::Ref(r) => {
                if let Some(rest) = r.strip_prefix("synth:") {
                    let (tag, seed) =
                        rest.split_once(':').ok_or_else(|| Error::Config(format!("malformed frames_ref `{r}`")))?;
                    let tag: ProviderTag = self.provider_override.map_or_else(|| tag.parse(), Ok)?;
                    let seed: u64 =
                        seed.parse().map_err(|_| Error::Config(format!("malformed seed in frames_ref `{r}`")))?;
                    let spec = tag.spec().ok_or_else(|| Error::Config(format!("provider {tag} is not synthetic")))?;
                    let (spec, dir) =
                        self.directions.entry((tag, seed)).or_insert_with(|| (spec, spec.direction(seed)));
                    synth_audio_with(&ex.id, ex.label, ex.split, spec, seed, dir)
                } else if let Some(file) = r.strip_prefix("file:") {
                    let path = self.base_dir.join(file);
                    if !self.sidecars.contains_key(&path) {
                        let c = Checkpoint::load(&path)?;
                        self.sidecars.insert(path.clone(), c.tensors.into_iter().collect());
                    }
                    let t = self.sidecars[&path]
                        .get(&ex.id)
                        .ok_or_else(|| Error::Config(format!("{} has no frames for `{}`", path.display(), ex.id)))?;
                    Ok(AudioFrames { tag: ProviderTag::External, frames: t.clone() })
                } else {
                    Err(Error::Config(format!("unknown frames_ref scheme in `{r}`")))
                }
            }
        }
    }
}

/// Mean word count per label.
pub fn mean_words(examples: &[MultimodalExample], label: Label) -> f64 {
    let counts: Vec<usize> =
        examples.iter().filter(|e| e.label == label).map(|e| e.text.split_whitespace().count()).collect();
    counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64
}
