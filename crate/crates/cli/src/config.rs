use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddsd::dataset::{sha256_hex, DatasetSpec, DEFAULT_CORPUS_SIZE};
use ddsd::features::ProviderTag;
use ddsd::lm::{ModelConfig, PretrainConfig};
use ddsd::lora::LoraConfig;
use ddsd::prefix::Modalities;
use ddsd::training::{table1_specs, AblationSpec, TrainConfig, DEFAULT_SIZE_SWEEP};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DDSD_SEED";
pub const CONFIG_FILE: &str = "run_config.toml";

/// Everything a command needs; read from TOML, then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; replaces the seed of whichever stage a command runs.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub run: RunSection,
    pub sweep: SweepConfig,
    pub ablation: Vec<AblationSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sentences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { sentences: DEFAULT_CORPUS_SIZE }
    }
}

/// A single training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub modalities: Modalities,
    /// Defaults to the whole training split.
    pub train_size: Option<usize>,
    /// Audio provider; defaults to the one the dataset was generated with.
    pub provider: Option<ProviderTag>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "run".into(), modalities: Modalities::ALL, train_size: None, provider: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Rows generated ahead of any explicit `[[ablation]]` entries.
    pub preset: Option<Preset>,
    pub providers: Vec<ProviderTag>,
    /// Training examples of the full-size rows; defaults to the training split.
    pub full_size: Option<usize>,
    pub sizes: Vec<usize>,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            preset: None,
            providers: vec![ProviderTag::Specialized256, ProviderTag::Generic1024],
            sizes: DEFAULT_SIZE_SWEEP.to_vec(),
            full_size: None,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file if given, otherwise defaults.
    pub fn from_arg(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Flag, then config file, then `DDSD_SEED`.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<Option<u64>> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().with_context(|| format!("{SEED_ENV}={v} is not a seed"))?),
            Err(_) => None,
        };
        self.seed = flag.or(self.seed).or(env);
        Ok(self.seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising the effective config")
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Rows of the sweep: the preset first, then explicit entries.
    pub fn ablation_specs(&self, train_len: usize) -> Result<Vec<AblationSpec>> {
        let mut specs = match self.sweep.preset {
            Some(Preset::Table1) => {
                let full = self.sweep.full_size.unwrap_or(train_len);
                table1_specs(&self.sweep.providers, full, &self.sweep.sizes)
            }
            None => Vec::new(),
        };
        specs.extend(self.ablation.iter().cloned());
        if specs.is_empty() {
            bail!("the config defines no ablation rows (set sweep.preset or add [[ablation]] entries)");
        }
        Ok(specs)
    }
}
