//! Decoder signals, unit-interval scaling and synthetic audio encoders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SIGNAL_DIM: usize = 4;

/// Latent class shift per signal dimension; the four-dimensional channel has
/// Bayes error Φ(−2·SIGNAL_SHIFT) ≈ 0.32.
pub const SIGNAL_SHIFT: f64 = 0.2338;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSignals {
    pub graph_cost_avg: f64,
    pub acoustic_cost_avg: f64,
    pub confidence_avg: f64,
    pub alt_words_avg: f64,
}

impl DecoderSignals {
    pub fn to_array(&self) -> [f64; SIGNAL_DIM] {
        [self.graph_cost_avg, self.acoustic_cost_avg, self.confidence_avg, self.alt_words_avg]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("decoder signal".into()));
        }
        if self.graph_cost_avg < 0.0 || self.acoustic_cost_avg < 0.0 {
            return Err(Error::Config("decoder costs must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_avg) {
            return Err(Error::Config(format!("confidence {} outside [0, 1]", self.confidence_avg)));
        }
        if self.alt_words_avg < 1.0 {
            return Err(Error::Config(format!("alternatives per word {} below 1", self.alt_words_avg)));
        }
        Ok(())
    }
}

/// Per-dimension min-max statistics of a fitting set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerStats {
    pub min: [f64; SIGNAL_DIM],
    pub max: [f64; SIGNAL_DIM],
    pub zero_range: [bool; SIGNAL_DIM],
}

impl ScalerStats {
    pub fn fit(signals: &[DecoderSignals]) -> Result<Self> {
        if signals.is_empty() {
            return Err(Error::Empty("scaler fitting set".into()));
        }
        let mut min = [f64::INFINITY; SIGNAL_DIM];
        let mut max = [f64::NEG_INFINITY; SIGNAL_DIM];
        for s in signals {
            for (k, x) in s.to_array().into_iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite("decoder signal".into()));
                }
                min[k] = min[k].min(x);
                max[k] = max[k].max(x);
            }
        }
        let zero_range = std::array::from_fn(|k| min[k] == max[k]);
        Ok(Self { min, max, zero_range })
    }

    /// `(x − min)/(max − min)` clamped into [0, 1]; zero-range dimensions map to 0.
    pub fn apply(&self, signals: &DecoderSignals) -> [f64; SIGNAL_DIM] {
        let x = signals.to_array();
        std::array::from_fn(|k| {
            if self.zero_range[k] {
                0.0
            } else {
                ((x[k] - self.min[k]) / (self.max[k] - self.min[k])).clamp(0.0, 1.0)
            }
        })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decoder signals for one utterance. A latent `z ~ N(±SIGNAL_SHIFT, I)`
/// (positive for directed speech) is pushed through monotone maps: costs
/// fall and confidence rises with `z`, alternatives per word fall.
pub fn synth_signals(id: &str, label: Label, seed: u64) -> DecoderSignals {
    let mut rng = Rng::stream(seed, &format!("signals/{id}"), 0);
    let y = label.sign();
    let z: [f64; SIGNAL_DIM] = std::array::from_fn(|_| y * SIGNAL_SHIFT + rng.normal());
    DecoderSignals {
        graph_cost_avg: 3.0 * softplus(1.0 - z[0]),
        acoustic_cost_avg: 1.5 * softplus(0.5 - z[1]),
        confidence_avg: sigmoid(1.0 + z[2]),
        alt_words_avg: 1.0 + softplus(-z[3]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProviderTag {
    #[serde(rename = "generic-1024")]
    Generic1024,
    #[serde(rename = "specialized-256")]
    Specialized256,
    #[serde(rename = "external")]
    External,
}

impl ProviderTag {
    pub fn name(self) -> &'static str {
        match self {
            ProviderTag::Generic1024 => "generic-1024",
            ProviderTag::Specialized256 => "specialized-256",
            ProviderTag::External => "external",
        }
    }

    /// The synthetic encoder behind this tag; none for external features.
    pub fn spec(self) -> Option<ProviderSpec> {
        match self {
            ProviderTag::Generic1024 => Some(ProviderSpec::generic()),
            ProviderTag::Specialized256 => Some(ProviderSpec::specialized()),
            ProviderTag::External => None,
        }
    }
}

impl fmt::Display for ProviderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProviderTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ProviderTag::Generic1024, ProviderTag::Specialized256, ProviderTag::External]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown audio provider `{s}`")))
    }
}

/// Lognormal utterance duration in seconds, given by its mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub mean: f64,
    pub std: f64,
}

impl DurationModel {
    /// Per-class, per-split durations of the reference corpus.
    pub fn for_class(split: Split, label: Label) -> Self {
        let (mean, std) = match (split, label) {
            (Split::Train, Label::Directed) => (5.22, 6.97),
            (Split::Train, Label::NonDirected) => (6.04, 5.33),
            (Split::Eval, Label::Directed) => (3.01, 1.89),
            (Split::Eval, Label::NonDirected) => (3.66, 3.67),
        };
        Self { mean, std }
    }

    /// `(μ, σ)` of the underlying normal.
    pub fn log_params(&self) -> (f64, f64) {
        let s2 = (1.0 + (self.std / self.mean).powi(2)).ln();
        (self.mean.ln() - s2 / 2.0, s2.sqrt())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let (m, s) = self.log_params();
        (m + s * rng.normal()).exp()
    }
}

/// Class-conditional Gaussian frame generator.
///
/// Frame `t` of an utterance is `±μ·u + z + σ_f·ε_t` on the first
/// `core_dims` coordinates, where `u` is a seed-fixed unit direction and
/// `z ~ N(0, σ_u² I)` is shared by all frames; the remaining coordinates
/// carry class-independent nuisance `z' + σ_f·ε_t` with `z' ~ N(0, σ_n² I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub tag: ProviderTag,
    pub dim: usize,
    pub core_dims: usize,
    /// μ
    pub separation: f64,
    /// σ_u
    pub utterance_std: f64,
    /// σ_n
    pub nuisance_std: f64,
    /// σ_f
    pub frame_noise: f64,
    pub frames_per_second: f64,
    pub max_frames: usize,
}

impl ProviderSpec {
    pub fn specialized() -> Self {
        Self {
            tag: ProviderTag::Specialized256,
            dim: 256,
            core_dims: 256,
            separation: SPECIALIZED_SEPARATION,
            utterance_std: 1.0,
            nuisance_std: 0.0,
            frame_noise: 0.3,
            frames_per_second: 4.0,
            max_frames: 60,
        }
    }

    pub fn generic() -> Self {
        Self {
            tag: ProviderTag::Generic1024,
            dim: 1024,
            core_dims: 256,
            separation: GENERIC_SEPARATION,
            utterance_std: 1.0,
            nuisance_std: 2.0,
            frame_noise: 0.3,
            frames_per_second: 4.0,
            max_frames: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.core_dims == 0 || self.core_dims > self.dim {
            return Err(Error::Config(format!("provider with {} core of {} dimensions", self.core_dims, self.dim)));
        }
        let params = [self.separation, self.utterance_std, self.nuisance_std, self.frame_noise, self.frames_per_second];
        if params.iter().any(|x| !x.is_finite() || *x < 0.0) || self.frames_per_second == 0.0 || self.max_frames == 0 {
            return Err(Error::Config("provider parameters must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Frame count for an utterance of `seconds`.
    pub fn frames_for(&self, seconds: f64) -> usize {
        ((seconds * self.frames_per_second).round() as usize).clamp(1, self.max_frames)
    }

    /// Unit class direction `u` on the core coordinates.
    pub fn direction(&self, seed: u64) -> Vec<f64> {
        let mut rng = Rng::stream(seed, &format!("audio-direction/{}", self.tag), 0);
        let mut u: Vec<f64> = (0..self.core_dims).map(|_| rng.normal()).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        u
    }
}

/// μ giving pooled-feature Bayes error near 5% on the evaluation durations.
pub const SPECIALIZED_SEPARATION: f64 = 1.65;
/// μ giving pooled-feature Bayes error near 8% on the evaluation durations.
pub const GENERIC_SEPARATION: f64 = 1.41;

/// `T×N` encoder output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrames {
    pub tag: ProviderTag,
    pub frames: Tensor,
}

/// Utterance duration shared by every provider for one example.
pub fn synth_duration(id: &str, label: Label, split: Split, seed: u64) -> f64 {
    DurationModel::for_class(split, label).sample(&mut Rng::stream(seed, &format!("duration/{id}"), 0))
}

pub fn synth_audio(id: &str, label: Label, split: Split, spec: &ProviderSpec, seed: u64) -> Result<AudioFrames> {
    spec.validate()?;
    if spec.tag == ProviderTag::External {
        return Err(Error::Config("external audio features cannot be synthesised".into()));
    }
    let direction = spec.direction(seed);
    synth_audio_with(id, label, split, spec, seed, &direction)
}

/// [`synth_audio`] with a precomputed [`ProviderSpec::direction`].
pub fn synth_audio_with(
    id: &str,
    label: Label,
    split: Split,
    spec: &ProviderSpec,
    seed: u64,
    direction: &[f64],
) -> Result<AudioFrames> {
    if direction.len() != spec.core_dims {
        return Err(Error::Shape(format!("direction of {} for {} core dimensions", direction.len(), spec.core_dims)));
    }
    let t = spec.frames_for(synth_duration(id, label, split, seed));
    let mut rng = Rng::stream(seed, &format!("audio/{}/{id}", spec.tag), 0);
    let shift = label.sign() * spec.separation;
    let mean: Vec<f64> = (0..spec.dim)
        .map(|k| {
            if k < spec.core_dims {
                shift * direction[k] + spec.utterance_std * rng.normal()
            } else {
                spec.nuisance_std * rng.normal()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(t * spec.dim);
    for _ in 0..t {
        data.extend(mean.iter().map(|m| m + spec.frame_noise * rng.normal()));
    }
    Ok(AudioFrames { tag: spec.tag, frames: Tensor::new(vec![t, spec.dim], data)? })
}
