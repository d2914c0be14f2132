//! Reference computations used by the integration and acceptance tests.
//! Each one is written from the generator's definition, not from its code.

#![allow(dead_code)]

use std::collections::HashMap;

use ddsd::dataset::grammar::{Piece, TemplateSet, AMBIGUOUS_SET, DIRECTED_SET, NON_DIRECTED_SET};
use ddsd::dataset::{Label, Split};
use ddsd::features::{DecoderSignals, DurationModel, ProviderSpec, SIGNAL_DIM, SIGNAL_SHIFT};
use ddsd::lm::vocab::normalize_words;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, LogNormal, Normal};

/// Exact distribution over normalised, truncated token sequences of one set.
pub fn enumerate_set(set: &TemplateSet, max_tokens: usize) -> HashMap<Vec<String>, f64> {
    fn go(pieces: &[Piece], prefix: Vec<String>, p: f64, out: &mut Vec<(Vec<String>, f64)>) {
        let Some((first, rest)) = pieces.split_first() else {
            out.push((prefix, p));
            return;
        };
        let push = |mut prefix: Vec<String>, text: &str| {
            prefix.extend(normalize_words(text));
            prefix
        };
        match *first {
            Piece::Word(w) => go(rest, push(prefix, w), p, out),
            Piece::Choice(opts) => {
                for o in opts {
                    go(rest, push(prefix.clone(), o), p / opts.len() as f64, out);
                }
            }
            Piece::Tail { p: q, body } => {
                go(rest, prefix.clone(), p * (1.0 - q), out);
                let mut with: Vec<(Vec<String>, f64)> = Vec::new();
                go(body, prefix, p * q, &mut with);
                for (pre, pp) in with {
                    go(rest, pre, pp, out);
                }
            }
        }
    }
    let mut dist = HashMap::new();
    for t in set.templates {
        let mut out = Vec::new();
        go(t, Vec::new(), 1.0 / set.templates.len() as f64, &mut out);
        for (mut seq, p) in out {
            seq.truncate(max_tokens);
            *dist.entry(seq).or_insert(0.0) += p;
        }
    }
    dist
}

/// Class-conditional text distributions for shared-pool fraction `q`.
pub fn text_class_distributions(q: f64, max_tokens: usize) -> [HashMap<Vec<String>, f64>; 2] {
    let pool = enumerate_set(&AMBIGUOUS_SET, max_tokens);
    [DIRECTED_SET, NON_DIRECTED_SET].map(|set| {
        let mut d = HashMap::new();
        for (s, p) in enumerate_set(&set, max_tokens) {
            *d.entry(s).or_insert(0.0) += (1.0 - q) * p;
        }
        for (s, p) in &pool {
            *d.entry(s.clone()).or_insert(0.0) += q * p;
        }
        d
    })
}

/// Bayes error of the text channel under equal priors: ½·Σ min(P_d, P_n).
pub fn text_bayes_error(q: f64, max_tokens: usize) -> f64 {
    let [d, n] = text_class_distributions(q, max_tokens);
    0.5 * d.iter().map(|(s, p)| p.min(n.get(s).copied().unwrap_or(0.0))).sum::<f64>()
}

/// Expected word count of a class under shared-pool fraction `q`, without truncation.
pub fn expected_words(label: Label, q: f64) -> f64 {
    let set = if label.is_directed() { DIRECTED_SET } else { NON_DIRECTED_SET };
    let mean = |s: &TemplateSet| enumerate_set(s, usize::MAX).iter().map(|(seq, p)| seq.len() as f64 * p).sum::<f64>();
    (1.0 - q) * mean(&set) + q * mean(&AMBIGUOUS_SET)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Latent vector recovered from generated signals by inverting the
/// documented monotone maps.
pub fn signal_latent(s: &DecoderSignals) -> [f64; SIGNAL_DIM] {
    [
        1.0 - inv_softplus(s.graph_cost_avg / 3.0),
        0.5 - inv_softplus(s.acoustic_cost_avg / 1.5),
        logit(s.confidence_avg) - 1.0,
        -inv_softplus(s.alt_words_avg - 1.0),
    ]
}

/// Closed form for two unit-covariance Gaussians at ±SIGNAL_SHIFT per dimension.
pub fn signal_bayes_closed_form() -> f64 {
    let dist = 2.0 * SIGNAL_SHIFT * (SIGNAL_DIM as f64).sqrt();
    Normal::standard().cdf(-dist / 2.0)
}

/// P(T = k | class) for k = 1..=max_frames.
pub fn frame_count_pmf(spec: &ProviderSpec, split: Split, label: Label) -> Vec<f64> {
    let (m, s) = DurationModel::for_class(split, label).log_params();
    let ln = LogNormal::new(m, s).unwrap();
    let f = |frames: f64| ln.cdf(frames / spec.frames_per_second);
    (1..=spec.max_frames)
        .map(|k| {
            let lo = if k == 1 { 0.0 } else { f(k as f64 - 0.5) };
            let hi = if k == spec.max_frames { 1.0 } else { f(k as f64 + 0.5) };
            hi - lo
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Monte-Carlo Bayes error of mean-pooled frames.
///
/// The pooled vector given T is Gaussian: along the class direction
/// N(±μ, s_T²), isotropic N(0, s_T²) on the other core coordinates and
/// N(0, v_T) on the nuisance ones, with s_T² = σ_u² + σ_f²/T and
/// v_T = σ_n² + σ_f²/T. The posterior uses the exact mixture over T; the
/// estimate is E[min posterior] over draws from the equal-prior mixture.
pub fn audio_bayes_error(spec: &ProviderSpec, split: Split, samples: usize, seed: u64) -> f64 {
    let pmf = [Label::Directed, Label::NonDirected].map(|l| frame_count_pmf(spec, split, l));
    let core_rest = (spec.core_dims - 1) as f64;
    let nuis = (spec.dim - spec.core_dims) as f64;
    let s2: Vec<f64> =
        (1..=spec.max_frames).map(|t| spec.utterance_std.powi(2) + spec.frame_noise.powi(2) / t as f64).collect();
    let v2: Vec<f64> =
        (1..=spec.max_frames).map(|t| spec.nuisance_std.powi(2) + spec.frame_noise.powi(2) / t as f64).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let chi_core = ChiSquared::new(core_rest).unwrap();
    let chi_nuis = (nuis > 0.0).then(|| ChiSquared::new(nuis).unwrap());
    let mut total = 0.0;
    for i in 0..samples {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let cls = if y > 0.0 { 0 } else { 1 };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut t = pmf[cls].len() - 1;
        for (k, p) in pmf[cls].iter().enumerate() {
            acc += p;
            if u < acc {
                t = k;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        let a = y * spec.separation + s2[t].sqrt() * z;
        let r = s2[t] * chi_core.sample(&mut rng);
        let q = chi_nuis.as_ref().map_or(0.0, |c| v2[t] * c.sample(&mut rng));
        let loglik = |sign: f64, pmf: &[f64]| {
            let terms: Vec<f64> = pmf
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(k, p)| {
                    let (s, v) = (s2[k], v2[k]);
                    let mut l = p.ln() - 0.5 * (a - sign * spec.separation).powi(2) / s - 0.5 * s.ln();
                    l += -0.5 * r / s - 0.5 * core_rest * s.ln();
                    if nuis > 0.0 {
                        l += -0.5 * q / v - 0.5 * nuis * v.ln();
                    }
                    l
                })
                .collect();
            log_sum_exp(&terms)
        };
        let (ld, ln) = (loglik(1.0, &pmf[0]), loglik(-1.0, &pmf[1]));
        let post_d = 1.0 / (1.0 + (ln - ld).exp());
        total += post_d.min(1.0 - post_d);
    }
    total / samples as f64
}

/// E_T Φ(−μ/s_T) under an equal mixture of the class frame-count laws: the
/// error of thresholding the class-direction coordinate at zero, an upper
/// bound on the Bayes error.
pub fn audio_projection_error(spec: &ProviderSpec, split: Split) -> f64 {
    let n = Normal::standard();
    let pmf = [Label::Directed, Label::NonDirected].map(|l| frame_count_pmf(spec, split, l));
    (0..spec.max_frames)
        .map(|k| {
            let s = (spec.utterance_std.powi(2) + spec.frame_noise.powi(2) / (k + 1) as f64).sqrt();
            0.5 * (pmf[0][k] + pmf[1][k]) * n.cdf(-spec.separation / s)
        })
        .sum()
}

/// EER by enumerating every threshold and counting errors directly.
pub fn brute_force_eer(scores: &[f64], directed: &[bool]) -> f64 {
    let nd = directed.iter().filter(|&&d| d).count() as f64;
    let nn = directed.len() as f64 - nd;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let mut fa = 0.0;
            let mut fr = 0.0;
            for (s, &d) in scores.iter().zip(directed) {
                if d && *s < th {
                    fr += 1.0;
                }
                if !d && *s >= th {
                    fa += 1.0;
                }
            }
            (fa / nn, fr / nd)
        })
        .collect();
    points.push((1.0, 0.0));
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.partial_cmp(&a.1).unwrap()));
    points.dedup();
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let (d0, d1) = (y0 - x0, y1 - x1);
        if d0 == 0.0 {
            return x0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return x0 + t * (x1 - x0);
        }
    }
    unreachable!("the staircase always crosses the diagonal")
}
