//! Directedness scores, equal error rate and DET curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::lm::Vocabulary;

/// Decision-position probabilities of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub id: String,
    pub label: Label,
    pub p_yes: f64,
    pub p_no: f64,
    pub mass: f64,
    /// `p_yes / (p_yes + p_no)`; diagnostic only, ranking uses `p_yes`.
    pub p_yes_normalized: f64,
}

impl Score {
    /// Softmax over the full vocabulary of one logit row.
    pub fn from_logits(id: impl Into<String>, label: Label, logits: &[f64], vocab: &Vocabulary) -> Result<Self> {
        if logits.len() != vocab.len() {
            return Err(Error::Shape(format!("{} logits for {} tokens", logits.len(), vocab.len())));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("decision logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let p = |id: usize| (logits[id] - max).exp() / z;
        let (p_yes, p_no) = (p(vocab.yes()), p(vocab.no()));
        let mass = p_yes + p_no;
        Ok(Self {
            id: id.into(),
            label,
            p_yes,
            p_no,
            mass,
            p_yes_normalized: if mass > 0.0 { p_yes / mass } else { 0.5 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub eer: f64,
    /// Threshold of the operating point closest to the crossing; examples
    /// scoring at or above it are accepted as directed.
    pub threshold: f64,
    pub n_directed: usize,
    pub n_non_directed: usize,
    pub det: Vec<DetPoint>,
}

/// Operating points from accepting nothing to accepting everything, one per
/// group of tied scores, with the threshold that realises each.
fn staircase(scores: &[f64], directed: &[bool]) -> Result<(Vec<DetPoint>, Vec<f64>, usize, usize)> {
    if scores.len() != directed.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let nd = directed.iter().filter(|&&d| d).count();
    let nn = directed.len() - nd;
    if nd == 0 || nn == 0 {
        return Err(Error::Empty("both classes are needed for an error rate".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![DetPoint { far: 0.0, frr: 1.0 }];
    let mut thresholds = vec![f64::INFINITY];
    let (mut fa, mut ta) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if directed[order[i]] {
                ta += 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        points.push(DetPoint { far: fa as f64 / nn as f64, frr: (nd - ta) as f64 / nd as f64 });
        thresholds.push(match order.get(i) {
            Some(&next) => 0.5 * (s + scores[next]),
            None => f64::NEG_INFINITY,
        });
    }
    Ok((points, thresholds, nd, nn))
}

/// EER from raw scores, higher meaning more likely directed.
pub fn eer_from_scores(scores: &[f64], directed: &[bool]) -> Result<EvalResult> {
    let (det, thresholds, nd, nn) = staircase(scores, directed)?;
    let gap = |p: &DetPoint| p.frr - p.far;
    let mut crossing = None;
    for k in 0..det.len() - 1 {
        let (d0, d1) = (gap(&det[k]), gap(&det[k + 1]));
        if d0 == 0.0 {
            crossing = Some((det[k].far, k));
            break;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            let eer = det[k].far + t * (det[k + 1].far - det[k].far);
            let nearest = if t <= 0.5 { k } else { k + 1 };
            crossing = Some((eer, nearest));
            break;
        }
    }
    let (eer, at) = crossing.expect("the staircase starts above and ends below the diagonal");
    Ok(EvalResult { eer, threshold: thresholds[at], n_directed: nd, n_non_directed: nn, det })
}

/// EER of `p_yes` scores.
pub fn compute_eer(scores: &[Score]) -> Result<EvalResult> {
    let (s, d) = split(scores);
    eer_from_scores(&s, &d)
}

/// Full DET staircase, endpoints included.
pub fn det_curve(scores: &[Score]) -> Result<Vec<DetPoint>> {
    let (s, d) = split(scores);
    Ok(staircase(&s, &d)?.0)
}

fn split(scores: &[Score]) -> (Vec<f64>, Vec<bool>) {
    scores.iter().map(|s| (s.p_yes, s.label.is_directed())).unzip()
}

/// Two columns `FAR FRR`, one point per line.
pub fn write_det(points: &[DetPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in points {
        out.push_str(&format!("{} {}\n", p.far, p.frr));
    }
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// One JSON object per line.
pub fn write_scores(scores: &[Score], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<Score>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Fraction of scores whose yes/no mass reaches `floor`.
pub fn mass_coverage(scores: &[Score], floor: f64) -> f64 {
    scores.iter().filter(|s| s.mass >= floor).count() as f64 / scores.len().max(1) as f64
}
