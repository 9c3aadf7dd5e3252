//! Probability vectors over a finite label set and the divergences the
//! merging objectives are built from.

use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};

/// Probabilities inside logarithms are clamped to this floor.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tolerance on `Σ p = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MergeError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MergeError::InvalidDistribution(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(MergeError::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(ProbDist(probs))
    }

    /// Normalises non-negative weights into a distribution.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || w.iter().any(|v| *v < 0.0) {
            return Err(MergeError::InvalidDistribution(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        ProbDist::new(w.iter().map(|v| v / s).collect())
    }

    pub fn one_hot(k: usize, label: usize) -> Result<Self> {
        if label >= k {
            return Err(MergeError::Index {
                index: label,
                len: k,
            });
        }
        let mut v = vec![0.0; k];
        v[label] = 1.0;
        Ok(ProbDist(v))
    }

    pub fn uniform(k: usize) -> Self {
        ProbDist(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = MergeError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbDist::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Self {
        p.0
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn softmax(logits: &[f64]) -> ProbDist {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    ProbDist(out)
}

/// `-ln q(label)`, log argument clamped.
pub fn cross_entropy(q: &ProbDist, label: usize) -> Result<f64> {
    let p = q.0.get(label).ok_or(MergeError::Index {
        index: label,
        len: q.len(),
    })?;
    Ok(-p.max(LOG_CLAMP).ln())
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(LOG_CLAMP).ln()))
        .sum::<f64>()
        .max(0.0)
}

pub(crate) fn entropy_raw(q: &[f64]) -> f64 {
    -q.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q) = Σ p ln(p / q)`; zero-probability terms of `p` contribute 0.
pub fn kl_div(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MergeError::Dimension(format!(
            "kl_div over {} vs {} labels",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_raw(&p.0, &q.0))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(q: &ProbDist) -> f64 {
    entropy_raw(&q.0)
}

/// Total variation `½ Σ |p − q|`.
pub fn total_variation(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MergeError::Dimension("total_variation".into()));
    }
    Ok(0.5
        * p.0
            .iter()
            .zip(&q.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}
