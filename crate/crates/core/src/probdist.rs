//! Categorical distributions over `k` classes and the maps between logits,
//! probabilities and hard labels.
//!
//! Binary tasks use `k = 2` vectors throughout; entry 1 is the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Clamp floor applied to every model output and supervision label before a
/// divergence is evaluated.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

/// Inputs whose mass is off by more than this are rejected rather than
/// renormalized.
const SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over `k >= 2` classes.
///
/// Entries are finite, nonnegative and sum to one. Only [`clamp`] guarantees
/// strictly interior entries; everything that feeds a divergence goes through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `entries` and renormalizes them to sum to one.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a distribution needs at least 2 classes, got {}",
                entries.len()
            )));
        }
        for (i, &v) in entries.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "entry {i} is not a finite nonnegative number: {v}"
                )));
            }
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        let mut entries = entries;
        if sum != 1.0 {
            entries.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Self(entries))
    }

    /// `(1 - positive, positive)`.
    pub fn binary(positive: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&positive) {
            return Err(Error::InvalidInput(format!(
                "binary probability {positive} outside [0, 1]"
            )));
        }
        Ok(Self(vec![1.0 - positive, positive]))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("uniform over {k} classes")));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    /// Wraps entries produced by code that already maintains the invariants.
    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        debug_assert!(entries.len() >= 2);
        Self(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// Probability of class 1 in a binary vector.
    pub fn positive(&self) -> f64 {
        self.0[1]
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// The binary complement `(y, 1 - y)` of `(1 - y, y)`.
    pub fn complement(&self) -> Result<Self> {
        if self.k() != 2 {
            return Err(Error::Unsupported(format!(
                "complement is defined for binary labels, got k = {}",
                self.k()
            )));
        }
        Ok(Self(vec![self.0[1], self.0[0]]))
    }
}

/// Pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("logit {i} is not finite: {v}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One-hot label produced by thresholding a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardPrediction {
    class: usize,
}

impl HardPrediction {
    pub fn class(&self) -> usize {
        self.class
    }

    /// The one-hot vector `(1, 0)` or `(0, 1)`.
    pub fn one_hot(&self) -> [f64; 2] {
        let mut v = [0.0; 2];
        v[self.class] = 1.0;
        v
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &Logits) -> ProbVector {
    ProbVector(softmax_slice(logits.as_slice()))
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= denom);
    out
}

/// Projects `p` onto the simplex restricted to `[eps, 1 - eps]`.
///
/// Entries below `eps` are pinned to `eps` and the remaining ones are scaled
/// down proportionally to absorb the added mass, repeating until no scaled
/// entry drops under the floor. The map preserves the order of entries and is
/// idempotent: a vector that already satisfies the bounds is returned as is.
pub fn clamp(p: &ProbVector, eps: f64) -> Result<ProbVector> {
    let k = p.k();
    if !(eps > 0.0 && eps < 1.0 / k as f64) {
        return Err(Error::Config(format!(
            "clamp eps must lie in (0, 1/{k}), got {eps}"
        )));
    }
    Ok(ProbVector(clamp_slice(p.as_slice(), eps)))
}

pub(crate) fn clamp_slice(p: &[f64], eps: f64) -> Vec<f64> {
    match clamp_parts(p, eps) {
        None => p.to_vec(),
        Some((pinned, scale, _)) => p
            .iter()
            .zip(&pinned)
            .map(|(&v, &b)| if b { eps } else { v * scale })
            .collect(),
    }
}

/// Pinned mask, free-entry scale and original free mass of the clamp, or
/// `None` when `p` is returned unchanged.
fn clamp_parts(p: &[f64], eps: f64) -> Option<(Vec<bool>, f64, f64)> {
    let sum: f64 = p.iter().sum();
    if p.iter().all(|&v| v >= eps && v <= 1.0 - eps) && (sum - 1.0).abs() <= 1e-12 {
        return None;
    }
    let mut pinned = vec![false; p.len()];
    loop {
        let n_pinned = pinned.iter().filter(|&&b| b).count();
        let free_mass: f64 = p
            .iter()
            .zip(&pinned)
            .filter(|(_, &b)| !b)
            .map(|(&v, _)| v)
            .sum();
        let scale = (1.0 - n_pinned as f64 * eps) / free_mass;
        let mut changed = false;
        for (v, b) in p.iter().zip(pinned.iter_mut()) {
            if !*b && v * scale < eps {
                *b = true;
                changed = true;
            }
        }
        if !changed {
            return Some((pinned, scale, free_mass));
        }
    }
}

/// Pulls `dL/dclamp(p)` back to `dL/dp`. Pinned entries are locally constant
/// and receive zero gradient.
pub(crate) fn clamp_backward(p: &[f64], eps: f64, dout: &[f64]) -> Vec<f64> {
    match clamp_parts(p, eps) {
        None => dout.to_vec(),
        Some((pinned, scale, free_mass)) => {
            let mixed: f64 = p
                .iter()
                .zip(dout)
                .zip(&pinned)
                .filter(|(_, &b)| !b)
                .map(|((v, d), _)| v * d)
                .sum();
            dout.iter()
                .zip(&pinned)
                .map(|(d, &b)| {
                    if b {
                        0.0
                    } else {
                        scale * (d - mixed / free_mass)
                    }
                })
                .collect()
        }
    }
}

/// Thresholds a binary prediction: class 1 iff `p[1] > t`, so ties go to class 0.
pub fn harden(p: &ProbVector, t: f64) -> Result<HardPrediction> {
    if p.k() != 2 {
        return Err(Error::Unsupported(format!(
            "hardening is defined for binary predictions, got k = {}",
            p.k()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    Ok(HardPrediction {
        class: usize::from(p.positive() > t),
    })
}

pub(crate) fn ensure_same_k(p: &ProbVector, q: &ProbVector) -> Result<()> {
    ensure_len(p.k(), q.k())
}
