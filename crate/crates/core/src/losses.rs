//! Scalar objectives: cross-entropy, the minimum-boundary-shift unlearning
//! loss, two ablation losses, and the fairness-guidance angle objective.
//!
//! Probability-level functions (`ce`, `uce`, `kl_uniform`) take softmax rows;
//! [`sample_loss_grad`] works on raw logits and is what backprop uses.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot_slice, GradientMatrix, ParamVector};

/// Floor applied to probabilities (and `1 - p`) before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Distance kept between the cosine argument and ±1.
pub const COS_CLAMP: f64 = 1e-9;
pub const DEFAULT_DELTA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Cross-entropy.
    Ce,
    /// Minimum boundary shift: `ReLU(z_c - max_{k≠c} z_k - delta)`.
    Mbs,
    /// Unlearning cross-entropy: `-ln(1 - p_c)`.
    Uce,
    /// `KL(softmax ‖ uniform)`.
    KlUniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub delta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::OutOfRange {
                key: "delta".into(),
                reason: format!("must be a positive finite margin, got {delta}"),
            });
        }
        Ok(Self { kind, delta })
    }

    pub fn ce() -> Self {
        Self {
            kind: LossKind::Ce,
            delta: DEFAULT_DELTA,
        }
    }

    pub fn mbs(delta: f64) -> Result<Self> {
        Self::new(LossKind::Mbs, delta)
    }
}

/// Per-client loss values in deterministic client order.
pub type LossVector = Vec<f64>;

/// Preference direction over clients; entries are 0 or 1, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceVector(Vec<f64>);

impl PreferenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("preference entries must be 0 or 1".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("preference vector is all zeros".into()));
        }
        Ok(Self(values))
    }

    pub fn ones(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_rows(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    Ok(())
}

/// Mean cross-entropy of probability rows.
pub fn ce(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let mut total = 0.0;
    for (row, &c) in probs.iter().zip(labels) {
        check_label(c, row.len())?;
        total += -row[c].max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean unlearning cross-entropy `-ln(1 - p_c)`.
pub fn uce(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let mut total = 0.0;
    for (row, &c) in probs.iter().zip(labels) {
        check_label(c, row.len())?;
        total += -(1.0 - row[c]).max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean `KL(p ‖ uniform) = ln C + Σ p ln p`.
pub fn kl_uniform(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for row in probs {
        total += kl_row(row);
    }
    Ok(total / probs.len() as f64)
}

fn kl_row(p: &[f64]) -> f64 {
    let neg_entropy = p
        .iter()
        .filter(|&&v| v > 0.0)
        .fold(0.0, |acc, &v| acc + v * v.max(PROB_FLOOR).ln());
    ((p.len() as f64).ln() + neg_entropy).max(0.0)
}

/// Index of the largest logit other than `label`; ties go to the smallest index.
pub fn runner_up(logits: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (k, &z) in logits.iter().enumerate() {
        if k != label && (best == usize::MAX || z > best_val) {
            best = k;
            best_val = z;
        }
    }
    best
}

/// Single-sample minimum-boundary-shift loss.
pub fn mbs(logits: &[f64], label: usize, delta: f64) -> f64 {
    debug_assert!(logits.len() >= 2);
    let next = runner_up(logits, label);
    (logits[label] - logits[next] - delta).max(0.0)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss of one sample and its gradient with respect to the logits.
///
/// The returned gradient is for the unscaled per-sample loss; batch means
/// divide by the batch size afterwards.
pub fn sample_loss_grad(spec: &LossSpec, logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    match spec.kind {
        LossKind::Ce => {
            let p = softmax(logits);
            for (g, pk) in grad.iter_mut().zip(&p) {
                *g = *pk;
            }
            grad[label] -= 1.0;
            -p[label].max(PROB_FLOOR).ln()
        }
        LossKind::Mbs => {
            let next = runner_up(logits, label);
            let gap = logits[label] - logits[next] - spec.delta;
            // ReLU'(0) = 0: a sample exactly on the margin is already done.
            if gap > 0.0 {
                grad[label] = 1.0;
                grad[next] = -1.0;
                gap
            } else {
                0.0
            }
        }
        LossKind::Uce => {
            let p = softmax(logits);
            // 1 - p_c computed from the other classes to avoid cancellation.
            let rest: f64 = p
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != label)
                .map(|(_, v)| v)
                .sum();
            if rest < PROB_FLOOR {
                return -PROB_FLOOR.ln();
            }
            let pc = p[label];
            for (k, g) in grad.iter_mut().enumerate() {
                let indicator = if k == label { 1.0 } else { 0.0 };
                *g = pc * (indicator - p[k]) / rest;
            }
            -rest.ln()
        }
        LossKind::KlUniform => {
            let p = softmax(logits);
            let logs: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR).ln()).collect();
            let plogp = p.iter().zip(&logs).fold(0.0, |acc, (pk, lk)| acc + pk * lk);
            for (k, g) in grad.iter_mut().enumerate() {
                *g = p[k] * (logs[k] - plogp);
            }
            ((p.len() as f64).ln() + plogp).max(0.0)
        }
    }
}

/// Per-sample loss without the gradient (forward-only evaluation).
pub fn sample_loss(spec: &LossSpec, logits: &[f64], label: usize) -> f64 {
    match spec.kind {
        LossKind::Mbs => mbs(logits, label, spec.delta),
        LossKind::Ce => -softmax(logits)[label].max(PROB_FLOOR).ln(),
        LossKind::Uce => {
            let p = softmax(logits);
            let rest: f64 = p
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != label)
                .map(|(_, v)| v)
                .sum();
            -rest.max(PROB_FLOOR).ln()
        }
        LossKind::KlUniform => kl_row(&softmax(logits)),
    }
}

struct FairnessParts {
    unit_pref: Vec<f64>,
    norm_f: f64,
    pref_dot: f64,
    cosine: f64,
}

fn fairness_parts(losses: &[f64], pref: &PreferenceVector) -> Result<FairnessParts> {
    if losses.len() != pref.len() {
        return Err(Error::DimensionMismatch {
            expected: pref.len(),
            actual: losses.len(),
        });
    }
    let norm_f = dot_slice(losses, losses).sqrt();
    if !(norm_f > PROB_FLOOR) {
        return Err(Error::DegenerateLoss);
    }
    let p = pref.values();
    let norm_p = dot_slice(p, p).sqrt();
    let unit_pref: Vec<f64> = p.iter().map(|v| v / norm_p).collect();
    let pref_dot = dot_slice(&unit_pref, losses);
    let cosine = (pref_dot / norm_f).clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    Ok(FairnessParts {
        unit_pref,
        norm_f,
        pref_dot,
        cosine,
    })
}

/// Angle between the loss vector and the preference direction, in `[0, π]`.
///
/// Normalizes by both `‖p‖` and `‖F‖` so the arccos argument is a true cosine.
pub fn fairness_value(losses: &[f64], pref: &PreferenceVector) -> Result<f64> {
    let parts = fairness_parts(losses, pref)?;
    Ok(parts.cosine.acos().clamp(0.0, PI))
}

/// Partial derivatives of the fairness angle with respect to each loss.
pub fn fairness_loss_weights(losses: &[f64], pref: &PreferenceVector) -> Result<Vec<f64>> {
    let FairnessParts {
        unit_pref,
        norm_f,
        pref_dot,
        cosine,
    } = fairness_parts(losses, pref)?;
    let outer = -1.0 / (1.0 - cosine * cosine).sqrt();
    let norm_f3 = norm_f * norm_f * norm_f;
    Ok(unit_pref
        .iter()
        .zip(losses)
        .map(|(ph, f)| outer * (ph / norm_f - pref_dot * f / norm_f3))
        .collect())
}

/// Gradient of the fairness angle with respect to the parameters, by the
/// chain rule through the client losses.
pub fn fairness_grad(
    losses: &[f64],
    pref: &PreferenceVector,
    client_grads: &GradientMatrix,
) -> Result<ParamVector> {
    if client_grads.ncols() != losses.len() {
        return Err(Error::DimensionMismatch {
            expected: losses.len(),
            actual: client_grads.ncols(),
        });
    }
    let weights = fairness_loss_weights(losses, pref)?;
    client_grads.combine(&weights)
}
