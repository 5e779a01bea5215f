//! Classification and regression losses with analytic gradients.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the prediction vector, so the detectors can seed the backward
//! pass directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss value and gradient w.r.t. the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.value *= k;
        self.grad.iter_mut().for_each(|g| *g *= k);
        self
    }
}

/// Smooth-L1 (Huber with transition `beta`), summed over elements.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<LossGrad> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < beta {
                value += 0.5 * d * d / beta;
                d / beta
            } else {
                value += d.abs() - 0.5 * beta;
                d.signum()
            }
        })
        .collect();
    Ok(LossGrad { value, grad })
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LOGIT_CLAMP: f64 = 100.0;

/// Sigmoid focal loss `−α_t (1 − p_t)^γ log p_t`, summed over all entries and
/// divided by `max(1, #positives)`. `alpha = None` weights both labels by 1.
pub fn focal_loss(logits: &[f64], labels: &[bool], alpha: Option<f64>, gamma: f64) -> Result<LossGrad> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: labels.len(),
        });
    }
    let npos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let mut out = focal_loss_sum(logits, labels, alpha, gamma);
    out = out.scaled(1.0 / npos);
    Ok(out)
}

/// Unnormalized focal-loss sum; callers choose the normalizer.
pub fn focal_loss_sum(logits: &[f64], labels: &[bool], alpha: Option<f64>, gamma: f64) -> LossGrad {
    let mut value = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            let p = sigmoid(z);
            if y {
                let a = alpha.unwrap_or(1.0);
                let log_p = -softplus(-z);
                let q = 1.0 - p;
                let mod_f = q.powf(gamma);
                value += -a * mod_f * log_p;
                a * mod_f * (gamma * p * log_p - q)
            } else {
                let a = alpha.map_or(1.0, |a| 1.0 - a);
                let log_q = -softplus(z);
                let mod_f = p.powf(gamma);
                value += -a * mod_f * log_q;
                a * mod_f * (p - gamma * (1.0 - p) * log_q)
            }
        })
        .collect();
    LossGrad { value, grad }
}

/// Mean binary cross-entropy on logits.
pub fn binary_cross_entropy(logits: &[f64], labels: &[bool]) -> Result<LossGrad> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: labels.len(),
        });
    }
    if logits.is_empty() {
        return Ok(LossGrad::zero(0));
    }
    Ok(focal_loss_sum(logits, labels, None, 0.0).scaled(1.0 / logits.len() as f64))
}

/// Mean softmax cross-entropy over rows of `num_classes` logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], num_classes: usize) -> Result<LossGrad> {
    if logits.len() != labels.len() * num_classes {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: labels.len() * num_classes,
        });
    }
    if labels.is_empty() {
        return Ok(LossGrad::zero(0));
    }
    let rows = labels.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let row = &logits[r * num_classes..(r + 1) * num_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - row[label];
        for (c, z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad[r * num_classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / rows;
        }
    }
    Ok(LossGrad {
        value: value / rows,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    pub weight: f64,
    pub kind: TermKind,
}

/// Named loss terms of one training step; `total = Σ weight · value`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: BTreeMap<String, LossTerm>,
}

impl LossBundle {
    pub fn push(&mut self, name: &str, kind: TermKind, weight: f64, value: f64) {
        self.terms.insert(name.to_owned(), LossTerm { value, weight, kind });
    }

    fn sum_kind(&self, kind: TermKind) -> f64 {
        self.terms
            .values()
            .filter(|t| t.kind == kind)
            .map(|t| t.value)
            .sum()
    }

    pub fn classification(&self) -> f64 {
        self.sum_kind(TermKind::Classification)
    }

    pub fn regression(&self) -> f64 {
        self.sum_kind(TermKind::Regression)
    }

    pub fn total(&self) -> f64 {
        self.terms.values().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.terms.values().all(|t| t.value.is_finite())
    }

    /// Element-wise mean of several bundles with the same terms.
    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        let mut out = LossBundle::default();
        if bundles.is_empty() {
            return out;
        }
        for (name, t) in &bundles[0].terms {
            let v = bundles.iter().filter_map(|b| b.get(name)).sum::<f64>() / bundles.len() as f64;
            out.push(name, t.kind, t.weight, v);
        }
        out
    }
}
