//! Classifier losses, exit thresholds, gate pseudo-labels and the gate loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSpec;
use crate::error::{ensure_finite, Error, Result};
use crate::model::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// Softmax cross-entropy; single-label only.
    #[default]
    CrossEntropy,
    /// Mean over categories of per-category binary cross-entropy on
    /// sigmoided logits.
    BinaryCrossEntropy,
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::CrossEntropy => "ce",
            LossVariant::BinaryCrossEntropy => "bce",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" => Ok(LossVariant::CrossEntropy),
            "bce" | "binary-cross-entropy" => Ok(LossVariant::BinaryCrossEntropy),
            _ => Err(Error::InvalidArgument(format!("unknown loss variant `{s}`"))),
        }
    }
}

pub fn classifier_loss(logits: &[f64], label: &LabelSpec, variant: LossVariant) -> Result<f64> {
    classifier_loss_and_grad(logits, label, variant).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub(crate) fn classifier_loss_and_grad(
    logits: &[f64],
    label: &LabelSpec,
    variant: LossVariant,
) -> Result<(f64, Vec<f64>)> {
    ensure_finite(logits, || "classifier logits".into())?;
    let n = logits.len();
    match variant {
        LossVariant::CrossEntropy => {
            let LabelSpec::Single(y) = *label else {
                return Err(Error::InvalidArgument(
                    "cross-entropy needs a single-label target; use bce for multi-label".into(),
                ));
            };
            if y >= n {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {n} categories"
                )));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let log_z = max + sum.ln();
            let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_z).exp()).collect();
            grad[y] -= 1.0;
            Ok((log_z - logits[y], grad))
        }
        LossVariant::BinaryCrossEntropy => {
            let mask = label.to_mask(n)?;
            let inv = 1.0 / n as f64;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(n);
            for (&l, &y) in logits.iter().zip(&mask) {
                loss += bce_with_logit(l, y);
                grad.push((sigmoid(l) - y) * inv);
            }
            Ok((loss * inv, grad))
        }
    }
}

/// Exit threshold `beta * exp(t / 2)` for 1-based timestep `t`.
pub fn epsilon_schedule(beta: f64, t: usize) -> f64 {
    beta * (t as f64 / 2.0).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatePseudoLabel {
    pub timestep: usize,
    pub label: bool,
    pub classifier_loss: f64,
    pub epsilon: f64,
}

/// Label 1 at timestep `t` iff the classifier loss there is at most
/// `epsilon_schedule(beta, t)`.
pub fn pseudo_labels(losses: &[f64], beta: f64) -> Vec<GatePseudoLabel> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let timestep = i + 1;
            let epsilon = epsilon_schedule(beta, timestep);
            GatePseudoLabel {
                timestep,
                label: loss <= epsilon,
                classifier_loss: loss,
                epsilon,
            }
        })
        .collect()
}

/// Binary cross-entropy of a probability against a 0/1 target.
pub fn bce(score: f64, label: bool) -> f64 {
    if label {
        -score.ln()
    } else {
        -(1.0 - score).ln()
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed from
/// the logit without cancellation.
pub(crate) fn bce_with_logit(logit: f64, target: f64) -> f64 {
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

/// Mean binary cross-entropy of gate scores against pseudo-labels.
pub fn gate_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "gate loss needs matching non-empty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::InvalidArgument(format!("gate score {s} outside (0, 1)")));
    }
    let sum: f64 = scores.iter().zip(labels).map(|(&s, &y)| bce(s, y)).sum();
    Ok(sum / scores.len() as f64)
}
