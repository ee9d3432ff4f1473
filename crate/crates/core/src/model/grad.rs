//! Exact analytic gradients of the cascade objectives.
//!
//! Clip representations are inputs here, not functions of trainable
//! parameters, so the gate objective never reaches the projection or heads.

use super::{relu_in_place, sigmoid, CascadeModel, GATE_WIDTH};
use crate::dataset::LabelSpec;
use crate::error::{ensure_dim, Error, Result};
use crate::trainer::loss::{bce_with_logit, classifier_loss_and_grad, pseudo_labels, LossVariant};

/// One training example: clip representations `z_1..z_T'` and the label.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub clips: &'a [Vec<f64>],
    pub label: &'a LabelSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Mean classifier loss over timesteps.
    Classification,
    /// Mean gate BCE against pseudo-labels with threshold parameter `beta`.
    Gating { beta: f64 },
    /// Sum of both with equal weights.
    Joint { beta: f64 },
}

impl Objective {
    fn has_classification(&self) -> bool {
        !matches!(self, Objective::Gating { .. })
    }

    fn beta(&self) -> Option<f64> {
        match *self {
            Objective::Classification => None,
            Objective::Gating { beta } | Objective::Joint { beta } => Some(beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub objective: Objective,
    pub variant: LossVariant,
}

/// Batch-mean loss terms plus pseudo-label statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLoss {
    /// Present when the objective includes the classification term.
    pub classification: Option<f64>,
    /// Present when the objective includes the gate term.
    pub gating: Option<f64>,
    /// Per timestep: number of samples whose pseudo-label was 1.
    pub positives: Vec<usize>,
    /// Per timestep: number of samples that reached that timestep.
    pub reached: Vec<usize>,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.classification.unwrap_or(0.0) + self.gating.unwrap_or(0.0)
    }
}

/// Loss value only.
pub fn total_loss(model: &CascadeModel, batch: &[Sample<'_>], spec: LossSpec) -> Result<BatchLoss> {
    run(model, batch, spec, None)
}

/// Loss and exact gradients with respect to every parameter. Blocks the
/// objective does not depend on are exactly zero.
pub fn gradients(
    model: &CascadeModel,
    batch: &[Sample<'_>],
    spec: LossSpec,
) -> Result<(BatchLoss, CascadeModel)> {
    let mut grads = model.zeros_like();
    let loss = run(model, batch, spec, Some(&mut grads))?;
    grads.check_finite()?;
    Ok((loss, grads))
}

fn run(
    model: &CascadeModel,
    batch: &[Sample<'_>],
    spec: LossSpec,
    mut grads: Option<&mut CascadeModel>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let t_max = model.timesteps();
    let mut out = BatchLoss {
        classification: spec.objective.has_classification().then_some(0.0),
        gating: spec.objective.beta().map(|_| 0.0),
        positives: vec![0; t_max],
        reached: vec![0; t_max],
    };
    let batch_scale = 1.0 / batch.len() as f64;
    for sample in batch {
        per_sample(model, sample, spec, batch_scale, &mut out, grads.as_deref_mut())?;
    }
    if let Some(c) = out.classification.as_mut() {
        *c *= batch_scale;
    }
    if let Some(g) = out.gating.as_mut() {
        *g *= batch_scale;
    }
    if !out.total().is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(out)
}

fn per_sample(
    model: &CascadeModel,
    sample: &Sample<'_>,
    spec: LossSpec,
    batch_scale: f64,
    out: &mut BatchLoss,
    mut grads: Option<&mut CascadeModel>,
) -> Result<()> {
    let steps = sample.clips.len();
    if steps == 0 || steps > model.timesteps() {
        return Err(Error::InvalidArgument(format!(
            "sample has {steps} clip representations, model supports 1..={}",
            model.timesteps()
        )));
    }
    for z in sample.clips {
        ensure_dim("clip representation", model.dims().features, z.len())?;
    }
    let scale = batch_scale / steps as f64;
    let with_cls = spec.objective.has_classification();

    let mut cls_losses = Vec::with_capacity(steps);
    for (i, z) in sample.clips.iter().enumerate() {
        let t = i + 1;
        let clf = model.classifier(t);
        let pre = clf.projection.forward(z);
        let mut hidden = pre.clone();
        relu_in_place(&mut hidden);
        let logits = clf.head.forward(&hidden);
        let (loss, mut dlogits) = classifier_loss_and_grad(&logits, sample.label, spec.variant)?;
        cls_losses.push(loss);

        if !with_cls {
            continue;
        }
        *out.classification.as_mut().expect("set for classification") += loss / steps as f64;
        if let Some(g) = grads.as_deref_mut() {
            dlogits.iter_mut().for_each(|d| *d *= scale);
            let mut dhidden = vec![0.0; hidden.len()];
            clf.head
                .backward(&hidden, &dlogits, &mut g.heads[i], Some(&mut dhidden));
            for (d, &p) in dhidden.iter_mut().zip(&pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            clf.projection.backward(z, &dhidden, &mut g.projection, None);
        }
    }

    let Some(beta) = spec.objective.beta() else {
        return Ok(());
    };
    for label in pseudo_labels(&cls_losses, beta) {
        let t = label.timestep;
        let i = t - 1;
        let target = if label.label { 1.0 } else { 0.0 };
        out.reached[i] += 1;
        out.positives[i] += usize::from(label.label);

        let gate = model.gate(t);
        let prev = (t > 1).then(|| gate.stream(&sample.clips[i - 1]));
        let cur = gate.stream(&sample.clips[i]);
        let logit = gate.logit(prev.as_ref().map(|p| p.out.as_slice()), &cur.out);
        *out.gating.as_mut().expect("set for gating") += bce_with_logit(logit, target) / steps as f64;

        let Some(g) = grads.as_deref_mut() else {
            continue;
        };
        let dlogit = (sigmoid(logit) - target) * scale;
        let mut merged = vec![0.0; 2 * GATE_WIDTH];
        if let Some(p) = &prev {
            merged[..GATE_WIDTH].copy_from_slice(&p.out);
        }
        merged[GATE_WIDTH..].copy_from_slice(&cur.out);
        let mut dmerged = vec![0.0; 2 * GATE_WIDTH];
        let gg = &mut g.gates[i];
        gate.merge
            .backward(&merged, &[dlogit], &mut gg.merge, Some(&mut dmerged));

        let mut streams = vec![(&sample.clips[i], &cur, &dmerged[GATE_WIDTH..])];
        if let Some(p) = &prev {
            streams.push((&sample.clips[i - 1], p, &dmerged[..GATE_WIDTH]));
        }
        for (z, acts, dout) in streams {
            let dout: Vec<f64> = dout
                .iter()
                .zip(&acts.out)
                .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
                .collect();
            let mut dhidden = vec![0.0; GATE_WIDTH];
            gate.stream_out
                .backward(&acts.hidden, &dout, &mut gg.stream_out, Some(&mut dhidden));
            for (d, &h) in dhidden.iter_mut().zip(&acts.hidden) {
                if h <= 0.0 {
                    *d = 0.0;
                }
            }
            gate.stream_in.backward(z, &dhidden, &mut gg.stream_in, None);
        }
    }
    Ok(())
}
