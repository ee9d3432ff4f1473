//! Early-exit inference and per-video cost accounting.
//!
//! Frames are visited one at a time in policy order. After each frame the
//! pooled representation is updated and gate `t` scores `(z_{t-1}, z_t)`;
//! the first score at or above the threshold stops processing and classifier
//! `t` produces the prediction. If no gate fires, the last available
//! classifier decides. Frames past the exit are never read.

use serde::{Deserialize, Serialize};

use crate::aggregator::{PooledState, PoolingKind};
use crate::dataset::{LabelSpec, VideoFeatures};
use crate::error::{ensure_dim, Error, Result};
use crate::model::{argmax, sigmoid, softmax, CascadeModel, ClipMode};
use crate::sampler::{sample_order, PolicyKind, SampleOrder};
use crate::trainer::LossVariant;

/// Per-video FLOPs accounting.
///
/// Backbone cost is charged once per processed frame. When
/// `include_head_gate_cost` is set, every processed step also pays for its
/// pooling update (`D` per update, none for the first frame) and its gate
/// (one stream pass at `t = 1`, two afterwards, plus the merge layer), and the
/// prediction pays for the classifier(s) evaluated. Affine layers cost
/// `2 * fan_in * fan_out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub backbone_flops_per_frame: f64,
    pub include_head_gate_cost: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            backbone_flops_per_frame: 4.12e9,
            include_head_gate_cost: false,
        }
    }
}

impl CostModel {
    pub fn pooling_flops(&self, model: &CascadeModel, t: usize) -> f64 {
        if t >= 2 && model.clip_mode == ClipMode::Pooled {
            model.dims().features as f64
        } else {
            0.0
        }
    }

    pub fn gate_flops(&self, model: &CascadeModel, t: usize) -> f64 {
        model.gate(t).flops(t)
    }

    pub fn classifier_flops(&self, model: &CascadeModel) -> f64 {
        model.classifier(1).flops()
    }

    /// Cost of a gated run that exits at `exit`.
    pub fn adaptive(&self, model: &CascadeModel, exit: usize) -> f64 {
        let mut total = exit as f64 * self.backbone_flops_per_frame;
        if self.include_head_gate_cost {
            for t in 1..=exit {
                total += self.pooling_flops(model, t) + self.gate_flops(model, t);
            }
            let heads = match model.clip_mode {
                ClipMode::Pooled => 1.0,
                ClipMode::PerFrame => exit as f64,
            };
            total += heads * self.classifier_flops(model);
        }
        total
    }

    /// Cost of an ungated run over exactly `k` frames.
    pub fn fixed(&self, model: &CascadeModel, k: usize) -> f64 {
        let mut total = k as f64 * self.backbone_flops_per_frame;
        if self.include_head_gate_cost {
            for t in 1..=k {
                total += self.pooling_flops(model, t);
            }
            let heads = match model.clip_mode {
                ClipMode::Pooled => 1.0,
                ClipMode::PerFrame => k as f64,
            };
            total += heads * self.classifier_flops(model);
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: PolicyKind,
    pub cost: CostModel,
    /// Halt when a gate score is at least this value.
    pub threshold: f64,
    /// Determines how logits become probabilities.
    pub variant: LossVariant,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            policy: PolicyKind::CoarseToFine,
            cost: CostModel::default(),
            threshold: 0.5,
            variant: LossVariant::CrossEntropy,
        }
    }
}

/// Record of one video's pass through the cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub video_id: String,
    /// 1-based timestep whose classifier produced the prediction.
    pub exit_timestep: usize,
    /// Scores of every gate evaluated, in order. Empty for fixed budgets.
    pub gate_scores: Vec<f64>,
    /// Class probabilities at exit (softmax, or per-label sigmoid for
    /// multi-label models; averaged over timesteps for prediction pooling).
    pub prediction: Vec<f64>,
    pub label: LabelSpec,
    /// Single-label: top-1 hit. Multi-label: every thresholded label matches.
    pub correct: bool,
    pub flops: f64,
    pub frame_indices_used: Vec<usize>,
}

/// Probabilities from logits for the given loss family.
pub fn probabilities(logits: &[f64], variant: LossVariant) -> Vec<f64> {
    match variant {
        LossVariant::CrossEntropy => softmax(logits),
        LossVariant::BinaryCrossEntropy => logits.iter().map(|&l| sigmoid(l)).collect(),
    }
}

pub fn is_correct(prediction: &[f64], label: &LabelSpec) -> bool {
    match label {
        LabelSpec::Single(c) => argmax(prediction) == *c,
        LabelSpec::Multi(_) => prediction
            .iter()
            .enumerate()
            .all(|(c, &p)| (p >= 0.5) == label.contains(c)),
    }
}

/// Element-wise mean of per-timestep probability vectors, accumulated as a
/// running mean so that identical inputs average to themselves exactly.
pub fn average_predictions(predictions: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = predictions.first().cloned().unwrap_or_default();
    for (k, p) in predictions.iter().enumerate().skip(1) {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    mean
}

/// Number of timesteps usable for a video of `n_frames` frames.
pub fn effective_steps(model: &CascadeModel, n_frames: usize) -> usize {
    model.timesteps().min(n_frames)
}

/// Representations `z_1..z_steps` as classifier `t` would see them.
pub fn clip_representations(
    video: &VideoFeatures,
    steps: usize,
    policy: PolicyKind,
    pooling: PoolingKind,
    mode: ClipMode,
) -> Result<Vec<Vec<f64>>> {
    let order = sample_order(video.n_frames(), policy)?;
    let indices = order.prefix(steps)?;
    let mut out = Vec::with_capacity(steps);
    match mode {
        ClipMode::PerFrame => out.extend(indices.iter().map(|&i| video.frame(i).to_vec())),
        ClipMode::Pooled => {
            let mut state = PooledState::init(video.frame(indices[0]), pooling)?;
            out.push(state.value().to_vec());
            for &i in &indices[1..] {
                state.absorb(video.frame(i))?;
                out.push(state.value().to_vec());
            }
        }
    }
    Ok(out)
}

fn check_video(model: &CascadeModel, video: &VideoFeatures) -> Result<usize> {
    ensure_dim(
        &format!("features of video `{}`", video.video_id),
        model.dims().features,
        video.dim(),
    )?;
    let label_max = video.label.max_index();
    if label_max >= model.dims().categories {
        return Err(Error::InvalidArgument(format!(
            "video `{}` has label {} but the model has {} categories",
            video.video_id,
            video.label,
            model.dims().categories
        )));
    }
    Ok(effective_steps(model, video.n_frames()))
}

/// Runs the gated cascade with accumulated feature pooling.
pub fn infer(model: &CascadeModel, video: &VideoFeatures, cfg: &EngineConfig) -> Result<ExitTrace> {
    if model.clip_mode != ClipMode::Pooled {
        return Err(Error::InvalidArgument(
            "per-frame models are evaluated with prediction pooling".into(),
        ));
    }
    let steps = check_video(model, video)?;
    let order = sample_order(video.n_frames(), cfg.policy)?;

    let mut gate_scores = Vec::with_capacity(steps);
    let mut state: Option<PooledState> = None;
    let mut prev: Option<Vec<f64>> = None;
    let mut exit = steps;
    for t in 1..=steps {
        let frame = video.frame(order.at(t).expect("t <= n_frames"));
        match state.as_mut() {
            None => state = Some(PooledState::init(frame, model.pooling)?),
            Some(s) => {
                prev = Some(s.value().to_vec());
                s.absorb(frame)?;
            }
        }
        let z = state.as_ref().expect("initialised above").value();
        let score = model.gate_score(t, prev.as_deref(), z)?;
        gate_scores.push(score);
        if score >= cfg.threshold {
            exit = t;
            break;
        }
    }
    let z = state.expect("at least one step").into_value();
    let prediction = probabilities(&model.classify(exit, &z)?, cfg.variant);
    Ok(finish(video, exit, gate_scores, prediction, cfg.cost.adaptive(model, exit), &order))
}

/// Ignores the gates and predicts after exactly `k` frames.
pub fn infer_fixed_budget(
    model: &CascadeModel,
    video: &VideoFeatures,
    k: usize,
    cfg: &EngineConfig,
) -> Result<ExitTrace> {
    let steps = check_video(model, video)?;
    if k == 0 || k > steps {
        return Err(Error::InvalidArgument(format!(
            "frame budget {k} outside 1..={steps} for video `{}`",
            video.video_id
        )));
    }
    let clips = clip_representations(video, k, cfg.policy, model.pooling, model.clip_mode)?;
    let prediction = match model.clip_mode {
        ClipMode::Pooled => probabilities(&model.classify(k, &clips[k - 1])?, cfg.variant),
        ClipMode::PerFrame => {
            let per_step = clips
                .iter()
                .enumerate()
                .map(|(i, z)| model.classify(i + 1, z).map(|l| probabilities(&l, cfg.variant)))
                .collect::<Result<Vec<_>>>()?;
            average_predictions(&per_step)
        }
    };
    let order = sample_order(video.n_frames(), cfg.policy)?;
    Ok(finish(video, k, Vec::new(), prediction, cfg.cost.fixed(model, k), &order))
}

/// Gated run of a per-frame model: classifier `t` and gate `t` see only the
/// `t`-th sampled frame (and the gate also the previous one), and the
/// prediction is the mean of the probabilities of classifiers `1..=exit`.
pub fn infer_prediction_pooling(
    model: &CascadeModel,
    video: &VideoFeatures,
    cfg: &EngineConfig,
) -> Result<ExitTrace> {
    if model.clip_mode != ClipMode::PerFrame {
        return Err(Error::InvalidArgument(
            "prediction pooling needs a model trained in per-frame mode".into(),
        ));
    }
    let steps = check_video(model, video)?;
    let order = sample_order(video.n_frames(), cfg.policy)?;

    let mut gate_scores = Vec::with_capacity(steps);
    let mut per_step = Vec::with_capacity(steps);
    let mut exit = steps;
    for t in 1..=steps {
        let x = video.frame(order.at(t).expect("t <= n_frames"));
        let prev = (t > 1).then(|| video.frame(order.at(t - 1).expect("t - 1 >= 1")));
        per_step.push(probabilities(&model.classify(t, x)?, cfg.variant));
        let score = model.gate_score(t, prev, x)?;
        gate_scores.push(score);
        if score >= cfg.threshold {
            exit = t;
            break;
        }
    }
    let prediction = average_predictions(&per_step);
    Ok(finish(video, exit, gate_scores, prediction, cfg.cost.adaptive(model, exit), &order))
}

/// Dispatches on the model's clip mode.
pub fn infer_auto(model: &CascadeModel, video: &VideoFeatures, cfg: &EngineConfig) -> Result<ExitTrace> {
    match model.clip_mode {
        ClipMode::Pooled => infer(model, video, cfg),
        ClipMode::PerFrame => infer_prediction_pooling(model, video, cfg),
    }
}

/// Probabilities of every classifier `1..=T_eff`, ignoring the gates.
pub fn all_classifier_predictions(
    model: &CascadeModel,
    video: &VideoFeatures,
    cfg: &EngineConfig,
) -> Result<Vec<Vec<f64>>> {
    let steps = check_video(model, video)?;
    let clips = clip_representations(video, steps, cfg.policy, model.pooling, model.clip_mode)?;
    let per_step = clips
        .iter()
        .enumerate()
        .map(|(i, z)| model.classify(i + 1, z).map(|l| probabilities(&l, cfg.variant)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match model.clip_mode {
        ClipMode::Pooled => per_step,
        ClipMode::PerFrame => (1..=steps)
            .map(|t| average_predictions(&per_step[..t]))
            .collect(),
    })
}

fn finish(
    video: &VideoFeatures,
    exit: usize,
    gate_scores: Vec<f64>,
    prediction: Vec<f64>,
    flops: f64,
    order: &SampleOrder,
) -> ExitTrace {
    ExitTrace {
        video_id: video.video_id.clone(),
        exit_timestep: exit,
        correct: is_correct(&prediction, &video.label),
        gate_scores,
        prediction,
        label: video.label.clone(),
        flops,
        frame_indices_used: order.as_slice()[..exit].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn model(t: usize, mode: ClipMode) -> CascadeModel {
        let dims = ModelDims { features: 4, hidden: 6, categories: 3 };
        CascadeModel::new(dims, t, PoolingKind::Max, mode, 3).unwrap()
    }

    fn video(n: usize) -> VideoFeatures {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
            .collect();
        VideoFeatures::from_rows("v", &rows, LabelSpec::Single(1)).unwrap()
    }

    fn force_gates(m: &mut CascadeModel, fire_at: Option<usize>) {
        for t in 1..=m.timesteps() {
            let g = m.gate_mut(t);
            g.merge.weight_mut().iter_mut().for_each(|w| *w = 0.0);
            g.merge.bias_mut()[0] = if Some(t) == fire_at { 20.0 } else { -20.0 };
        }
    }

    #[test]
    fn forced_first_gate_exits_immediately() {
        let mut m = model(5, ClipMode::Pooled);
        force_gates(&mut m, Some(1));
        let cfg = EngineConfig::default();
        let tr = infer(&m, &video(9), &cfg).unwrap();
        assert_eq!(tr.exit_timestep, 1);
        assert_eq!(tr.frame_indices_used, vec![5]);
        assert_eq!(tr.flops, 4.12e9);
    }

    #[test]
    fn silent_gates_fall_through_to_last_classifier() {
        let mut m = model(5, ClipMode::Pooled);
        force_gates(&mut m, None);
        let cfg = EngineConfig::default();
        let v = video(9);
        let tr = infer(&m, &v, &cfg).unwrap();
        assert_eq!(tr.exit_timestep, 5);
        assert_eq!(tr.gate_scores.len(), 5);
        let fixed = infer_fixed_budget(&m, &v, 5, &cfg).unwrap();
        assert_eq!(fixed.prediction, tr.prediction);
    }

    #[test]
    fn short_videos_use_available_frames() {
        let mut m = model(10, ClipMode::Pooled);
        force_gates(&mut m, None);
        let tr = infer(&m, &video(3), &EngineConfig::default()).unwrap();
        assert_eq!(tr.exit_timestep, 3);
        assert_eq!(tr.frame_indices_used, vec![2, 1, 3]);
        assert!(infer_fixed_budget(&m, &video(3), 4, &EngineConfig::default()).is_err());
    }

    #[test]
    fn fixed_budget_of_one_uses_middle_frame() {
        let m = model(4, ClipMode::Pooled);
        let v = video(7);
        let cfg = EngineConfig::default();
        let tr = infer_fixed_budget(&m, &v, 1, &cfg).unwrap();
        let expected = probabilities(&m.classify(1, v.frame(4)).unwrap(), cfg.variant);
        assert_eq!(tr.prediction, expected);
        assert_eq!(tr.frame_indices_used, vec![4]);
        assert!(infer_fixed_budget(&m, &v, 0, &cfg).is_err());
    }

    #[test]
    fn fixed_budget_cost_is_linear() {
        let m = model(8, ClipMode::Pooled);
        let v = video(12);
        let cfg = EngineConfig {
            cost: CostModel { backbone_flops_per_frame: 1000.0, include_head_gate_cost: true },
            ..EngineConfig::default()
        };
        let c3 = infer_fixed_budget(&m, &v, 3, &cfg).unwrap().flops;
        let c6 = infer_fixed_budget(&m, &v, 6, &cfg).unwrap().flops;
        assert_eq!(c6 - c3, 3.0 * (1000.0 + 4.0));
    }

    #[test]
    fn prediction_pooling_mode_checks() {
        let pooled = model(3, ClipMode::Pooled);
        let per_frame = model(3, ClipMode::PerFrame);
        let v = video(6);
        let cfg = EngineConfig::default();
        assert!(infer_prediction_pooling(&pooled, &v, &cfg).is_err());
        assert!(infer(&per_frame, &v, &cfg).is_err());
        assert!(infer_prediction_pooling(&per_frame, &v, &cfg).is_ok());
    }

    #[test]
    fn single_step_prediction_pooling_matches_feature_pooling() {
        let mut pooled = model(1, ClipMode::Pooled);
        force_gates(&mut pooled, None);
        let mut per_frame = pooled.clone();
        per_frame.clip_mode = ClipMode::PerFrame;
        let v = video(5);
        let cfg = EngineConfig::default();
        let a = infer(&pooled, &v, &cfg).unwrap();
        let b = infer_prediction_pooling(&per_frame, &v, &cfg).unwrap();
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn averaging_predictions() {
        let avg = average_predictions(&[vec![0.9, 0.1], vec![0.5, 0.5]]);
        assert!((avg[0] - 0.7).abs() < 1e-15 && (avg[1] - 0.3).abs() < 1e-15);
        let p = vec![0.2, 0.5, 0.3];
        assert_eq!(average_predictions(&[p.clone(), p.clone(), p.clone()]), p);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = model(2, ClipMode::Pooled);
        let v = VideoFeatures::from_rows("w", &[vec![0.0; 3]], LabelSpec::Single(0)).unwrap();
        assert!(matches!(
            infer(&m, &v, &EngineConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
