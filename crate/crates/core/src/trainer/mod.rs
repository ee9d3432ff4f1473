//! Two-stage training.
//!
//! Stage 1 fits the shared projection and the classifier heads on the mean
//! classifier loss over timesteps. Stage 2 freezes them and fits the gates
//! against pseudo-labels derived, per sample and per step, from the frozen
//! classifiers' losses. A joint single-stage mode optimizes the sum of both
//! terms instead.

mod adam;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use loss::{
    classifier_loss, epsilon_schedule, gate_loss, pseudo_labels, GatePseudoLabel, LossVariant,
};

use crate::aggregator::PoolingKind;
use crate::dataset::VideoFeatures;
use crate::engine::clip_representations;
use crate::error::{Error, Result};
use crate::model::{gradients, BlockGroup, CascadeModel, ClipMode, LossSpec, ModelDims, Objective, Sample};
use crate::sampler::PolicyKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    /// Epoch counts after which the learning rate is multiplied by
    /// `decay_factor`.
    pub stage1_decay_epochs: Vec<usize>,
    pub stage2_epochs: usize,
    pub stage2_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub timesteps: usize,
    pub hidden: usize,
    pub categories: usize,
    pub pooling: PoolingKind,
    pub clip_mode: ClipMode,
    pub policy: PolicyKind,
    pub loss_variant: LossVariant,
    /// Optimize classification and gate terms together in a single stage of
    /// `stage1_epochs` epochs.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1e-4,
            learning_rate: 1e-4,
            stage1_epochs: 35,
            stage1_decay_epochs: vec![16, 30],
            stage2_epochs: 10,
            stage2_decay_epochs: vec![5, 8],
            decay_factor: 0.1,
            batch_size: 64,
            seed: 0,
            timesteps: 10,
            hidden: 256,
            categories: 10,
            pooling: PoolingKind::Max,
            clip_mode: ClipMode::Pooled,
            policy: PolicyKind::CoarseToFine,
            loss_variant: LossVariant::CrossEntropy,
            joint: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return fail("epoch counts must be at least 1");
        }
        if self.batch_size == 0 || self.timesteps == 0 || self.hidden == 0 || self.categories == 0 {
            return fail("batch_size, timesteps, hidden and categories must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return fail("decay_factor must be positive");
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch` given the decay milestones.
    pub fn learning_rate_at(&self, epoch: usize, milestones: &[usize]) -> f64 {
        let drops = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        self.learning_rate * self.decay_factor.powi(drops)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based within its stage.
    pub epoch: usize,
    /// 1 = classifiers, 2 = gates, 0 = joint.
    pub stage: u8,
    /// Mean per-sample loss of the optimized objective over the epoch.
    pub loss: f64,
    pub lr: f64,
    /// Fraction of pseudo-labels equal to 1 at each timestep (gate stages).
    pub positive_rate: Vec<f64>,
}

impl EpochLog {
    /// `epoch,stage,loss,lr`.
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.stage, self.loss, self.lr)
    }
}

pub const LOG_HEADER: &str = "epoch,stage,loss,lr";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model after stage 1 (or the joint stage).
    pub stage1: CascadeModel,
    /// Final model.
    pub model: CascadeModel,
    pub log: Vec<EpochLog>,
}

/// Clip representations for every training video, computed once; they do
/// not depend on trainable parameters.
pub struct PreparedSet<'a> {
    videos: &'a [VideoFeatures],
    clips: Vec<Vec<Vec<f64>>>,
}

impl<'a> PreparedSet<'a> {
    pub fn new(videos: &'a [VideoFeatures], cfg: &TrainConfig) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let dim = videos[0].dim();
        let mut clips = Vec::with_capacity(videos.len());
        for v in videos {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!("features of training video `{}`", v.video_id),
                    expected: dim,
                    actual: v.dim(),
                });
            }
            if v.label.max_index() >= cfg.categories {
                return Err(Error::InvalidArgument(format!(
                    "video `{}` has label {} but only {} categories are configured",
                    v.video_id, v.label, cfg.categories
                )));
            }
            if v.label.is_multi() && cfg.loss_variant == LossVariant::CrossEntropy {
                return Err(Error::InvalidArgument(format!(
                    "video `{}` is multi-label; use the bce loss variant",
                    v.video_id
                )));
            }
            let steps = cfg.timesteps.min(v.n_frames());
            clips.push(clip_representations(v, steps, cfg.policy, cfg.pooling, cfg.clip_mode)?);
        }
        Ok(PreparedSet { videos, clips })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos[0].dim()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            clips: &self.clips[i],
            label: &self.videos[i].label,
        }
    }
}

/// Full procedure: classifiers, then gates (or the joint single stage).
pub fn train(videos: &[VideoFeatures], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = PreparedSet::new(videos, cfg)?;
    let init = initial_model(&set, cfg)?;
    if cfg.joint {
        let (model, log) = run_stage(init, &set, cfg, Stage::Joint, cfg.beta)?;
        return Ok(TrainOutcome {
            stage1: model.clone(),
            model,
            log,
        });
    }
    let (stage1, mut log) = run_stage(init, &set, cfg, Stage::Classifiers, cfg.beta)?;
    let (model, log2) = run_stage(stage1.clone(), &set, cfg, Stage::Gates, cfg.beta)?;
    log.extend(log2);
    Ok(TrainOutcome { stage1, model, log })
}

/// Stage 1 only.
pub fn train_classifiers(set: &PreparedSet<'_>, cfg: &TrainConfig) -> Result<(CascadeModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let init = initial_model(set, cfg)?;
    run_stage(init, set, cfg, Stage::Classifiers, cfg.beta)
}

/// Stage 2 only: fits fresh gates on top of `stage1`'s frozen classifiers.
///
/// Gate parameters are re-initialised from the seed so that every `beta`
/// starts from the same point.
pub fn train_gates(
    stage1: &CascadeModel,
    set: &PreparedSet<'_>,
    cfg: &TrainConfig,
    beta: f64,
) -> Result<(CascadeModel, Vec<EpochLog>)> {
    cfg.validate()?;
    check_compatible(stage1, set, cfg)?;
    let mut model = stage1.clone();
    let fresh = initial_model(set, cfg)?;
    for t in 1..=model.timesteps() {
        *model.gate_mut(t) = fresh.gate(t).clone();
    }
    run_stage(model, set, cfg, Stage::Gates, beta)
}

fn initial_model(set: &PreparedSet<'_>, cfg: &TrainConfig) -> Result<CascadeModel> {
    let dims = ModelDims {
        features: set.feature_dim(),
        hidden: cfg.hidden,
        categories: cfg.categories,
    };
    CascadeModel::new(dims, cfg.timesteps, cfg.pooling, cfg.clip_mode, cfg.seed)
}

fn check_compatible(model: &CascadeModel, set: &PreparedSet<'_>, cfg: &TrainConfig) -> Result<()> {
    let dims = model.dims();
    if dims.features != set.feature_dim() || dims.categories != cfg.categories {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dims {dims:?} do not match data (D = {}) and config (C = {})",
            set.feature_dim(),
            cfg.categories
        )));
    }
    if model.timesteps() != cfg.timesteps || model.pooling != cfg.pooling || model.clip_mode != cfg.clip_mode {
        return Err(Error::InvalidArgument(format!(
            "checkpoint (T = {}, pooling {}, mode {}) does not match config (T = {}, pooling {}, mode {})",
            model.timesteps(),
            model.pooling,
            model.clip_mode,
            cfg.timesteps,
            cfg.pooling,
            cfg.clip_mode
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Classifiers,
    Gates,
    Joint,
}

impl Stage {
    fn number(self) -> u8 {
        match self {
            Stage::Classifiers => 1,
            Stage::Gates => 2,
            Stage::Joint => 0,
        }
    }
}

fn run_stage(
    mut model: CascadeModel,
    set: &PreparedSet<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    beta: f64,
) -> Result<(CascadeModel, Vec<EpochLog>)> {
    let (epochs, milestones, objective, group) = match stage {
        Stage::Classifiers => (
            cfg.stage1_epochs,
            &cfg.stage1_decay_epochs,
            Objective::Classification,
            Some(BlockGroup::Classifier),
        ),
        Stage::Gates => (
            cfg.stage2_epochs,
            &cfg.stage2_decay_epochs,
            Objective::Gating { beta },
            Some(BlockGroup::Gate),
        ),
        Stage::Joint => (
            cfg.stage1_epochs,
            &cfg.stage1_decay_epochs,
            Objective::Joint { beta },
            None,
        ),
    };
    let spec = LossSpec {
        objective,
        variant: cfg.loss_variant,
    };
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let t_max = model.timesteps();

    for epoch in 0..epochs {
        let lr = cfg.learning_rate_at(epoch, milestones);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((stage.number() as u64) << 32) | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut positives = vec![0usize; t_max];
        let mut reached = vec![0usize; t_max];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| set.sample(i)).collect();
            let (loss, grads) = gradients(&model, &batch, spec).map_err(|e| Error::Diverged {
                stage: stage.number(),
                epoch: epoch + 1,
                message: e.to_string(),
            })?;
            loss_sum += loss.total() * batch.len() as f64;
            for t in 0..t_max {
                positives[t] += loss.positives[t];
                reached[t] += loss.reached[t];
            }
            adam.step(&mut model, &grads, lr, group);
        }
        if let Err(e) = model.check_finite() {
            return Err(Error::Diverged {
                stage: stage.number(),
                epoch: epoch + 1,
                message: e.to_string(),
            });
        }
        let positive_rate = if stage == Stage::Classifiers {
            Vec::new()
        } else {
            positives
                .iter()
                .zip(&reached)
                .map(|(&p, &r)| if r == 0 { 0.0 } else { p as f64 / r as f64 })
                .collect()
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            stage: stage.number(),
            loss: loss_sum / set.len() as f64,
            lr,
            positive_rate,
        });
    }
    Ok((model, log))
}
