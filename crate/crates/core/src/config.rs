//! Flat `key = value` settings shared by every command.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors.
//! [`Settings::canonical`] renders every key in a fixed order; it is the
//! input to report fingerprints, so two runs with equal canonical settings,
//! parameters and data produce equal fingerprints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{SyntheticConfig, VideoFeatures};
use crate::engine::{CostModel, EngineConfig};
use crate::error::{Error, Result};
use crate::model::CascadeModel;
use crate::trainer::TrainConfig;

/// Which headline metric a report uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricChoice {
    /// Top-1 for single-label data, mAP when any label is multi-label.
    #[default]
    Auto,
    Top1,
    MeanAveragePrecision,
}

impl fmt::Display for MetricChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricChoice::Auto => "auto",
            MetricChoice::Top1 => "top1",
            MetricChoice::MeanAveragePrecision => "map",
        })
    }
}

impl FromStr for MetricChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MetricChoice::Auto),
            "top1" => Ok(MetricChoice::Top1),
            "map" => Ok(MetricChoice::MeanAveragePrecision),
            _ => Err(Error::InvalidArgument(format!("unknown metric `{s}` (auto, top1, map)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub sweep_betas: Vec<f64>,
    pub metric: MetricChoice,
}

impl Default for Settings {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        Settings {
            train: TrainConfig {
                categories: data.n_categories,
                ..TrainConfig::default()
            },
            data,
            engine: EngineConfig::default(),
            sweep_betas: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
            metric: MetricChoice::Auto,
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "data.categories",
    "data.dim",
    "data.frames",
    "data.videos",
    "data.test_videos",
    "data.easy_fraction",
    "data.informative_frames",
    "data.noise_sigma",
    "data.seed",
    "model.timesteps",
    "model.hidden",
    "model.pooling",
    "model.clip_mode",
    "model.loss",
    "policy",
    "train.beta",
    "train.learning_rate",
    "train.stage1_epochs",
    "train.stage1_decay_epochs",
    "train.stage2_epochs",
    "train.stage2_decay_epochs",
    "train.decay_factor",
    "train.batch_size",
    "train.seed",
    "train.joint",
    "engine.threshold",
    "cost.backbone_flops",
    "cost.include_head_gate",
    "sweep.betas",
    "eval.metric",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut settings = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            settings
                .set(key.trim(), value.trim())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        settings.validate()?;
        Ok(settings)
    }

    /// Applies `key=value` overrides in order, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data.categories" => {
                d.n_categories = parse(key, value)?;
                t.categories = d.n_categories;
            }
            "data.dim" => d.dim = parse(key, value)?,
            "data.frames" => d.n_frames = parse(key, value)?,
            "data.videos" => d.n_videos = parse(key, value)?,
            "data.test_videos" => d.n_test = parse(key, value)?,
            "data.easy_fraction" => d.easy_fraction = parse(key, value)?,
            "data.informative_frames" => d.hard_informative_frames = parse(key, value)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "model.timesteps" => t.timesteps = parse(key, value)?,
            "model.hidden" => t.hidden = parse(key, value)?,
            "model.pooling" => t.pooling = value.parse()?,
            "model.clip_mode" => t.clip_mode = value.parse()?,
            "model.loss" => {
                t.loss_variant = value.parse()?;
                self.engine.variant = t.loss_variant;
            }
            "policy" => {
                t.policy = value.parse()?;
                self.engine.policy = t.policy;
            }
            "train.beta" => t.beta = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.stage1_epochs" => t.stage1_epochs = parse(key, value)?,
            "train.stage1_decay_epochs" => t.stage1_decay_epochs = parse_list(key, value)?,
            "train.stage2_epochs" => t.stage2_epochs = parse(key, value)?,
            "train.stage2_decay_epochs" => t.stage2_decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.joint" => t.joint = parse(key, value)?,
            "engine.threshold" => self.engine.threshold = parse(key, value)?,
            "cost.backbone_flops" => self.engine.cost.backbone_flops_per_frame = parse(key, value)?,
            "cost.include_head_gate" => self.engine.cost.include_head_gate_cost = parse(key, value)?,
            "sweep.betas" => self.sweep_betas = parse_list(key, value)?,
            "eval.metric" => self.metric = value.parse()?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (d, t) = (&self.data, &self.train);
        let CostModel {
            backbone_flops_per_frame,
            include_head_gate_cost,
        } = self.engine.cost;
        Some(match key {
            "data.categories" => d.n_categories.to_string(),
            "data.dim" => d.dim.to_string(),
            "data.frames" => d.n_frames.to_string(),
            "data.videos" => d.n_videos.to_string(),
            "data.test_videos" => d.n_test.to_string(),
            "data.easy_fraction" => d.easy_fraction.to_string(),
            "data.informative_frames" => d.hard_informative_frames.to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            "data.seed" => d.seed.to_string(),
            "model.timesteps" => t.timesteps.to_string(),
            "model.hidden" => t.hidden.to_string(),
            "model.pooling" => t.pooling.to_string(),
            "model.clip_mode" => t.clip_mode.to_string(),
            "model.loss" => t.loss_variant.to_string(),
            "policy" => t.policy.to_string(),
            "train.beta" => t.beta.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.stage1_epochs" => t.stage1_epochs.to_string(),
            "train.stage1_decay_epochs" => join(&t.stage1_decay_epochs),
            "train.stage2_epochs" => t.stage2_epochs.to_string(),
            "train.stage2_decay_epochs" => join(&t.stage2_decay_epochs),
            "train.decay_factor" => t.decay_factor.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.joint" => t.joint.to_string(),
            "engine.threshold" => self.engine.threshold.to_string(),
            "cost.backbone_flops" => backbone_flops_per_frame.to_string(),
            "cost.include_head_gate" => include_head_gate_cost.to_string(),
            "sweep.betas" => join(&self.sweep_betas),
            "eval.metric" => self.metric.to_string(),
            _ => return None,
        })
    }

    /// `key = value` for every key, one per line, in canonical order.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key renders")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let th = self.engine.threshold;
        if !(th > 0.0 && th <= 1.0) {
            return Err(Error::InvalidArgument(format!("engine.threshold {th} outside (0, 1]")));
        }
        let b = self.engine.cost.backbone_flops_per_frame;
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("cost.backbone_flops {b} must be >= 0")));
        }
        if self.sweep_betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("sweep.betas must all be positive".into()));
        }
        Ok(())
    }
}

/// SHA-256 over the canonical settings, the model parameters and the data.
pub fn fingerprint(settings: &Settings, model: &CascadeModel, videos: &[VideoFeatures]) -> String {
    let mut h = Sha256::new();
    h.update(settings.canonical().as_bytes());
    h.update(b"\0model\0");
    h.update(crate::checkpoint::to_bytes(model, 0, None));
    h.update(b"\0data\0");
    for v in videos {
        h.update(v.video_id.as_bytes());
        h.update(b"\t");
        h.update(v.label.to_string().as_bytes());
        h.update((v.n_frames() as u64).to_le_bytes());
        h.update((v.dim() as u64).to_le_bytes());
        for frame in v.frames() {
            for x in frame {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
