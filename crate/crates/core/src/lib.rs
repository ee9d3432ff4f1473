//! Conditional early-exit cascades over per-frame video features.
//!
//! Frames are visited in a coarse-to-fine order and folded into a pooled
//! clip representation one at a time. After each frame a small gate decides
//! whether the classifier at that step is confident enough to stop, so easy
//! videos are classified from a handful of frames while hard ones use more.

pub mod aggregator;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use aggregator::{PooledState, PoolingKind};
pub use config::Settings;
pub use dataset::{LabelSpec, VideoFeatures};
pub use engine::{CostModel, EngineConfig, ExitTrace};
pub use eval::EvalReport;
pub use error::{Error, Result};
pub use model::{CascadeModel, ClipMode, ModelDims};
pub use sampler::{sample_order, PolicyKind, SampleOrder};
pub use trainer::{LossVariant, TrainConfig};
