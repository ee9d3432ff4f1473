//! Fixtures shared by the benchmarks.

use exitcascade::{CascadeModel, ClipMode, LabelSpec, ModelDims, PoolingKind, VideoFeatures};

/// Model with the default benchmark shape: D=64, H=256, C=10, T=10.
pub fn model() -> CascadeModel {
    let dims = ModelDims { features: 64, hidden: 256, categories: 10 };
    CascadeModel::new(dims, 10, PoolingKind::Max, ClipMode::Pooled, 7).expect("valid shape")
}

/// Deterministic 30-frame video with 64-dimensional features.
pub fn video(seed: usize) -> VideoFeatures {
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|i| (0..64).map(|j| (((seed * 31 + i) * 64 + j) as f64 * 0.37).sin()).collect())
        .collect();
    VideoFeatures::from_rows(format!("bench{seed}"), &rows, LabelSpec::Single(seed % 10)).expect("well-formed rows")
}
