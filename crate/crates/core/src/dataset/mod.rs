//! Per-frame feature datasets.
//!
//! Frame features are treated as the output of an external, frozen image
//! backbone. They are either loaded from disk ([`load_dataset`]) or generated
//! synthetically with known easy/hard structure ([`generate_synthetic`]).

mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset, save_difficulty};
pub use synthetic::{generate_synthetic, Difficulty, SyntheticConfig, SyntheticDataset};

use crate::error::{ensure_finite, Error, Result};

/// Ground-truth label of a video.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSpec {
    Single(usize),
    /// Sorted, deduplicated, non-empty set of positive categories.
    Multi(Vec<usize>),
}

impl LabelSpec {
    pub fn multi(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::InvalidArgument(
                "multi-label spec needs at least one positive category".into(),
            ));
        }
        Ok(LabelSpec::Multi(v))
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, LabelSpec::Multi(_))
    }

    /// Largest category index referenced by this label.
    pub fn max_index(&self) -> usize {
        match self {
            LabelSpec::Single(c) => *c,
            LabelSpec::Multi(v) => *v.last().expect("non-empty by construction"),
        }
    }

    pub fn contains(&self, category: usize) -> bool {
        match self {
            LabelSpec::Single(c) => *c == category,
            LabelSpec::Multi(v) => v.binary_search(&category).is_ok(),
        }
    }

    /// 0/1 target vector over `n_categories`.
    pub fn to_mask(&self, n_categories: usize) -> Result<Vec<f64>> {
        if self.max_index() >= n_categories {
            return Err(Error::InvalidArgument(format!(
                "label `{self}` out of range for {n_categories} categories"
            )));
        }
        let mut mask = vec![0.0; n_categories];
        match self {
            LabelSpec::Single(c) => mask[*c] = 1.0,
            LabelSpec::Multi(v) => v.iter().for_each(|&c| mask[c] = 1.0),
        }
        Ok(mask)
    }
}

impl fmt::Display for LabelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSpec::Single(c) => write!(f, "s:{c}"),
            LabelSpec::Multi(v) => {
                f.write_str("m:")?;
                for (i, c) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{c}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for LabelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed label spec `{s}`"));
        if let Some(rest) = s.strip_prefix("s:") {
            rest.parse().map(LabelSpec::Single).map_err(|_| bad())
        } else if let Some(rest) = s.strip_prefix("m:") {
            let indices = rest
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            LabelSpec::multi(indices)
        } else {
            Err(bad())
        }
    }
}

/// One video: `n_frames` feature vectors of width `dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    dim: usize,
    frames: Vec<f64>,
    pub label: LabelSpec,
}

impl VideoFeatures {
    pub fn new(
        video_id: impl Into<String>,
        dim: usize,
        frames: Vec<f64>,
        label: LabelSpec,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "video `{video_id}`: {} values cannot be split into frames of width {dim}",
                frames.len()
            )));
        }
        ensure_finite(&frames, || format!("features of video `{video_id}`"))?;
        Ok(VideoFeatures {
            video_id,
            dim,
            frames,
            label,
        })
    }

    pub fn from_rows(
        video_id: impl Into<String>,
        rows: &[Vec<f64>],
        label: LabelSpec,
    ) -> Result<Self> {
        let video_id = video_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: format!("frames of video `{video_id}`"),
                expected: dim,
                actual: bad.len(),
            });
        }
        Self::new(video_id, dim, rows.concat(), label)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    /// Feature vector of 1-based frame `index`.
    pub fn frame(&self, index: usize) -> &[f64] {
        assert!(
            (1..=self.n_frames()).contains(&index),
            "frame index {index} outside 1..={}",
            self.n_frames()
        );
        let start = (index - 1) * self.dim;
        &self.frames[start..start + self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim)
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.frames
    }
}
