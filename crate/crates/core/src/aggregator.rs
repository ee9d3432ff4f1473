//! Accumulated feature pooling: the clip representation after `t` frames is
//! folded from the one after `t - 1` frames and the newly sampled frame, so
//! each step costs `O(D)` regardless of how many frames came before.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolingKind {
    #[default]
    Max,
    Mean,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Max => "max",
            PoolingKind::Mean => "mean",
        })
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolingKind::Max),
            "mean" | "avg" => Ok(PoolingKind::Mean),
            _ => Err(Error::InvalidArgument(format!("unknown pooling kind `{s}`"))),
        }
    }
}

/// Running clip representation `z_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledState {
    kind: PoolingKind,
    value: Vec<f64>,
    count: usize,
}

impl PooledState {
    pub fn init(frame: &[f64], kind: PoolingKind) -> Result<Self> {
        ensure_finite(frame, || "pooling input frame".into())?;
        Ok(PooledState {
            kind,
            value: frame.to_vec(),
            count: 1,
        })
    }

    /// Returns the state after absorbing one more frame.
    pub fn update(&self, frame: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.absorb(frame)?;
        Ok(next)
    }

    /// In-place form of [`PooledState::update`].
    pub fn absorb(&mut self, frame: &[f64]) -> Result<()> {
        ensure_dim("pooling update", self.value.len(), frame.len())?;
        ensure_finite(frame, || "pooling input frame".into())?;
        match self.kind {
            PoolingKind::Max => {
                for (v, &x) in self.value.iter_mut().zip(frame) {
                    if x > *v {
                        *v = x;
                    }
                }
            }
            PoolingKind::Mean => {
                let n = self.count as f64;
                for (v, &x) in self.value.iter_mut().zip(frame) {
                    *v = (n * *v + x) / (n + 1.0);
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn into_value(self) -> Vec<f64> {
        self.value
    }
}
