//! Frame visitation orders.
//!
//! All indices produced here are 1-based. Conversion to 0-based storage
//! happens where frames are looked up (see [`crate::dataset::VideoFeatures::frame`]).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which order frames are visited in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Middle, first, last, then midpoints of successively halved intervals.
    #[default]
    CoarseToFine,
    /// Identity order `1..=N`.
    Sequential,
    /// A seeded uniform permutation of `1..=N`.
    Random(u64),
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::CoarseToFine => f.write_str("coarse-to-fine"),
            PolicyKind::Sequential => f.write_str("sequential"),
            PolicyKind::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse-to-fine" => Ok(PolicyKind::CoarseToFine),
            "sequential" => Ok(PolicyKind::Sequential),
            _ => {
                let seed = s
                    .strip_prefix("random:")
                    .and_then(|seed| seed.parse().ok())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "unknown policy `{s}` (expected coarse-to-fine, sequential or random:<seed>)"
                        ))
                    })?;
                Ok(PolicyKind::Random(seed))
            }
        }
    }
}

/// A full visitation order over the frames of an `n_frames`-long video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleOrder {
    n_frames: usize,
    order: Vec<usize>,
}

impl SampleOrder {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// The 1-based frame indices in visitation order.
    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    /// Frame index visited at 1-based timestep `t`.
    pub fn at(&self, t: usize) -> Option<usize> {
        t.checked_sub(1).and_then(|i| self.order.get(i).copied())
    }

    /// The index set of the partial clip after `t` timesteps.
    pub fn prefix(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.n_frames {
            return Err(Error::InvalidArgument(format!(
                "prefix length {t} outside 1..={}",
                self.n_frames
            )));
        }
        Ok(&self.order[..t])
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.order
    }
}

/// Produces the visitation order for an `n_frames`-long video under `policy`.
pub fn sample_order(n_frames: usize, policy: PolicyKind) -> Result<SampleOrder> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument(
            "cannot sample from a video with zero frames".into(),
        ));
    }
    let order = match policy {
        PolicyKind::CoarseToFine => coarse_to_fine(n_frames),
        PolicyKind::Sequential => (1..=n_frames).collect(),
        PolicyKind::Random(seed) => {
            let mut order: Vec<usize> = (1..=n_frames).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            order
        }
    };
    Ok(SampleOrder { n_frames, order })
}

fn coarse_to_fine(n: usize) -> Vec<usize> {
    let mut seen = vec![false; n + 1];
    let mut order = Vec::with_capacity(n);
    let mut push = |ind: usize, order: &mut Vec<usize>| {
        if !seen[ind] {
            seen[ind] = true;
            order.push(ind);
        }
    };

    // For n < 3 the seed triple contains repeats; they are skipped like any
    // other duplicate.
    for ind in [n.div_ceil(2), 1, n] {
        push(ind, &mut order);
    }

    let mut q = 2usize;
    while order.len() < n {
        let interval = floored_linspace(n, q);
        for pair in interval.windows(2) {
            push((pair[0] + pair[1]) / 2, &mut order);
        }
        q *= 2;
    }
    order
}

/// `floor(linspace(1, n, q + 1))`.
fn floored_linspace(n: usize, q: usize) -> Vec<usize> {
    let step = (n as f64 - 1.0) / q as f64;
    (0..=q)
        .map(|i| (1.0 + i as f64 * step).floor() as usize)
        .collect()
}
