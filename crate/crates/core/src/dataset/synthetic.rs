//! Seeded synthetic feature datasets with an easy/hard mixture.
//!
//! Every category `c` owns a random unit mean `mu_c`; a shared background
//! mean `mu_bg` stands for frames that carry no category evidence. Easy
//! videos draw every frame around `mu_c`. Hard videos draw exactly `k`
//! frames around `mu_c` (at uniformly chosen positions) and the rest around
//! `mu_bg`. Noise is isotropic Gaussian with standard deviation `noise_sigma`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabelSpec, VideoFeatures};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_categories: usize,
    pub dim: usize,
    pub n_frames: usize,
    /// Total number of videos; the last `n_test` form the test split.
    pub n_videos: usize,
    pub n_test: usize,
    pub easy_fraction: f64,
    /// Informative frames per hard video.
    pub hard_informative_frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_categories: 10,
            dim: 64,
            n_frames: 30,
            n_videos: 6000,
            n_test: 1000,
            easy_fraction: 0.5,
            hard_informative_frames: 5,
            noise_sigma: 0.05,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("synthetic config: {m}")));
        if self.n_categories == 0 || self.dim == 0 || self.n_frames == 0 {
            return fail("n_categories, dim and n_frames must be positive".into());
        }
        if self.n_test > self.n_videos {
            return fail(format!("n_test {} exceeds n_videos {}", self.n_test, self.n_videos));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return fail(format!("easy_fraction {} outside [0, 1]", self.easy_fraction));
        }
        if self.hard_informative_frames == 0 || self.hard_informative_frames > self.n_frames {
            return fail(format!(
                "hard_informative_frames must be in 1..={}, got {}",
                self.n_frames, self.hard_informative_frames
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Ground truth kept beside each synthetic video. Never fed to a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub easy: bool,
    /// 1-based positions of the frames drawn around the category mean.
    pub informative: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<VideoFeatures>,
    pub test: Vec<VideoFeatures>,
    pub train_meta: Vec<Difficulty>,
    pub test_meta: Vec<Difficulty>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| random_unit(&mut rng, cfg.dim))
        .collect();
    let background = random_unit(&mut rng, cfg.dim);

    let n_train = cfg.n_videos - cfg.n_test;
    let mut out = SyntheticDataset {
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(cfg.n_test),
        train_meta: Vec::with_capacity(n_train),
        test_meta: Vec::with_capacity(cfg.n_test),
    };

    for i in 0..cfg.n_videos {
        let category = rng.random_range(0..cfg.n_categories);
        let easy = rng.random_bool(cfg.easy_fraction);
        let informative: Vec<usize> = if easy {
            (1..=cfg.n_frames).collect()
        } else {
            let mut picks: Vec<usize> =
                index::sample(&mut rng, cfg.n_frames, cfg.hard_informative_frames)
                    .into_iter()
                    .map(|p| p + 1)
                    .collect();
            picks.sort_unstable();
            picks
        };

        let mut frames = Vec::with_capacity(cfg.n_frames * cfg.dim);
        let mut next_informative = informative.iter().peekable();
        for pos in 1..=cfg.n_frames {
            let center = if next_informative.next_if_eq(&&pos).is_some() {
                &means[category]
            } else {
                &background
            };
            frames.extend(center.iter().map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + cfg.noise_sigma * z
            }));
        }

        let video = VideoFeatures::new(
            format!("syn-{i:06}"),
            cfg.dim,
            frames,
            LabelSpec::Single(category),
        )?;
        let meta = Difficulty { easy, informative };
        if i < n_train {
            out.train.push(video);
            out.train_meta.push(meta);
        } else {
            out.test.push(video);
            out.test_meta.push(meta);
        }
    }
    Ok(out)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
