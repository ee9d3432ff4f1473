//! Reference implementations used as oracles. Each is written for clarity
//! rather than speed and shares no code with the library paths it checks.

#![allow(dead_code)]

use exitcascade::dataset::LabelSpec;
use exitcascade::model::{total_loss, CascadeModel, LossSpec, Sample};
use exitcascade::trainer::LossVariant;
use exitcascade::{ClipMode, ModelDims, PoolingKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal coarse-to-fine visitation: linear-scan membership, integer
/// interval arithmetic, duplicates in the opening triple dropped.
pub fn reference_order(n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = Vec::new();
    #[allow(clippy::manual_div_ceil)]
    for ind in [(n + 1) / 2, 1, n] {
        if !s.contains(&ind) {
            s.push(ind);
        }
    }
    let mut q = 2;
    while s.len() < n {
        // floor(1 + i (N - 1) / q), exact in integers.
        let interval: Vec<usize> = (0..=q).map(|i| 1 + i * (n - 1) / q).collect();
        for w in interval.windows(2) {
            let ind = (w[0] + w[1]) / 2;
            if !s.contains(&ind) {
                s.push(ind);
            }
        }
        q *= 2;
    }
    s
}

/// All-point AP from explicit ranks: item `i` sits at rank
/// `1 + #{j : s_j > s_i} + #{j < i : s_j == s_i}`.
pub fn brute_force_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let pos: Vec<usize> = (0..n).filter(|&i| positives[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let r = rank(i);
        let above = pos.iter().filter(|&&j| rank(j) <= r).count();
        total += above as f64 / r as f64;
    }
    Some(total / pos.len() as f64)
}

/// Hand-derived per-video FLOPs with head and gate costs included:
/// `e` frames of backbone, a one-stream gate at step 1, two-stream gates
/// afterwards, one pooling update per step after the first and one
/// classifier at exit.
pub fn hand_cost(e: u64, backbone: u64, d: u64, h: u64, c: u64) -> u64 {
    let stream = 2 * d * 64 + 2 * 64 * 64;
    let merge = 2 * 128;
    let gates = (stream + merge) + (e - 1) * (2 * stream + merge);
    let pooling = (e - 1) * d;
    let classifier = 2 * d * h + 2 * h * c;
    e * backbone + gates + pooling + classifier
}

pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` (flat, canonical order) against central differences
/// of the batch loss. Returns every entry outside tolerance.
pub fn finite_difference_mismatches(
    model: &CascadeModel,
    batch: &[Sample<'_>],
    spec: LossSpec,
    analytic: &[f64],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Vec<GradMismatch> {
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut bad = Vec::new();
    for i in 0..base.len() {
        set_param(&mut probe, i, base[i] + h);
        let up = total_loss(&probe, batch, spec).unwrap().total();
        set_param(&mut probe, i, base[i] - h);
        let down = total_loss(&probe, batch, spec).unwrap().total();
        set_param(&mut probe, i, base[i]);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        if diff > abs_floor && diff > rel_tol * a.abs().max(numeric.abs()) {
            bad.push(GradMismatch {
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    bad
}

fn set_param(model: &mut CascadeModel, mut index: usize, value: f64) {
    for (_, block) in model.blocks_mut() {
        if index < block.len() {
            block[index] = value;
            return;
        }
        index -= block.len();
    }
    panic!("parameter index out of range");
}

/// A seeded random model and batch small enough for finite differences:
/// `D <= 16`, `H <= 8`, `C <= 4`, `T <= 3`, at most 3 samples.
pub struct Instance {
    pub model: CascadeModel,
    pub clips: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<LabelSpec>,
    pub variant: LossVariant,
    pub beta: f64,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            features: rng.random_range(1..=16),
            hidden: rng.random_range(1..=8),
            categories: rng.random_range(2..=4),
        };
        let t = rng.random_range(1..=3);
        let mut model = CascadeModel::new(dims, t, PoolingKind::Max, ClipMode::Pooled, seed).unwrap();
        // Non-zero biases so every code path carries gradient.
        let mut flat = model.to_flat();
        flat.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        model.load_flat(&flat).unwrap();
        let variant = if seed % 4 == 3 {
            LossVariant::BinaryCrossEntropy
        } else {
            LossVariant::CrossEntropy
        };
        let batch = rng.random_range(1..=3);
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..batch {
            let steps = rng.random_range(1..=t);
            clips.push(
                (0..steps)
                    .map(|_| (0..dims.features).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            );
            labels.push(match variant {
                LossVariant::CrossEntropy => LabelSpec::Single(rng.random_range(0..dims.categories)),
                LossVariant::BinaryCrossEntropy => {
                    LabelSpec::multi((0..dims.categories).filter(|_| rng.random_bool(0.5)).chain([0]))
                        .unwrap()
                }
            });
        }
        let beta = 10f64.powf(rng.random_range(-2.0..0.0));
        Instance { model, clips, labels, variant, beta }
    }

    pub fn batch(&self) -> Vec<Sample<'_>> {
        self.clips
            .iter()
            .zip(&self.labels)
            .map(|(c, l)| Sample { clips: c, label: l })
            .collect()
    }
}

/// `beta * exp(t / 2)` evaluated in double-double arithmetic (about 30
/// significant digits) from the Taylor series, then rounded to `f64`.
pub fn epsilon_high_precision(beta: f64, t: usize) -> f64 {
    type Dd = (f64, f64);
    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }
    fn norm(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        (s, lo - (s - hi))
    }
    fn add(x: Dd, y: Dd) -> Dd {
        let (s, e) = two_sum(x.0, y.0);
        norm(s, e + x.1 + y.1)
    }
    fn mul(x: Dd, y: Dd) -> Dd {
        let p = x.0 * y.0;
        let e = x.0.mul_add(y.0, -p);
        norm(p, e + x.0 * y.1 + x.1 * y.0)
    }
    fn div(x: Dd, n: f64) -> Dd {
        let q1 = x.0 / n;
        let p = q1 * n;
        let pe = q1.mul_add(n, -p);
        let r = add(x, (-p, -pe));
        norm(q1, r.0 / n)
    }
    let x: Dd = (t as f64 / 2.0, 0.0);
    let mut term: Dd = (1.0, 0.0);
    let mut sum: Dd = (1.0, 0.0);
    for k in 1..400 {
        term = div(mul(term, x), k as f64);
        sum = add(sum, term);
        if term.0.abs() < sum.0.abs() * 1e-34 {
            break;
        }
    }
    let r = mul((beta, 0.0), sum);
    r.0 + r.1
}
