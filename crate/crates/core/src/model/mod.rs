//! Classifier heads, exit gates and the cascade that holds them.
//!
//! The cascade keeps one shared `D -> H` projection (followed by ReLU) and
//! `T` independent `H -> C` output layers, so classifier `t` computes
//! `head_t(relu(projection(z_t)))`. Each of the `T` gates owns a two-layer
//! ReLU stream `D -> 64 -> 64` that is applied, with the same weights, to both
//! `z_{t-1}` and `z_t`; the two 64-vectors are concatenated and merged by a
//! `128 -> 1` layer and a sigmoid. Gate 1 has no previous representation, so
//! the previous-stream half of its merge input is zero.

mod grad;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grad::{gradients, total_loss, BatchLoss, LossSpec, Objective, Sample};
pub use layers::{argmax, sigmoid, softmax, AffineLayer};

pub(crate) use layers::{relu_in_place, softplus};

use crate::aggregator::PoolingKind;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Width of both gate stream layers.
pub const GATE_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    /// Frame feature width `D`.
    pub features: usize,
    /// Shared projection width `H`.
    pub hidden: usize,
    /// Number of categories `C`.
    pub categories: usize,
}

/// How the clip representation fed to classifier `t` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClipMode {
    /// Accumulated feature pooling over the first `t` sampled frames.
    #[default]
    Pooled,
    /// Only the `t`-th sampled frame; predictions are averaged over time
    /// instead.
    PerFrame,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::Pooled => "pooled",
            ClipMode::PerFrame => "per-frame",
        })
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(ClipMode::Pooled),
            "per-frame" => Ok(ClipMode::PerFrame),
            _ => Err(Error::InvalidArgument(format!("unknown clip mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    pub stream_in: AffineLayer,
    pub stream_out: AffineLayer,
    pub merge: AffineLayer,
}

/// Activations of one gate stream, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct StreamActs {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl GateNet {
    fn glorot(features: usize, rng: &mut ChaCha8Rng) -> Self {
        GateNet {
            stream_in: AffineLayer::glorot(features, GATE_WIDTH, rng),
            stream_out: AffineLayer::glorot(GATE_WIDTH, GATE_WIDTH, rng),
            merge: AffineLayer::glorot(2 * GATE_WIDTH, 1, rng),
        }
    }

    fn zeros(features: usize) -> Self {
        GateNet {
            stream_in: AffineLayer::zeros(features, GATE_WIDTH),
            stream_out: AffineLayer::zeros(GATE_WIDTH, GATE_WIDTH),
            merge: AffineLayer::zeros(2 * GATE_WIDTH, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.stream_in.param_count() + self.stream_out.param_count() + self.merge.param_count()
    }

    /// FLOPs of one stream pass.
    pub fn stream_flops(&self) -> f64 {
        self.stream_in.flops() + self.stream_out.flops()
    }

    /// FLOPs of gate `t`: one stream for `t = 1`, two afterwards, plus merge.
    pub fn flops(&self, t: usize) -> f64 {
        let streams = if t == 1 { 1.0 } else { 2.0 };
        streams * self.stream_flops() + self.merge.flops()
    }

    pub(crate) fn stream(&self, z: &[f64]) -> StreamActs {
        let mut hidden = self.stream_in.forward(z);
        relu_in_place(&mut hidden);
        let mut out = self.stream_out.forward(&hidden);
        relu_in_place(&mut out);
        StreamActs { hidden, out }
    }

    /// Pre-sigmoid merge output. `prev` is `None` for the first gate.
    pub(crate) fn logit(&self, prev: Option<&[f64]>, cur: &[f64]) -> f64 {
        let w = self.merge.weight();
        let mut s = self.merge.bias()[0] + layers::dot(&w[GATE_WIDTH..], cur);
        if let Some(prev) = prev {
            s += layers::dot(&w[..GATE_WIDTH], prev);
        }
        s
    }

    /// Gate score in `(0, 1)` for timestep `t`.
    pub fn score(&self, t: usize, z_prev: Option<&[f64]>, z_cur: &[f64]) -> Result<f64> {
        let features = self.stream_in.in_dim();
        match (t, z_prev) {
            (0, _) => return Err(Error::InvalidArgument("timesteps start at 1".into())),
            (1, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "gate 1 takes no previous representation".into(),
                ))
            }
            (t, None) if t > 1 => {
                return Err(Error::InvalidArgument(format!(
                    "gate {t} needs the previous representation"
                )))
            }
            (_, Some(prev)) => {
                ensure_dim("gate input z_{t-1}", features, prev.len())?;
                ensure_finite(prev, || "gate input z_{t-1}".into())?;
            }
            _ => {}
        }
        ensure_dim("gate input z_t", features, z_cur.len())?;
        ensure_finite(z_cur, || "gate input z_t".into())?;
        let prev = z_prev.map(|p| self.stream(p).out);
        let cur = self.stream(z_cur).out;
        Ok(clamp_open_unit(sigmoid(self.logit(prev.as_deref(), &cur))))
    }
}

/// Keeps a probability strictly inside `(0, 1)` despite rounding.
pub(crate) fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Borrowed view of classifier `t`: the shared projection plus its own head.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHead<'a> {
    pub timestep: usize,
    pub projection: &'a AffineLayer,
    pub head: &'a AffineLayer,
}

impl ClassifierHead<'_> {
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("classifier input", self.projection.in_dim(), z.len())?;
        ensure_finite(z, || format!("input of classifier {}", self.timestep))?;
        Ok(self.logits(z))
    }

    pub(crate) fn hidden(&self, z: &[f64]) -> Vec<f64> {
        let mut h = self.projection.forward(z);
        relu_in_place(&mut h);
        h
    }

    pub(crate) fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.head.forward(&self.hidden(z))
    }

    pub fn flops(&self) -> f64 {
        self.projection.flops() + self.head.flops()
    }
}

/// Which part of the cascade a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockGroup {
    Classifier,
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockOwner {
    Projection,
    /// 0-based head index.
    Head(usize),
    /// 0-based gate index and layer name.
    Gate(usize, &'static str),
}

/// Names one weight or bias vector of the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockId {
    pub owner: BlockOwner,
    pub is_bias: bool,
}

impl BlockId {
    pub fn group(&self) -> BlockGroup {
        match self.owner {
            BlockOwner::Gate(..) => BlockGroup::Gate,
            _ => BlockGroup::Classifier,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = if self.is_bias { "bias" } else { "weight" };
        match self.owner {
            BlockOwner::Projection => write!(f, "projection.{part}"),
            BlockOwner::Head(i) => write!(f, "heads[{}].{part}", i + 1),
            BlockOwner::Gate(i, layer) => write!(f, "gates[{}].{layer}.{part}", i + 1),
        }
    }
}

/// `T` classifiers and `T` exit gates over `D`-wide clip representations.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    dims: ModelDims,
    pub pooling: PoolingKind,
    pub clip_mode: ClipMode,
    projection: AffineLayer,
    heads: Vec<AffineLayer>,
    gates: Vec<GateNet>,
}

impl CascadeModel {
    /// Fresh model with seeded Glorot-uniform weights and zero biases.
    pub fn new(
        dims: ModelDims,
        timesteps: usize,
        pooling: PoolingKind,
        clip_mode: ClipMode,
        seed: u64,
    ) -> Result<Self> {
        validate_shape(dims, timesteps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = AffineLayer::glorot(dims.features, dims.hidden, &mut rng);
        let heads = (0..timesteps)
            .map(|_| AffineLayer::glorot(dims.hidden, dims.categories, &mut rng))
            .collect();
        let gates = (0..timesteps)
            .map(|_| GateNet::glorot(dims.features, &mut rng))
            .collect();
        Ok(CascadeModel {
            dims,
            pooling,
            clip_mode,
            projection,
            heads,
            gates,
        })
    }

    /// All-zero model with the same shape (used for gradients and optimizer
    /// moments).
    pub fn zeros_like(&self) -> Self {
        CascadeModel {
            dims: self.dims,
            pooling: self.pooling,
            clip_mode: self.clip_mode,
            projection: AffineLayer::zeros(self.dims.features, self.dims.hidden),
            heads: (0..self.timesteps())
                .map(|_| AffineLayer::zeros(self.dims.hidden, self.dims.categories))
                .collect(),
            gates: (0..self.timesteps())
                .map(|_| GateNet::zeros(self.dims.features))
                .collect(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn timesteps(&self) -> usize {
        self.heads.len()
    }

    pub fn projection(&self) -> &AffineLayer {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut AffineLayer {
        &mut self.projection
    }

    pub fn head_mut(&mut self, t: usize) -> &mut AffineLayer {
        &mut self.heads[t - 1]
    }

    /// Classifier for 1-based timestep `t`.
    pub fn classifier(&self, t: usize) -> ClassifierHead<'_> {
        assert!(
            (1..=self.timesteps()).contains(&t),
            "classifier {t} outside 1..={}",
            self.timesteps()
        );
        ClassifierHead {
            timestep: t,
            projection: &self.projection,
            head: &self.heads[t - 1],
        }
    }

    /// Gate for 1-based timestep `t`.
    pub fn gate(&self, t: usize) -> &GateNet {
        &self.gates[t - 1]
    }

    pub fn gate_mut(&mut self, t: usize) -> &mut GateNet {
        &mut self.gates[t - 1]
    }

    pub fn classify(&self, t: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(t)?;
        self.classifier(t).classify(z)
    }

    pub fn gate_score(&self, t: usize, z_prev: Option<&[f64]>, z_cur: &[f64]) -> Result<f64> {
        self.check_timestep(t)?;
        self.gate(t).score(t, z_prev, z_cur)
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.timesteps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )))
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Parameter blocks in their canonical order: projection weight and
    /// bias, then each head's weight and bias, then for each gate the
    /// `stream_in`, `stream_out` and `merge` weights and biases.
    pub fn blocks(&self) -> Vec<(BlockId, &[f64])> {
        self.layer_list()
            .into_iter()
            .flat_map(|(owner, layer)| {
                [
                    (BlockId { owner, is_bias: false }, layer.weight.as_slice()),
                    (BlockId { owner, is_bias: true }, layer.bias.as_slice()),
                ]
            })
            .collect()
    }

    fn layer_list(&self) -> Vec<(BlockOwner, &AffineLayer)> {
        let mut v = vec![(BlockOwner::Projection, &self.projection)];
        v.extend(self.heads.iter().enumerate().map(|(i, h)| (BlockOwner::Head(i), h)));
        for (i, g) in self.gates.iter().enumerate() {
            v.push((BlockOwner::Gate(i, "stream_in"), &g.stream_in));
            v.push((BlockOwner::Gate(i, "stream_out"), &g.stream_out));
            v.push((BlockOwner::Gate(i, "merge"), &g.merge));
        }
        v
    }

    /// Mutable parameter blocks, same order as [`CascadeModel::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<(BlockId, &mut [f64])> {
        let mut layers: Vec<(BlockOwner, &mut AffineLayer)> =
            vec![(BlockOwner::Projection, &mut self.projection)];
        layers.extend(
            self.heads
                .iter_mut()
                .enumerate()
                .map(|(i, h)| (BlockOwner::Head(i), h)),
        );
        for (i, g) in self.gates.iter_mut().enumerate() {
            layers.push((BlockOwner::Gate(i, "stream_in"), &mut g.stream_in));
            layers.push((BlockOwner::Gate(i, "stream_out"), &mut g.stream_out));
            layers.push((BlockOwner::Gate(i, "merge"), &mut g.merge));
        }
        let mut out = Vec::with_capacity(layers.len() * 2);
        for (owner, layer) in layers {
            out.push((BlockId { owner, is_bias: false }, layer.weight.as_mut_slice()));
            out.push((BlockId { owner, is_bias: true }, layer.bias.as_mut_slice()));
        }
        out
    }

    /// All parameters concatenated in canonical block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    /// Overwrites all parameters from a canonical-order flat vector.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector".into(),
                expected,
                actual: values.len(),
            });
        }
        let mut rest = values;
        for (_, block) in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Fails naming the first block that holds a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (id, block) in self.blocks() {
            ensure_finite(block, || id.to_string())?;
        }
        Ok(())
    }
}

fn validate_shape(dims: ModelDims, timesteps: usize) -> Result<()> {
    if dims.features == 0 || dims.hidden == 0 || dims.categories == 0 {
        return Err(Error::InvalidArgument(format!("model dims must be positive: {dims:?}")));
    }
    if timesteps == 0 {
        return Err(Error::InvalidArgument("a cascade needs at least one timestep".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            features: 6,
            hidden: 5,
            categories: 3,
        }
    }

    fn model() -> CascadeModel {
        CascadeModel::new(dims(), 3, PoolingKind::Max, ClipMode::Pooled, 11).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = model().zeros_like();
        let logits = m.classify(1, &[0.3; 6]).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        for p in softmax(&logits) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_projection_selects_scaled_logit() {
        let mut m = CascadeModel::new(
            ModelDims { features: 3, hidden: 3, categories: 3 },
            1,
            PoolingKind::Max,
            ClipMode::Pooled,
            0,
        )
        .unwrap()
        .zeros_like();
        let p = m.projection_mut();
        for i in 0..3 {
            p.weight_mut()[i * 3 + i] = 1.0;
        }
        let s = 4.5;
        m.head_mut(1).weight_mut()[3 + 1] = s;
        assert_eq!(m.classify(1, &[0.0, 1.0, 0.0]).unwrap(), vec![0.0, s, 0.0]);
    }

    #[test]
    fn gate_bias_controls_score() {
        let mut m = model().zeros_like();
        assert_eq!(m.gate_score(2, Some(&[1.0; 6]), &[-3.0; 6]).unwrap(), 0.5);
        m.gate_mut(1).merge.bias_mut()[0] = 20.0;
        let s = m.gate_score(1, None, &[5.0; 6]).unwrap();
        assert!((s - 1.0).abs() < 1e-8 && s < 1.0);
        m.gate_mut(1).merge.bias_mut()[0] = 1e4;
        let s = m.gate_score(1, None, &[5.0; 6]).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn gate_input_presence_is_checked() {
        let m = model();
        assert!(m.gate_score(1, Some(&[0.0; 6]), &[0.0; 6]).is_err());
        assert!(m.gate_score(2, None, &[0.0; 6]).is_err());
        assert!(m.gate_score(4, Some(&[0.0; 6]), &[0.0; 6]).is_err());
        assert!(matches!(
            m.gate_score(2, Some(&[0.0; 5]), &[0.0; 6]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(m.classify(1, &[0.0; 4]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gate_parameter_count_matches_layout() {
        let m = model();
        let d = dims().features;
        assert_eq!(
            m.gate(1).param_count(),
            (d * 64 + 64) + (64 * 64 + 64) + (128 + 1)
        );
    }

    #[test]
    fn flat_round_trip_and_block_names() {
        let m = model();
        let mut z = m.zeros_like();
        z.load_flat(&m.to_flat()).unwrap();
        assert_eq!(z, m);
        let names: Vec<String> = m.blocks().iter().map(|(id, _)| id.to_string()).collect();
        assert_eq!(names[0], "projection.weight");
        assert_eq!(names[3], "heads[1].bias");
        assert!(names.contains(&"gates[3].merge.bias".to_string()));
        assert!(z.load_flat(&[0.0]).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(model(), model());
        let other = CascadeModel::new(dims(), 3, PoolingKind::Max, ClipMode::Pooled, 12).unwrap();
        assert_ne!(model(), other);
        let m = model();
        assert!(m.projection().bias().iter().all(|&b| b == 0.0));
        let a = (6.0f64 / 11.0).sqrt();
        assert!(m.projection().weight().iter().all(|w| w.abs() <= a));
    }
}
