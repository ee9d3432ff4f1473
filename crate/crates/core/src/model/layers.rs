use rand::Rng;

use crate::error::{Error, Result};

/// Dense layer `y = W x + b` with `W` stored row-major (`out_dim x in_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    in_dim: usize,
    out_dim: usize,
    pub(crate) weight: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineLayer {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (in + out))`; zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        AffineLayer {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-a..=a))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::InvalidArgument(format!(
                "affine layer {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(AffineLayer {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Multiply-adds counted as two operations each.
    pub fn flops(&self) -> f64 {
        2.0 * self.in_dim as f64 * self.out_dim as f64
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.forward_into(x, &mut y);
        y
    }

    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for ((yo, row), b) in y
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim))
            .zip(&self.bias)
        {
            *yo = b + dot(row, x);
        }
    }

    /// Accumulates `dL/dW` and `dL/db` into `grad` given the layer input `x`
    /// and upstream gradient `dy`; writes `dL/dx` into `dx` when requested.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut AffineLayer, dx: Option<&mut [f64]>) {
        debug_assert_eq!(dy.len(), self.out_dim);
        for ((g_row, gb), &d) in grad
            .weight
            .chunks_exact_mut(self.in_dim)
            .zip(grad.bias.iter_mut())
            .zip(dy)
        {
            if d == 0.0 {
                continue;
            }
            *gb += d;
            for (g, &xi) in g_row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (row, &d) in self.weight.chunks_exact(self.in_dim).zip(dy) {
                if d == 0.0 {
                    continue;
                }
                for (v, &w) in dx.iter_mut().zip(row) {
                    *v += d * w;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
