use crate::model::{BlockGroup, CascadeModel};

/// Adaptive-moment optimizer over the cascade's parameter blocks.
///
/// A block whose gradient is exactly zero is skipped entirely: neither its
/// moments nor its parameters change, and its step counter does not advance.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<i32>,
}

impl Adam {
    pub fn new(model: &CascadeModel) -> Self {
        let shapes: Vec<usize> = model.blocks().iter().map(|(_, b)| b.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    /// One update with learning rate `lr`, restricted to `group` if given.
    pub fn step(
        &mut self,
        model: &mut CascadeModel,
        grads: &CascadeModel,
        lr: f64,
        group: Option<BlockGroup>,
    ) {
        let grad_blocks = grads.blocks();
        for (k, (id, params)) in model.blocks_mut().into_iter().enumerate() {
            if group.is_some_and(|g| g != id.group()) {
                continue;
            }
            let g = grad_blocks[k].1;
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.steps[k] += 1;
            let t = self.steps[k];
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
