use super::params::ModelParams;
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f32) -> Self {
        let n = params.n_params();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update with `grads` laid out like `params`.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if params.n_params() != self.m.len() || !params.same_layout(grads) {
            return Err(Error::Shape("adam state, params and grads disagree".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut off = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            off += p.len();
        }
        Ok(())
    }
}
