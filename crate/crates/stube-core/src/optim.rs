//! Adaptive-moment gradient descent and global gradient clipping.
//!
//! The optimizer owns per-parameter moment buffers keyed by slot order, so
//! callers must present the same parameters in the same order every step.
//! Both training loops (adapter fine-tuning and the skip-predictor MLP)
//! share this implementation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
    #[error("expected {expected} parameter slots, got {got}")]
    SlotCount { expected: usize, got: usize },
    #[error("slot {slot} changed size from {expected} to {got}")]
    SlotSize { slot: usize, expected: usize, got: usize },
    #[error("non-finite gradient in slot {slot}")]
    NonFiniteGrad { slot: usize },
    #[error("gradient length {grad} does not match parameter length {param}")]
    GradLength { param: usize, grad: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(OptimError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::BadConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(OptimError::BadConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// One parameter slice paired with its gradient for a single step.
pub struct ParamGrad<'a> {
    pub data: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Adam with standard bias correction. Moment buffers are allocated on the
/// first step and locked to that slot layout afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, slots: &mut [ParamGrad<'_>]) -> Result<(), OptimError> {
        if self.t == 0 {
            self.m = slots.iter().map(|s| vec![0.0; s.data.len()]).collect();
            self.v = self.m.clone();
        } else if slots.len() != self.m.len() {
            return Err(OptimError::SlotCount { expected: self.m.len(), got: slots.len() });
        }
        for (i, s) in slots.iter().enumerate() {
            if s.grad.len() != s.data.len() {
                return Err(OptimError::GradLength { param: s.data.len(), grad: s.grad.len() });
            }
            if s.data.len() != self.m[i].len() {
                return Err(OptimError::SlotSize {
                    slot: i,
                    expected: self.m[i].len(),
                    got: s.data.len(),
                });
            }
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGrad { slot: i });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, s) in slots.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..s.data.len() {
                let g = s.grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                s.data[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Joint L2 norm over all gradient buffers.
pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by max_norm/norm when the joint norm exceeds
/// max_norm; returns the pre-clip norm either way.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
