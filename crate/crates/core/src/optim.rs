//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::new(1e-3, 1e-2)
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update of `param` in place. `step` is the 1-based step count
/// used for bias correction.
///
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`
pub fn adamw_step(param: &mut [f64], grad: &[f64], moments: &mut Moments, step: u64, cfg: &AdamWConfig) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!("length mismatch: param {}, grad {}", param.len(), grad.len()),
        ));
    }
    if step == 0 {
        return Err(Error::invalid("adamw_step", "step count starts at 1"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient passed to AdamW".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for ((p, &g), (m, v)) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + cfg.lr * cfg.weight_decay * *p;
    }
    Ok(())
}

/// Optimizer state for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        AdamW {
            config,
            step: 0,
            moments: params.iter().map(|t| Moments::zeros(t.numel())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Applies one step. Parameters whose gradient is `None` are left
    /// untouched, weight decay included. Non-finite gradients abort the
    /// step before any parameter changes.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::invalid(
                "AdamW::step",
                format!(
                    "optimizer tracks {} tensors, got {} params and {} grads",
                    self.moments.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to AdamW".into()));
        }
        self.step += 1;
        for ((p, g), mo) in params.into_iter().zip(grads).zip(&mut self.moments) {
            if let Some(g) = g {
                adamw_step(p.data_mut(), g, mo, self.step, &self.config)?;
            }
        }
        Ok(())
    }
}
