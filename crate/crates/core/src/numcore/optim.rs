use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters of Adam and the inverse-square-root warmup schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    /// Multiplier applied on top of the schedule. 1.0 is the plain schedule.
    pub lr_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 4000,
            lr_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub d_model: usize,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero moments mirroring `params`.
    pub fn new<'a>(config: AdamConfig, d_model: usize, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        OptimizerState {
            config,
            d_model,
            step: 0,
            m,
            v,
        }
    }
}

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`, scaled by `lr_factor`.
pub fn lr_at_step(step: u64, d_model: usize, warmup_steps: u64, lr_factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("learning rate is undefined at step 0".into()));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(Error::InvalidArgument("warmup_steps and d_model must be positive".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(lr_factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

impl OptimizerState {
    /// Learning rate for the update that takes the state to `step + 1`.
    pub fn next_lr(&self) -> Result<f64> {
        lr_at_step(self.step + 1, self.d_model, self.config.warmup_steps, self.config.lr_factor)
    }
}

/// One bias-corrected Adam update. `grads[i]` pairs with `params[i]`.
/// Returns the learning rate used.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {} values, {} grads, {} moments", p.len(), g.len(), state.m[i].len()),
            ));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at element {j}")));
        }
    }
    let lr = state.next_lr()?;
    state.step += 1;
    let AdamConfig { beta1, beta2, epsilon, .. } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(lr)
}
