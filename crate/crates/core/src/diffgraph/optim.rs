use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::network::ParameterSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Range(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Range(format!(
                "weight decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Range(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Nesterov-momentum SGD state.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: ParameterSet<T>,
    pub config: SgdConfig,
    pub total_steps: usize,
    pub step: usize,
    /// Tensors left untouched by updates.
    pub frozen: BTreeSet<String>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, config: SgdConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            velocity: params.zeros_like(),
            config,
            total_steps,
            step: 0,
            frozen: BTreeSet::new(),
        })
    }

    /// Learning rate for the current step under the cosine schedule.
    pub fn scheduled_lr(&self) -> Result<f64> {
        cosine_lr(
            self.step.min(self.total_steps),
            self.total_steps.max(1),
            self.config.learning_rate,
        )
    }
}

/// One Nesterov step with coupled L2 decay:
/// `g += decay·p; v = μv − lr·g; p += μv − lr·g`.
pub fn sgd_update<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Range(format!("learning rate {lr} must be >= 0")));
    }
    params.check_same_shapes(grads)?;
    params.check_same_shapes(&state.velocity)?;
    let mu = T::of(state.config.momentum);
    let decay = T::of(state.config.weight_decay);
    let lr = T::of(lr);
    for ((name, p), ((_, g), (_, v))) in params
        .iter_mut()
        .zip(grads.iter().zip(state.velocity.iter_mut()))
    {
        if state.frozen.contains(name) {
            continue;
        }
        nesterov_step(p, g, v, mu, decay, lr);
    }
    state.step += 1;
    Ok(())
}

fn nesterov_step<T: Scalar>(p: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, mu: T, decay: T, lr: T) {
    for ((p, &g), v) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(v.data_mut().iter_mut())
    {
        let g = g + decay * *p;
        *v = mu * *v - lr * g;
        *p = *p + mu * *v - lr * g;
    }
}

/// `base·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Range("cosine schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::Range(format!("step {step} beyond total {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
