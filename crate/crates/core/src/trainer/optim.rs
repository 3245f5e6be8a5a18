use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn peak_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0
            }
            OptimizerConfig::Sgd { lr } => lr >= 0.0,
        };
        if ok && self.peak_lr().is_finite() {
            Ok(())
        } else {
            Err(format!("invalid optimizer settings {:?}", self))
        }
    }
}

/// Adam moments of one parameter tensor. Each tensor counts its own steps,
/// so blocks that are off-path for a while keep correct bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T> {
    pub m: Array<T>,
    pub v: Array<T>,
    pub step: u64,
}

/// Stateful optimizer keyed by global parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    lr: f64,
    state: BTreeMap<String, MomentState<T>>,
}

/// Biases and LayerNorm parameters are exempt from weight decay.
fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g"))
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        let lr = config.peak_lr();
        Self { config, lr, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn state(&self) -> &BTreeMap<String, MomentState<T>> {
        &self.state
    }

    pub fn restore_state(&mut self, state: BTreeMap<String, MomentState<T>>) {
        self.state = state;
    }

    /// One step on `param` given `grad`.
    pub fn update(&mut self, name: &str, param: &mut Array<T>, grad: &Array<T>) {
        debug_assert_eq!(param.shape(), grad.shape(), "{}", name);
        match self.config {
            OptimizerConfig::Sgd { .. } => {
                let lr = T::cast(self.lr);
                for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay, .. } => {
                let st = self.state.entry(name.to_string()).or_insert_with(|| MomentState {
                    m: Array::zeros(param.shape()),
                    v: Array::zeros(param.shape()),
                    step: 0,
                });
                st.step += 1;
                let t = st.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::cast(beta1), T::cast(beta2));
                let (one, lr, eps) = (T::one(), T::cast(self.lr), T::cast(eps));
                let (c1, c2) = (T::cast(c1), T::cast(c2));
                let decay = if decays(name) { T::cast(self.lr * weight_decay) } else { T::zero() };
                let (m, v) = (st.m.data_mut(), st.v.data_mut());
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    *p -= decay * *p + lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_at(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}
