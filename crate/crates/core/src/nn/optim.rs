//! SGD with momentum and coupled weight decay, plus the milestone step
//! schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![150, 225],
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::config(
                "decay_factor",
                format!("must be positive, got {}", self.decay_factor),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "milestones",
                format!("must be strictly increasing, got {:?}", self.milestones),
            ));
        }
        Ok(())
    }

    /// `lr * decay_factor^(number of milestones <= epoch)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Velocity<T> {
    buffers: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Velocity<T> {
    pub fn new() -> Self {
        Velocity {
            buffers: IndexMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, buf: Vec<T>) {
        self.buffers.insert(name.into(), buf);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

/// One SGD update at `cfg.lr`.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, cfg: &SgdConfig, velocity: &mut Velocity<T>) -> Result<()> {
    sgd_step_with_lr(params, cfg, cfg.lr, velocity)
}

/// One SGD update of every trainable tensor:
/// `v <- momentum * v + (grad + weight_decay * p)`, `p <- p - lr * v`.
/// Gradients are left in place for the caller to clear.
pub fn sgd_step_with_lr<T: Scalar>(
    params: &mut ParamStore<T>,
    cfg: &SgdConfig,
    lr: f64,
    velocity: &mut Velocity<T>,
) -> Result<()> {
    for (name, _) in params.iter().filter(|(_, t)| t.requires_grad()) {
        if params.get(name)?.grad().is_none() {
            return Err(Error::MissingGrad(name.to_string()));
        }
    }
    let (mu, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad().expect("checked above").to_vec();
        let v = velocity
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = mu * *vi + (*gi + wd * *w);
            *w -= lr * *vi;
        }
    }
    Ok(())
}
