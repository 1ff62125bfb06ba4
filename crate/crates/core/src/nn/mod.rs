//! Layers, parameter storage and the optimizer.

mod optim;
mod params;

pub use optim::{sgd_step, sgd_step_with_lr, SgdConfig, Velocity};
pub use params::{fan_in_uniform, Bound, ParamStore};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NormStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine classifier head: `logits = f * weights + bias`.
pub fn linear_head<T: Scalar>(tape: &mut Tape<T>, f: Var, weights: Var, bias: Var) -> Result<Var> {
    let (sw, sb) = (tape.shape(weights), tape.shape(bias));
    if sw.len() != 2 || sb != [sw[1]] {
        return Err(Error::shape("linear_head", sw, sb));
    }
    let z = tape.matmul(f, weights)?;
    tape.add(z, bias)
}

/// Batch normalization over the channel axis with learnable scale and shift
/// and running statistics, all kept in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
    pub eps: f64,
    /// Weight of the newest batch in the running estimates.
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Registers scale 1, shift 0, running mean 0 and running var 1.
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = [self.channels];
        store.insert(self.name("scale"), Tensor::ones(&c).with_requires_grad(true))?;
        store.insert(self.name("shift"), Tensor::zeros(&c).with_requires_grad(true))?;
        store.insert(self.name("running_mean"), Tensor::zeros(&c))?;
        store.insert(self.name("running_var"), Tensor::ones(&c))?;
        Ok(())
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses only the running
    /// estimates.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &Bound,
        store: &mut ParamStore<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::shape("batchnorm_forward", shape, &[self.channels]));
        }
        let gamma = bound.var(&self.name("scale"))?;
        let beta = bound.var(&self.name("shift"))?;
        let eps = T::of(self.eps);
        match mode {
            Mode::Train => {
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, stats) = tape.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
                let (mean, var) = stats.expect("batch statistics requested");
                let m = T::of(self.momentum);
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = store.get_mut(&self.name("running_mean"))?;
                for (r, v) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * *v;
                }
                let rv = store.get_mut(&self.name("running_var"))?;
                for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * *v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(&self.name("running_mean"))?.data().to_vec();
                let rv = store.get(&self.name("running_var"))?.data().to_vec();
                let (y, _) = tape.batch_norm(x, gamma, beta, NormStats::Running(&rm, &rv), eps)?;
                Ok(y)
            }
        }
    }
}
