//! Classification, joint and self-distillation objectives.

use crate::error::{Error, Result};
use crate::model::ForwardOutputs;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::labels::expand_labels;

/// Probabilities below this are clamped before taking logarithms.
pub const KL_EPS: f64 = 1e-12;

/// Scalar values of each loss term. `m1` is the weighted contribution
/// `beta * L_{m-1}`, so `total = m + m1 + sd_ce + sd_kl`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub m: f64,
    pub m1: f64,
    pub sd_ce: Option<f64>,
    pub sd_kl: Option<f64>,
}

/// Mean softmax cross-entropy of `logits` (`B x K`) against class indices.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// `CE(logits_m, y~) + beta * CE(logits_m1, y~)` over the stacked batch of
/// all `T + 1` versions, which equals the per-version average of each head's
/// loss.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs<T>,
    y: &[usize],
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    if y.len() != out.batch {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {}",
            y.len(),
            out.batch
        )));
    }
    let joint = expand_labels(y, out.num_classes, out.t)?;
    let l_m = tape.cross_entropy(out.logits_m, &joint)?;
    let l_m1 = tape.cross_entropy(out.logits_m1, &joint)?;
    let weighted = tape.scale(l_m1, T::of(beta));
    let total = tape.add(l_m, weighted)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total).to_f64_lossy(),
        m: tape.scalar_value(l_m).to_f64_lossy(),
        m1: tape.scalar_value(weighted).to_f64_lossy(),
        sd_ce: None,
        sd_kl: None,
    };
    Ok((total, breakdown))
}

/// Mean over rows of `sum p * ln(p / q)` with `0 * ln 0 = 0` and `q` clamped
/// below by [`KL_EPS`].
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    if p.data().iter().chain(q.data()).any(|v| *v < T::zero() || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "kl_divergence needs non-negative finite probabilities".into(),
        ));
    }
    let rows = p.shape()[0];
    let eps = T::of(KL_EPS);
    let mut total = T::zero();
    for (&pi, &qi) in p.data().iter().zip(q.data()) {
        if pi > T::zero() {
            total += pi * (pi.ln() - qi.max(eps).ln());
        }
    }
    Ok(total / T::of(rows.max(1) as f64))
}

/// Joint loss plus the self-distillation head's `CE(logits_sd, y)` and
/// `KL(p_ag || softmax(logits_sd))`. `p_ag` is a detached constant.
pub fn sd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs<T>,
    y: &[usize],
    beta: f64,
    p_ag: &Tensor<T>,
) -> Result<(Var, LossBreakdown)> {
    let (joint, mut breakdown) = joint_loss(tape, out, y, beta)?;
    if p_ag.data().iter().any(|v| *v < T::zero()) {
        return Err(Error::InvalidArgument("teacher distribution has negative entries".into()));
    }
    let ce = tape.cross_entropy(out.logits_sd, y)?;
    let kl = tape.kl_to_logits(p_ag, out.logits_sd, T::of(KL_EPS))?;
    let partial = tape.add(joint, ce)?;
    let total = tape.add(partial, kl)?;
    breakdown.sd_ce = Some(tape.scalar_value(ce).to_f64_lossy());
    breakdown.sd_kl = Some(tape.scalar_value(kl).to_f64_lossy());
    breakdown.total = tape.scalar_value(total).to_f64_lossy();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!((tape.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_margin_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!(tape.scalar_value(l) < 1e-6);
        assert!(cross_entropy(&mut tape, z, &[3]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let p = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let q = Tensor::<f64>::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let neg = Tensor::<f64>::new(&[1, 2], vec![1.5, -0.5]).unwrap();
        assert!(kl_divergence(&neg, &q).is_err());
    }
}
