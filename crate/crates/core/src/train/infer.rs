//! Single, aggregated and self-distillation inference from joint logits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::JointLogits;
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_sum_exp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferMode {
    Si,
    Ag,
    Sd,
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferMode::Si => "si",
            InferMode::Ag => "ag",
            InferMode::Sd => "sd",
        })
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "si" => Ok(InferMode::Si),
            "ag" => Ok(InferMode::Ag),
            "sd" => Ok(InferMode::Sd),
            other => Err(Error::InvalidArgument(format!("unknown inference mode `{other}`"))),
        }
    }
}

/// How the aggregated inference combines heads and versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Combine {
    /// Per head: softmax of the version-averaged conditional logits; then the
    /// mean of the two heads' distributions.
    #[default]
    ProbMean,
    /// One softmax over conditional logits averaged across heads and versions.
    LogitMean,
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "prob_mean" => Ok(Combine::ProbMean),
            "logit_mean" => Ok(Combine::LogitMean),
            other => Err(Error::InvalidArgument(format!("unknown combine mode `{other}`"))),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::ProbMean => "prob_mean",
            Combine::LogitMean => "logit_mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult<T> {
    /// `B x N` class distribution.
    pub probs: Tensor<T>,
    pub predicted: Vec<usize>,
    pub mode: InferMode,
}

impl<T: Scalar> InferenceResult<T> {
    fn from_probs(probs: Tensor<T>, mode: InferMode) -> Self {
        let predicted = probs.argmax_rows();
        InferenceResult {
            probs,
            predicted,
            mode,
        }
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predicted
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| (v - lse).exp()).collect()
}

/// Row-wise softmax of a `B x K` tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.row_width();
    let mut data = Vec::with_capacity(logits.numel());
    for r in 0..logits.shape()[0] {
        data.extend(softmax_row(&logits.data()[r * k..(r + 1) * k]));
    }
    Tensor::new(logits.shape(), data).expect("same shape")
}

fn check_joint(l: &JointLogits<impl Scalar>, head: &Tensor<impl Scalar>) -> Result<()> {
    let (b, v) = (l.batch(), l.t + 1);
    let expect = [b * v, l.num_classes * v];
    if head.shape() != expect {
        return Err(Error::shape("joint logits", head.shape(), &expect));
    }
    Ok(())
}

/// Conditional logit of class `y` under version `j` for sample `b`: row
/// `b * (T + 1) + j`, column `y * (T + 1) + j`.
fn conditional<T: Scalar>(head: &Tensor<T>, t: usize, b: usize, y: usize, j: usize) -> T {
    let v = t + 1;
    head.row(b * v + j)[y * v + j]
}

/// Softmax over the `j = 0` conditional logits of the last joint head.
pub fn infer_si<T: Scalar>(l: &JointLogits<T>) -> Result<InferenceResult<T>> {
    check_joint(l, &l.logits_m)?;
    let (b, n) = (l.batch(), l.num_classes);
    let mut probs = Vec::with_capacity(b * n);
    for s in 0..b {
        let row: Vec<T> = (0..n).map(|y| conditional(&l.logits_m, l.t, s, y, 0)).collect();
        probs.extend(softmax_row(&row));
    }
    Ok(InferenceResult::from_probs(Tensor::new(&[b, n], probs)?, InferMode::Si))
}

/// Aggregated inference over both joint heads.
pub fn infer_ag<T: Scalar>(l: &JointLogits<T>, combine: Combine) -> Result<InferenceResult<T>> {
    infer_ag_heads(l, combine, true)
}

/// Aggregated inference; with `include_penultimate == false` only the last
/// joint head contributes (used when that head carries no training weight).
pub fn infer_ag_heads<T: Scalar>(
    l: &JointLogits<T>,
    combine: Combine,
    include_penultimate: bool,
) -> Result<InferenceResult<T>> {
    check_joint(l, &l.logits_m)?;
    check_joint(l, &l.logits_m1)?;
    let (b, n, v) = (l.batch(), l.num_classes, l.t + 1);
    let heads: Vec<&Tensor<T>> = if include_penultimate {
        vec![&l.logits_m, &l.logits_m1]
    } else {
        vec![&l.logits_m]
    };
    let mut probs = Vec::with_capacity(b * n);
    for s in 0..b {
        match combine {
            Combine::ProbMean => {
                let mut acc = vec![T::zero(); n];
                for head in &heads {
                    let scores: Vec<T> = (0..n)
                        .map(|y| {
                            (0..v).map(|j| conditional(head, l.t, s, y, j)).sum::<T>() / T::of(v as f64)
                        })
                        .collect();
                    for (a, p) in acc.iter_mut().zip(softmax_row(&scores)) {
                        *a += p;
                    }
                }
                let k = T::of(heads.len() as f64);
                probs.extend(acc.into_iter().map(|a| a / k));
            }
            Combine::LogitMean => {
                let denom = T::of((v * heads.len()) as f64);
                let scores: Vec<T> = (0..n)
                    .map(|y| {
                        let mut s_y = T::zero();
                        for j in 0..v {
                            for head in &heads {
                                s_y += conditional(head, l.t, s, y, j);
                            }
                        }
                        s_y / denom
                    })
                    .collect();
                probs.extend(softmax_row(&scores));
            }
        }
    }
    Ok(InferenceResult::from_probs(Tensor::new(&[b, n], probs)?, InferMode::Ag))
}

/// Softmax of the self-distillation head.
pub fn infer_sd<T: Scalar>(l: &JointLogits<T>) -> Result<InferenceResult<T>> {
    let s = l.logits_sd.shape();
    if s.len() != 2 || s[1] != l.num_classes {
        return Err(Error::shape("infer_sd", s, &[l.num_classes]));
    }
    Ok(InferenceResult::from_probs(softmax_rows(&l.logits_sd), InferMode::Sd))
}

/// Predicted class for each row of plain `B x N` logits.
pub fn predict_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.row_width();
    logits.data().chunks(k.max(1)).map(argmax).collect()
}
