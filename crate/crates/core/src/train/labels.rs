use crate::error::{Error, Result};

/// A class paired with the index of the mask applied to its feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JointLabel {
    pub y: usize,
    pub j: usize,
}

impl JointLabel {
    pub fn new(y: usize, j: usize, num_classes: usize, t: usize) -> Result<Self> {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        if j > t {
            return Err(Error::InvalidArgument(format!("mask index {j} exceeds T = {t}")));
        }
        Ok(JointLabel { y, j })
    }

    /// `y * (T + 1) + j`.
    pub fn flat(&self, t: usize) -> usize {
        self.y * (t + 1) + self.j
    }

    pub fn from_flat(flat: usize, t: usize) -> Self {
        JointLabel {
            y: flat / (t + 1),
            j: flat % (t + 1),
        }
    }
}

/// Expands each class label into its `T + 1` joint labels, grouped per
/// sample: entry `b * (T + 1) + j` is `y_b * (T + 1) + j`.
pub fn expand_labels(y: &[usize], num_classes: usize, t: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(y.len() * (t + 1));
    for &label in y {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        out.extend((0..=t).map(|j| label * (t + 1) + j));
    }
    Ok(out)
}
