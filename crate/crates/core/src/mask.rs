//! Quadrant masks and the feature transformation block.
//!
//! Mask `M_0` keeps the whole feature map; masks `M_1..M_4` each zero one
//! quadrant (upper-left, upper-right, lower-left, lower-right). With
//! `r = size / 2` (integer division) the four dropped regions tile the map
//! exactly, also for odd sizes where the quadrants have unequal areas.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Number of dropping masks in the quadrant scheme.
pub const QUADRANT_MASKS: usize = 4;

/// Half-open index bounds of a dropped region: rows `up..down`, columns
/// `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub left: usize,
    pub right: usize,
    pub up: usize,
    pub down: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.up..self.down).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.down - self.up) * (self.right - self.left)
    }
}

/// The `T + 1` binary masks for one feature-map geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet<T> {
    channels: usize,
    size: usize,
    radius: usize,
    masks: Vec<Tensor<T>>,
    boxes: Vec<BoundingBox>,
}

impl<T: Scalar> MaskSet<T> {
    /// Builds `M_0..M_T` of shape `channels x size x size`. Only `t == 4` is
    /// defined.
    pub fn new(channels: usize, size: usize, t: usize) -> Result<Self> {
        if t != QUADRANT_MASKS {
            return Err(Error::UnsupportedMaskScheme(t));
        }
        if channels == 0 || size == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask geometry needs channels >= 1 and size >= 1, got {channels} x {size}"
            )));
        }
        let r = size / 2;
        let boxes = vec![
            BoundingBox { left: 0, right: r, up: 0, down: r },
            BoundingBox { left: r, right: size, up: 0, down: r },
            BoundingBox { left: 0, right: r, up: r, down: size },
            BoundingBox { left: r, right: size, up: r, down: size },
        ];
        let shape = [channels, size, size];
        let mut masks = vec![Tensor::ones(&shape)];
        for bb in &boxes {
            masks.push(Tensor::from_fn(&shape, |i| {
                let (row, col) = ((i / size) % size, i % size);
                if bb.contains(row, col) {
                    T::zero()
                } else {
                    T::one()
                }
            }));
        }
        Ok(MaskSet {
            channels,
            size,
            radius: r,
            masks,
            boxes,
        })
    }

    pub fn t(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Mask `M_j`, `j` in `0..=T`.
    pub fn mask(&self, j: usize) -> &Tensor<T> {
        &self.masks[j]
    }

    pub fn masks(&self) -> &[Tensor<T>] {
        &self.masks
    }

    /// Dropped region of `M_j`; `None` for the all-ones `M_0`.
    pub fn bounding_box(&self, j: usize) -> Option<BoundingBox> {
        j.checked_sub(1).map(|i| self.boxes[i])
    }
}

/// Stacks `f * M_j` for `j = 0..=T` grouped per sample: output row
/// `b * (T + 1) + j` is sample `b` under mask `j`. Gradients flow through all
/// copies; the masks are constants.
pub fn transform_block<T: Scalar>(tape: &mut Tape<T>, f: Var, masks: &MaskSet<T>) -> Result<Var> {
    let s = tape.shape(f);
    if s.len() != 4 || s[1] != masks.channels || s[2] != masks.size || s[3] != masks.size {
        return Err(Error::shape(
            "transform_block",
            s,
            &[masks.channels, masks.size, masks.size],
        ));
    }
    let mut parts = Vec::with_capacity(masks.masks.len());
    for m in &masks.masks {
        let mv = tape.constant(m.clone());
        parts.push(tape.mul(f, mv)?);
    }
    tape.concat_batch(&parts)
}
