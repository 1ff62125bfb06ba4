//! Seeded mini-batch streams with optional pad-crop and horizontal flip.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Dataset;

/// Padding used by the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    CropFlip,
}

impl FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Augment::None),
            "crop_flip" => Ok(Augment::CropFlip),
            other => Err(Error::InvalidArgument(format!("unknown augmentation `{other}`"))),
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::None => "none",
            Augment::CropFlip => "crop_flip",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// `(C, H, W)` of one image.
    pub image_shape: (usize, usize, usize),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (c, h, w) = self.image_shape;
        Tensor::new(
            &[self.len(), c, h, w],
            self.images.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("batch images match their shape")
    }
}

/// Iterator over the batches of one epoch.
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Augment,
    rng: ChaCha8Rng,
}

/// Batches of `ds` for one epoch. With `shuffle` the order is a permutation
/// seeded by `epoch_seed`; the final partial batch is kept.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    epoch_seed: u64,
    shuffle: bool,
    augment: Augment,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut rng);
    }
    Ok(BatchStream {
        ds,
        order,
        batch_size,
        pos: 0,
        augment,
        rng,
    })
}

impl BatchStream<'_> {
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let ds = self.ds;
        let mut images = Vec::with_capacity(indices.len() * ds.image_len());
        for &i in &indices {
            match self.augment {
                Augment::None => images.extend_from_slice(ds.image(i)),
                Augment::CropFlip => {
                    let dy = self.rng.gen_range(0..=2 * CROP_PAD);
                    let dx = self.rng.gen_range(0..=2 * CROP_PAD);
                    let flip = self.rng.gen_bool(0.5);
                    crop_flip(ds.image(i), (ds.channels, ds.height, ds.width), dy, dx, flip, &mut images);
                }
            }
        }
        let labels = indices.iter().map(|&i| ds.labels()[i]).collect();
        Some(Batch {
            indices,
            images,
            labels,
            image_shape: (ds.channels, ds.height, ds.width),
        })
    }
}

/// Zero-pads by [`CROP_PAD`], crops the window at `(dy, dx)` of the padded
/// image, optionally mirrors it, and appends the result to `out`.
pub fn crop_flip(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    dy: usize,
    dx: usize,
    flip: bool,
    out: &mut Vec<f32>,
) {
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let (py, px) = ((y + dy) as isize - CROP_PAD as isize, (sx + dx) as isize - CROP_PAD as isize);
                let v = if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                    plane[py as usize * w + px as usize]
                } else {
                    0.0
                };
                out.push(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        Dataset::new("b", (1, 4, 4), 3, (0..n * 16).map(|v| v as f32).collect(), (0..n).map(|i| i % 3).collect())
            .unwrap()
    }

    #[test]
    fn partial_batch_kept_and_deterministic() {
        let d = ds(10);
        let a: Vec<Batch> = batches(&d, 4, 7, true, Augment::None).unwrap().collect();
        let b: Vec<Batch> = batches(&d, 4, 7, true, Augment::None).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(batches(&d, 0, 0, true, Augment::None).is_err());
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let d = ds(1);
        let mut out = Vec::new();
        crop_flip(d.image(0), (1, 4, 4), CROP_PAD, CROP_PAD, false, &mut out);
        assert_eq!(out, d.image(0));
        out.clear();
        crop_flip(d.image(0), (1, 4, 4), CROP_PAD, CROP_PAD, true, &mut out);
        assert_eq!(&out[..4], &[3.0, 2.0, 1.0, 0.0]);
    }
}
