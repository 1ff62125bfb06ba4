//! Datasets: IDX and CIFAR binary loaders, the synthetic quadrant task, and
//! seeded batching with optional crop/flip augmentation.

mod batch;
mod cifar;
mod idx;
mod synth;

pub use batch::{batches, crop_flip, Augment, Batch, BatchStream, CROP_PAD};
pub use cifar::{load_cifar_bin, write_cifar_bin, CIFAR_NORM, CIFAR_RECORD};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_generate, SynthSpec, SYNTH_NORM};

use crate::error::{Error, Result};

/// Per-channel `(x - mean) / std` constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn uniform(channels: usize, mean: f32, std: f32) -> Self {
        Normalization {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    /// Inverse map of one normalized value of channel `c`.
    pub fn denormalize(&self, c: usize, v: f32) -> f32 {
        v * self.std[c] + self.mean[c]
    }
}

/// Images stored `count x C x H x W` as `f32`, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} image values for {} labels of shape {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite image value".into()));
        }
        Ok(Dataset {
            name: name.into(),
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Applies per-channel normalization once. Returns `false` without
    /// touching the data when the dataset is already normalized.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<bool> {
        if self.normalization.is_some() {
            return Ok(false);
        }
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "normalization for {} channels applied to {} channels",
                norm.mean.len(),
                self.channels
            )));
        }
        if norm.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        let plane = self.height * self.width;
        for (i, v) in self.images.iter_mut().enumerate() {
            let c = (i / plane) % self.channels;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
        self.normalization = Some(norm.clone());
        Ok(true)
    }

    /// New dataset holding the given samples in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    /// The first `k` samples of every class, in dataset order.
    pub fn first_k_per_class(&self, k: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes];
        let picked: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                seen[c] += 1;
                seen[c] <= k
            })
            .collect();
        self.subset(&picked)
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
            normalization: self.normalization.clone(),
        }
    }
}
