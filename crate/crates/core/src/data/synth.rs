//! Seeded synthetic task: class `c` places a bright blob in quadrant `c`
//! (upper-left, upper-right, lower-left, lower-right) over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Dataset, Normalization};

/// Normalization used for synthetic images: maps `[0, 1]` onto `[-1, 1]`.
pub const SYNTH_NORM: (f32, f32) = (0.5, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    /// Maximum blob-center offset in pixels along each axis.
    pub jitter: usize,
    pub background: f32,
    pub amplitude: f32,
    /// A second blob of amplitude `U(0, distractor) * amplitude` is placed in
    /// a uniformly chosen other quadrant; 0 disables it.
    pub distractor: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            size: 32,
            channels: 3,
            samples_per_class: 500,
            noise_sigma: 0.5,
            seed: 0,
            jitter: 4,
            background: 0.25,
            amplitude: 0.6,
            distractor: 0.95,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 4 {
            return Err(Error::config("num_classes", "synthetic task supports 1..=4 classes"));
        }
        if self.size < 4 || self.size % 2 != 0 {
            return Err(Error::config("size", "must be even and at least 4"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.distractor) {
            return Err(Error::config("distractor", "must lie in [0, 1)"));
        }
        if self.jitter >= self.size / 4 && self.jitter > 0 {
            return Err(Error::config("jitter", "must stay below size / 4"));
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization::uniform(self.channels, SYNTH_NORM.0, SYNTH_NORM.1)
    }

    /// Center `(row, col)` of quadrant `q`.
    pub fn quadrant_center(&self, q: usize) -> (usize, usize) {
        let (h, quarter) = (self.size / 2, self.size / 4);
        (quarter + (q / 2) * h, quarter + (q % 2) * h)
    }
}

/// Generates `num_classes * samples_per_class` images in class-interleaved
/// order (`label = i % num_classes`), values in `[0, 1]`, not normalized.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let (s, c) = (spec.size, spec.channels);
    let width = s as f32 / 8.0;
    let count = spec.num_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(count * c * s * s);
    let mut labels = Vec::with_capacity(count);
    let j = spec.jitter as i64;
    for i in 0..count {
        let class = i % spec.num_classes;
        let (cy, cx) = spec.quadrant_center(class);
        let (dy, dx) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let (cy, cx) = (cy as f32 + dy as f32, cx as f32 + dx as f32);
        let second = if spec.distractor > 0.0 {
            let q = (class + rng.gen_range(1..4)) % 4;
            let (qy, qx) = spec.quadrant_center(q);
            let (ey, ex) = if j > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0, 0)
            };
            let amp = rng.gen_range(0.0..spec.distractor) * spec.amplitude;
            Some((qy as f32 + ey as f32, qx as f32 + ex as f32, amp))
        } else {
            None
        };
        for _ in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let mut v = spec.background + spec.amplitude * (-d2 / (2.0 * width * width)).exp();
                    if let Some((sy, sx, amp)) = second {
                        let e2 = (y as f32 - sy).powi(2) + (x as f32 - sx).powi(2);
                        v += amp * (-e2 / (2.0 * width * width)).exp();
                    }
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(
        format!(
            "synth(n={},size={},per_class={},sigma={},seed={})",
            spec.num_classes, s, spec.samples_per_class, spec.noise_sigma, spec.seed
        ),
        (c, s, s),
        spec.num_classes,
        images,
        labels,
    )
}
