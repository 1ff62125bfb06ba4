//! Class activation maps from the last joint head's untransformed columns,
//! written as binary PGM heatmaps and PPM overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{SsflNet, HEAD_M};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::train::infer_si;

/// `sum_c w[c, class * (T + 1)] * f[c, :, :]` for one `C x h x w` feature map
/// and head weights of shape `C x N(T + 1)`.
pub fn raw_cam<T: Scalar>(feature: &Tensor<T>, weights: &Tensor<T>, class: usize, t: usize) -> Result<Vec<f64>> {
    let fs = feature.shape();
    if fs.len() != 3 {
        return Err(Error::invalid_shape("cam", format!("feature must be C x h x w, got {fs:?}")));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let ws = weights.shape();
    if ws.len() != 2 || ws[0] != c || ws[1] % (t + 1) != 0 {
        return Err(Error::shape("cam weights", ws, &[c, t + 1]));
    }
    let classes = ws[1] / (t + 1);
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    let col = class * (t + 1);
    let mut out = vec![0f64; h * w];
    for ch in 0..c {
        let wc = weights.data()[ch * ws[1] + col].to_f64_lossy();
        for (o, v) in out.iter_mut().zip(&feature.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += wc * v.to_f64_lossy();
        }
    }
    Ok(out)
}

/// Min-max scales to `[0, 255]`; a constant map becomes all zeros.
pub fn min_max_255(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| 255.0 * (v - lo) / range).collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(map: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let src = |y: usize, x: usize| map[y * w + x];
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
            let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub class: usize,
    pub predicted: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major heatmap at input resolution, values in `[0, 255]`.
    pub heatmap: Vec<u8>,
}

impl Cam {
    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .heatmap
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.heatmap[best] { i } else { best });
        (i / self.width, i % self.width)
    }
}

/// CAMs for a batch of `B x C x H x W` images. `classes[b] = None` uses the
/// single-inference prediction.
pub fn compute_cams<T: Scalar>(net: &mut SsflNet<T>, images: &Tensor<T>, classes: &[Option<usize>]) -> Result<Vec<Cam>> {
    let s = images.shape().to_vec();
    if s.len() != 4 || classes.len() != s[0] {
        return Err(Error::InvalidArgument(format!(
            "{} class choices for images of shape {s:?}",
            classes.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let out = net.forward_framework(&mut tape, x, Mode::Eval)?;
    let predicted = infer_si(&out.logits(&tape))?.predicted;
    let feature = out.feature_m.expect("eval forward keeps the feature map");
    let weights = net.params().get(&format!("{HEAD_M}.weight"))?.clone();
    let fs = feature.shape().to_vec();
    let (c, h, w) = (fs[1], fs[2], fs[3]);
    let t = net.config().t;
    let mut cams = Vec::with_capacity(s[0]);
    for b in 0..s[0] {
        let class = classes[b].unwrap_or(predicted[b]);
        let fb = Tensor::new(&[c, h, w], feature.data()[b * c * h * w..(b + 1) * c * h * w].to_vec())?;
        let scaled = min_max_255(&raw_cam(&fb, &weights, class, t)?);
        let up = upsample_bilinear(&scaled, (h, w), (s[2], s[3]));
        cams.push(Cam {
            class,
            predicted: predicted[b],
            height: s[2],
            width: s[3],
            heatmap: up.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        });
    }
    Ok(cams)
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Binary (P5) 8-bit grayscale image.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument("PGM pixel count does not match its size".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_bytes(path.as_ref(), out)
}

/// Binary (P6) 8-bit RGB image from interleaved pixels.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::InvalidArgument("PPM pixel count does not match its size".into()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    write_bytes(path.as_ref(), out)
}

/// Blue-to-red color ramp.
fn ramp(v: u8) -> [f64; 3] {
    let t = v as f64 / 255.0;
    [255.0 * t, 255.0 * (1.0 - (2.0 * t - 1.0).abs()), 255.0 * (1.0 - t)]
}

/// Half-and-half blend of an image (planar `3 x H x W`, values in `[0, 1]`)
/// with the colored heatmap, as interleaved RGB bytes.
pub fn overlay(image: &[f32], heatmap: &[u8]) -> Vec<u8> {
    let plane = heatmap.len();
    let mut out = Vec::with_capacity(3 * plane);
    for (i, &h) in heatmap.iter().enumerate() {
        let color = ramp(h);
        for (c, col) in color.iter().enumerate() {
            let px = 255.0 * image[c * plane + i].clamp(0.0, 1.0) as f64;
            out.push((0.5 * px + 0.5 * col).round() as u8);
        }
    }
    out
}
