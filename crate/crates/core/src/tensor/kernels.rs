//! Raw buffer kernels behind the tape operations. Shapes are validated by the
//! caller; these functions only index.

use crate::scalar::Scalar;

/// Output extent of a convolution along one axis, `None` when the kernel does
/// not fit the padded input or the stride is zero.
pub fn conv_output_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > size + 2 * pad {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// A 1x1, stride-1, unpadded convolution reads its input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.out_plane() * self.patch_len()) as u64
    }
}

/// Unfolds one `C x H x W` sample into a `(C*K*K) x (Ho*Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let out_h = (height + 2 * pad - kernel) / stride + 1;
    let out_w = (width + 2 * pad - kernel) / stride + 1;
    let plane = out_h * out_w;
    for c in 0..channels {
        let src = &input[c * height * width..(c + 1) * height * width];
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..out_h {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst_row = &mut dst[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih >= height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * width..(ih as usize + 1) * width];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        *d = if iw < 0 || iw >= width as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dst = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * s + kh) as isize - p as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * s + kw) as isize - p as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst_row[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for b in 0..g.batch {
        let x = &input[b * g.in_sample()..(b + 1) * g.in_sample()];
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g.in_ch, g.height, g.width, g.kernel, g.stride, g.pad, &mut cols);
            &cols
        };
        let y = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        T::gemm(
            g.out_ch,
            patch,
            plane,
            T::one(),
            weight,
            (patch, 1),
            cols_ref,
            (plane, 1),
            T::zero(),
            y,
            (plane, 1),
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); g.out_ch * patch]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut d_cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];

    for b in 0..g.batch {
        let x = &input[b * g.in_sample()..(b + 1) * g.in_sample()];
        let dy = &d_out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(dw) = d_weight.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g.in_ch, g.height, g.width, g.kernel, g.stride, g.pad, &mut cols);
                &cols
            };
            // dW += dY (O x P) * cols^T (P x CKK)
            T::gemm(
                g.out_ch,
                plane,
                patch,
                T::one(),
                dy,
                (plane, 1),
                cols_ref,
                (1, plane),
                T::one(),
                dw,
                (patch, 1),
            );
        }
        if let Some(dx) = d_input.as_mut() {
            let dx_b = &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()];
            if g.is_pointwise() {
                // dX = W^T (C x O) * dY (O x P)
                T::gemm(
                    patch,
                    g.out_ch,
                    plane,
                    T::one(),
                    weight,
                    (1, patch),
                    dy,
                    (plane, 1),
                    T::zero(),
                    dx_b,
                    (plane, 1),
                );
            } else {
                T::gemm(
                    patch,
                    g.out_ch,
                    plane,
                    T::one(),
                    weight,
                    (1, patch),
                    dy,
                    (plane, 1),
                    T::zero(),
                    &mut d_cols,
                    (plane, 1),
                );
                col2im(&d_cols, g, dx_b);
            }
        }
    }
    (d_input, d_weight)
}

/// Per-channel batch statistics of a `B x C x H x W` buffer: `(mean, biased var)`.
pub(crate) fn channel_stats<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let count = T::of((batch * plane) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            s += x[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for &e in &x[off..off + plane] {
                let d = e - m;
                v += d * d;
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}
