//! CIFAR binary batches: records of one label byte followed by 1024 red,
//! 1024 green and 1024 blue bytes, row-major 32x32 planes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, Normalization};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Commonly used CIFAR-10 channel statistics.
pub const CIFAR_NORM: ([f32; 3], [f32; 3]) = ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]);

/// Loads and concatenates CIFAR-10 binary files, scaling pixels to `[0, 1]`
/// and applying `norm` when given.
pub fn load_cifar_bin<P: AsRef<Path>>(paths: &[P], norm: Option<&Normalization>) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let rem = bytes.len() % CIFAR_RECORD;
        if rem != 0 || bytes.is_empty() {
            return Err(Error::Format {
                format: "CIFAR binary",
                path: path.to_path_buf(),
                offset: (bytes.len() - rem) as u64,
                detail: format!(
                    "file length {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for (ri, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format {
                    format: "CIFAR binary",
                    path: path.to_path_buf(),
                    offset: (ri * CIFAR_RECORD) as u64,
                    detail: format!("label {label} outside 0..10"),
                });
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let name = match paths.first() {
        Some(p) => format!("cifar:{}", p.as_ref().display()),
        None => return Err(Error::InvalidArgument("no CIFAR files given".into())),
    };
    let mut ds = Dataset::new(name, (3, 32, 32), 10, images, labels)?;
    if let Some(n) = norm {
        ds.normalize(n)?;
    }
    Ok(ds)
}

/// Writes records in CIFAR binary layout; `pixels` holds 3072 bytes per label.
pub fn write_cifar_bin(path: impl AsRef<Path>, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * (CIFAR_RECORD - 1) {
        return Err(Error::InvalidArgument(format!(
            "{} pixel bytes for {} records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
