//! IDX (MNIST-style) files: big-endian u32 magic, big-endian u32 dimensions,
//! then raw unsigned bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "IDX",
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

/// Parses header dims and returns `(dims, payload offset)`.
fn header(bytes: &[u8], path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    if bytes.len() < start + need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload of {} bytes, header promises {need}", bytes.len() - start),
        ));
    }
    Ok((dims, start))
}

/// Loads a grayscale image file and its label file; pixels are scaled to
/// `[0, 1]` and the class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let (idims, istart) = header(&ib, ip, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, lstart) = header(&lb, lp, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            lp,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let (count, rows, cols) = (idims[0], idims[1], idims[2]);
    let images = ib[istart..istart + count * rows * cols]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels: Vec<usize> = lb[lstart..lstart + count].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        format!("idx:{}", ip.display()),
        (1, rows, cols),
        classes,
        images,
        labels,
    )
}

/// Writes raw bytes as an IDX image/label pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    (rows, cols): (usize, usize),
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for {} images of {rows}x{cols}",
            pixels.len(),
            labels.len()
        )));
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [labels.len(), rows, cols] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, ib).map_err(|e| Error::io(format!("writing {}", ip.display()), e))?;
    fs::write(lp, lb).map_err(|e| Error::io(format!("writing {}", lp.display()), e))?;
    Ok(())
}
