use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "header truncated".into(),
        })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(path, bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// IDX image file → (count, rows, cols, pixels scaled by 1/255).
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    check_magic(path, &bytes, IMAGES_MAGIC)?;
    let n = be_u32(path, &bytes, 4)? as usize;
    let rows = be_u32(path, &bytes, 8)? as usize;
    let cols = be_u32(path, &bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    check_magic(path, &bytes, LABELS_MAGIC)?;
    let n = be_u32(path, &bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(8 + n) as u64,
            message: format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        });
    }
    if let Some(pos) = bytes[8..].iter().position(|&b| b > 9) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (8 + pos) as u64,
            message: format!("label byte {} exceeds 9", bytes[8 + pos]),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads a pair of IDX files as 1×rows×cols images.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images.as_ref())?;
    let labels_v = read_idx_labels(labels.as_ref())?;
    if labels_v.len() != n {
        return Err(Error::Format {
            path: labels.as_ref().to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    let names = (0..10).map(|d| d.to_string()).collect();
    Dataset::new(images, labels_v, names, split)
}
