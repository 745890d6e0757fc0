use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 3×1024 channel-planar, row-major pixel bytes.
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const RECORDS_PER_BATCH: usize = 10_000;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

fn class_names() -> Vec<String> {
    CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn parse_records(path: &Path, bytes: &[u8], expected_records: Option<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
    let format_err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    match expected_records {
        Some(n) if bytes.len() != n * CIFAR10_RECORD_BYTES => {
            return Err(format_err(
                bytes.len().min(n * CIFAR10_RECORD_BYTES),
                format!(
                    "expected {} bytes ({n} records of {CIFAR10_RECORD_BYTES}), found {}",
                    n * CIFAR10_RECORD_BYTES,
                    bytes.len()
                ),
            ))
        }
        None if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) => {
            let whole = bytes.len() / CIFAR10_RECORD_BYTES;
            return Err(format_err(
                whole * CIFAR10_RECORD_BYTES,
                format!(
                    "expected a positive multiple of {CIFAR10_RECORD_BYTES} bytes, found {} (next whole size {})",
                    bytes.len(),
                    (whole + 1) * CIFAR10_RECORD_BYTES
                ),
            ));
        }
        _ => {}
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(format_err(
                r * CIFAR10_RECORD_BYTES,
                format!("label byte {label} exceeds 9"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Parses a single binary batch file. With `expected_records`, the file
/// must hold exactly that many records.
pub fn load_cifar10_batch(path: impl AsRef<Path>, expected_records: Option<usize>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pixels, labels) = parse_records(path, &bytes, expected_records)?;
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, class_names(), split)
}

/// Reads the standard distribution directory: `data_batch_1.bin` …
/// `data_batch_5.bin` for the train split (50000 samples) or
/// `test_batch.bin` for the test split (10000 samples).
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_records(&path, &bytes, Some(RECORDS_PER_BATCH))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, class_names(), split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        std::fs::write(&path, &rec).unwrap();
        let ds = load_cifar10_batch(&path, None, Split::Test).unwrap();
        assert_eq!(ds.labels, vec![3]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_planar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("planar.bin");
        let mut rec = vec![0u8];
        rec.extend(std::iter::repeat_n(10u8, 1024));
        rec.extend(std::iter::repeat_n(20u8, 1024));
        rec.extend(std::iter::repeat_n(30u8, 1024));
        std::fs::write(&path, &rec).unwrap();
        let ds = load_cifar10_batch(&path, None, Split::Train).unwrap();
        assert_eq!(ds.images.data()[0], 10.0 / 255.0);
        assert_eq!(ds.images.data()[1024], 20.0 / 255.0);
        assert_eq!(ds.images.data()[3071], 30.0 / 255.0);
    }

    #[test]
    fn truncated_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        std::fs::write(&path, vec![1u8; CIFAR10_RECORD_BYTES * 2 - 5]).unwrap();
        let err = load_cifar10_batch(&path, Some(2), Split::Test).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("6146") && msg.contains("6141"), "{msg}");
        let err = load_cifar10_batch(&path, None, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3073, .. }), "{err}");
    }

    #[test]
    fn bad_label_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = vec![0u8; CIFAR10_RECORD_BYTES * 2];
        bytes[CIFAR10_RECORD_BYTES] = 10;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cifar10_batch(&path, None, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3073, .. }), "{err}");
    }
}
