//! Labeled image datasets: CIFAR-10 binary batches, MNIST IDX files and a
//! deterministic synthetic generator for fast runs.

mod cifar;
mod mnist;
mod synthetic;

pub use cifar::{load_cifar10, load_cifar10_batch, CIFAR10_CLASSES, CIFAR10_RECORD_BYTES};
pub use mnist::{load_mnist_idx, read_idx_images, read_idx_labels};
pub use synthetic::{make_synthetic, nearest_centroid_accuracy, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in [0, 1] (N×C×H×W) with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let [n, _, _, _] = images.dims4("dataset images")?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-sample (C, H, W).
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    /// First `n` samples (or all, when fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Class-balanced random subset of `n` samples drawn with `seed`.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        use rand::seq::SliceRandom;
        let k = self.classes();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut rng = seed::stream(seed, "subset", 0);
        let mut picked = Vec::with_capacity(n);
        for (c, idx) in by_class.iter_mut().enumerate() {
            idx.shuffle(&mut rng);
            let want = n / k + usize::from(c < n % k);
            picked.extend(idx.iter().take(want));
        }
        picked.sort_unstable();
        self.select(&picked)
    }

    /// Zero-pads every image symmetrically to `size`×`size` (e.g. 28 → 32).
    pub fn zero_pad(&self, size: usize) -> Result<Dataset> {
        let [c, h, w] = self.image_shape();
        if size < h || size < w {
            return Err(Error::shape(format!("cannot pad {h}x{w} down to {size}")));
        }
        let (top, left) = ((size - h) / 2, (size - w) / 2);
        let mut data = vec![0.0; self.len() * c * size * size];
        for (dst, src) in data.chunks_mut(c * size * size).zip(self.images.data().chunks(c * h * w)) {
            for ch in 0..c {
                for y in 0..h {
                    let d = ch * size * size + (y + top) * size + left;
                    let s = ch * h * w + y * w;
                    dst[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Ok(Dataset {
            images: Tensor::new(vec![self.len(), c, size, size], data)?,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    /// Images and labels of batch `b` of size `size` following `order`.
    pub fn batch(&self, order: &[usize], b: usize, size: usize) -> Result<(Tensor, Vec<usize>)> {
        let idx = &order[b * size..((b + 1) * size).min(order.len())];
        Ok((
            self.images.select_batch(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}
