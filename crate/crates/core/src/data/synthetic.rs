//! Class-conditional blob + texture images.
//!
//! Each class owns a pair of anchor positions for bright Gaussian blobs
//! (large, high-contrast structure) and an oriented sinusoidal grating
//! (low-amplitude, high-frequency texture with random phase). Position
//! jitter, distractor blobs, random background and pixel noise keep the
//! classes from being linearly separable.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub split: Split,
    pub blob_amplitude: (f64, f64),
    pub blob_sigma: f64,
    pub jitter: f64,
    pub distractors: usize,
    pub texture_amplitude: f64,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            image_size,
            channels: 1,
            seed,
            split: Split::Train,
            blob_amplitude: (0.35, 0.6),
            blob_sigma: 0.09,
            jitter: 0.09,
            distractors: 1,
            texture_amplitude: 0.06,
            noise: 0.03,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.image_size < 8 {
            return Err(Error::invalid(format!(
                "synthetic images need at least 8 pixels per side, got {}",
                self.image_size
            )));
        }
        if self.classes < 2 || self.samples_per_class == 0 || self.channels == 0 {
            return Err(Error::invalid("synthetic data needs ≥2 classes, ≥1 sample and ≥1 channel"));
        }
        let k = self.classes;
        let s = self.image_size;
        let n = k * self.samples_per_class;
        let plane = s * s;
        let anchors = class_anchors(k, self.seed);
        let textures: Vec<(f64, f64)> = (0..k)
            .map(|c| {
                let angle = PI * c as f64 / k as f64;
                let freq = if c % 2 == 0 { 0.3 } else { 0.42 };
                (angle, freq)
            })
            .collect();
        let split_tag = match self.split {
            Split::Train => "synthetic-train",
            Split::Test => "synthetic-test",
        };
        let mut data = vec![0.0; n * self.channels * plane];
        let mut labels = Vec::with_capacity(n);
        for (i, img) in data.chunks_mut(self.channels * plane).enumerate() {
            let class = i % k;
            labels.push(class);
            let mut rng = seed::stream(self.seed, split_tag, i as u64);
            let noise = Normal::new(0.0, self.noise).expect("non-negative noise");
            let background = rng.gen_range(0.1..0.3);
            let mut blobs: Vec<(f64, f64, f64)> = anchors[class]
                .iter()
                .map(|&(y, x)| {
                    (
                        y + rng.gen_range(-self.jitter..=self.jitter),
                        x + rng.gen_range(-self.jitter..=self.jitter),
                        rng.gen_range(self.blob_amplitude.0..self.blob_amplitude.1),
                    )
                })
                .collect();
            for _ in 0..self.distractors {
                blobs.push((
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(self.blob_amplitude.0..self.blob_amplitude.1),
                ));
            }
            let (angle, freq) = textures[class];
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            let sig2 = 2.0 * (self.blob_sigma * s as f64).powi(2);
            let tint: Vec<f64> = (0..self.channels).map(|_| rng.gen_range(0.8..1.0)).collect();
            for py in 0..s {
                for px in 0..s {
                    let mut v = background;
                    for &(by, bx, amp) in &blobs {
                        let d2 = (py as f64 - by * s as f64).powi(2) + (px as f64 - bx * s as f64).powi(2);
                        v += amp * (-d2 / sig2).exp();
                    }
                    v += self.texture_amplitude
                        * (2.0 * PI * freq * (py as f64 * dy + px as f64 * dx) + phase).sin();
                    for (c, t) in tint.iter().enumerate() {
                        let pixel = v * t + noise.sample(&mut rng);
                        img[c * plane + py * s + px] = pixel.clamp(0.0, 1.0);
                    }
                }
            }
        }
        let images = Tensor::new(vec![n, self.channels, s, s], data)?;
        let names = (0..k).map(|c| format!("class{c}")).collect();
        Dataset::new(images, labels, names, self.split)
    }
}

/// Two distinct anchor points per class on a 4×4 lattice in relative
/// coordinates, drawn from the root seed.
fn class_anchors(classes: usize, root: u64) -> Vec<[(f64, f64); 2]> {
    use rand::seq::SliceRandom;
    let lattice: Vec<(f64, f64)> = (0..16)
        .map(|i| (0.2 + 0.2 * (i / 4) as f64, 0.2 + 0.2 * (i % 4) as f64))
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..16)
        .flat_map(|a| (a + 1..16).map(move |b| (a, b)))
        .collect();
    let mut rng = seed::stream(root, "synthetic-anchors", 0);
    pairs.shuffle(&mut rng);
    pairs
        .iter()
        .cycle()
        .take(classes)
        .map(|&(a, b)| [lattice[a], lattice[b]])
        .collect()
}

/// Default generator (single channel, train split).
pub fn make_synthetic(classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(classes, samples_per_class, image_size, seed).generate()
}

/// Accuracy of a nearest-class-mean classifier fit on `train`, scored on `test`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.classes();
    let d = train.images.numel() / train.len();
    let mut centroids = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (img, &y) in train.images.data().chunks(d).zip(&train.labels) {
        counts[y] += 1;
        centroids[y * d..(y + 1) * d].iter_mut().zip(img).for_each(|(c, v)| *c += v);
    }
    for (c, &n) in centroids.chunks_mut(d).zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .images
        .data()
        .chunks(d)
        .zip(&test.labels)
        .filter(|(img, &y)| {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a * d..(a + 1) * d].iter().zip(*img).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b * d..(b + 1) * d].iter().zip(*img).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = make_synthetic(10, 20, 32, 5).unwrap();
        let b = make_synthetic(10, 20, 32, 5).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 20);
        }
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(make_synthetic(10, 1, 7, 0).is_err());
    }

    #[test]
    fn centroid_baseline_is_neither_chance_nor_saturated() {
        let train = make_synthetic(10, 60, 32, 1).unwrap();
        let test = SyntheticSpec::new(10, 30, 32, 1).with_split(Split::Test).generate().unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!(acc > 0.1 && acc < 0.9, "nearest-centroid accuracy {acc}");
    }
}
