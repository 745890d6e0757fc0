//! Feature-distribution analysis: harvest channel vectors at segment
//! outputs, embed them in 2-D (z-score → PCA → exact t-SNE), estimate
//! clean and adversarial densities on a shared grid, and compare them with
//! the Jensen–Shannon divergence.

mod harvest;
mod kde;
mod pca;
mod tsne;

pub use harvest::{harvest, resolve_probe, ActivationSample};
pub use kde::{bandwidth, divergence, js_divergence, kde_grid, kde_pair, Bandwidth, BoundingBox, DensityGrid};
pub use pca::{pca_reduce, standardize, Pca};
pub use tsne::{joint_affinities, tsne_embed, Affinities, TsneConfig, TsneResult, MAX_POINTS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Upper bound on PCA dimensions before t-SNE (capped by the channel count).
    pub pca_dims: usize,
    pub tsne: TsneConfig,
    pub grid_resolution: usize,
    pub bandwidth: Bandwidth,
    /// Z-score every channel over the pooled clean + adversarial set first.
    pub standardize: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            pca_dims: 50,
            tsne: TsneConfig::default(),
            grid_resolution: 200,
            bandwidth: Bandwidth::Scott,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub segment: String,
    pub coords: Vec<[f64; 2]>,
    pub adversarial: Vec<bool>,
    pub pca_dims: usize,
    pub explained_variance_ratio: Vec<f64>,
    pub tsne: TsneConfig,
    pub kl: f64,
    pub clean_grid: Option<DensityGrid>,
    pub adversarial_grid: Option<DensityGrid>,
    /// JS divergence between the two grids, when both groups are present.
    pub divergence: Option<f64>,
}

/// Embeds the samples of one probe and scores clean vs adversarial overlap.
pub fn embed_samples(samples: &[ActivationSample], cfg: &EmbedConfig) -> Result<EmbeddingResult> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples to embed"))?;
    let c = first.channels.len();
    if samples.iter().any(|s| s.segment != first.segment || s.channels.len() != c) {
        return Err(Error::invalid("samples mix probes or channel counts"));
    }
    let mut x: Vec<f64> = samples.iter().flat_map(|s| s.channels.iter().copied()).collect();
    if cfg.standardize {
        standardize(&mut x, c);
    }
    let pca = pca_reduce(&x, c, cfg.pca_dims.min(c))?;
    let emb = tsne_embed(&pca.projected, pca.dims, &cfg.tsne)?;
    let adversarial: Vec<bool> = samples.iter().map(|s| s.adversarial).collect();
    let pick = |adv: bool| -> Vec<[f64; 2]> {
        emb.coords
            .iter()
            .zip(&adversarial)
            .filter(|(_, &a)| a == adv)
            .map(|(p, _)| *p)
            .collect()
    };
    let (clean, adv) = (pick(false), pick(true));
    let (clean_grid, adversarial_grid, divergence) = match (clean.is_empty(), adv.is_empty()) {
        (false, false) => {
            let (g1, g2) = kde_pair(&clean, &adv, cfg.grid_resolution, cfg.bandwidth)?;
            let js = divergence(&g1, &g2)?;
            (Some(g1), Some(g2), Some(js))
        }
        _ => {
            let only = if clean.is_empty() { &adv } else { &clean };
            let bbox = BoundingBox::padded(&[only])?;
            let g = kde_grid(only, &bbox, cfg.grid_resolution, cfg.bandwidth)?;
            if clean.is_empty() {
                (None, Some(g), None)
            } else {
                (Some(g), None, None)
            }
        }
    };
    Ok(EmbeddingResult {
        segment: first.segment.clone(),
        coords: emb.coords,
        adversarial,
        pca_dims: pca.dims,
        explained_variance_ratio: pca.explained_variance_ratio,
        tsne: cfg.tsne.clone(),
        kl: emb.kl,
        clean_grid,
        adversarial_grid,
        divergence,
    })
}

/// Splits samples by probe (first-appearance order) and embeds each group;
/// groups run concurrently.
pub fn embed_by_segment(samples: &[ActivationSample], cfg: &EmbedConfig) -> Result<Vec<EmbeddingResult>> {
    let mut names: Vec<&str> = Vec::new();
    for s in samples {
        if !names.contains(&s.segment.as_str()) {
            names.push(&s.segment);
        }
    }
    names
        .par_iter()
        .map(|name| {
            let group: Vec<ActivationSample> = samples.iter().filter(|s| s.segment == *name).cloned().collect();
            embed_samples(&group, cfg)
        })
        .collect()
}
