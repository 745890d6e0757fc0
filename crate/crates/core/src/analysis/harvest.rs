use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, TargetMode};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Mode};
use crate::seed;
use crate::tensor::{Tape, Tensor};

const HARVEST_BATCH: usize = 50;

/// One channel vector read at a single spatial position of a layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSample {
    pub segment: String,
    pub channels: Vec<f64>,
    pub image_id: usize,
    pub position: (usize, usize),
    pub adversarial: bool,
    pub label: usize,
}

/// Resolves a segment name (its last layer) or a layer name to a layer index.
pub fn resolve_probe(model: &ModelGraph, name: &str) -> Result<usize> {
    if let Ok(seg) = model.segmentation().get(name) {
        return Ok(seg.layers.end - 1);
    }
    model
        .layers()
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::UnknownSegment(name.to_string()))
}

/// (channels, height, width) of a layer output; vector outputs count as 1×1.
fn extent(out_shape: &[usize]) -> (usize, usize, usize) {
    match *out_shape {
        [c, h, w] => (c, h, w),
        [c] => (c, 1, 1),
        _ => unreachable!("layer outputs are per-sample rank 1 or 3"),
    }
}

/// Draws `positions_per_image` distinct spatial positions per image at each
/// probe and emits the channel vectors found there, for the clean images
/// and, when `attack` is given, for their PGD counterparts at the very same
/// positions. Samples are grouped by probe in request order, clean before
/// adversarial, then by image.
pub fn harvest(
    model: &ModelGraph,
    images: &Tensor,
    labels: &[usize],
    probes: &[&str],
    positions_per_image: usize,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Vec<ActivationSample>> {
    let [n, _, _, _] = images.dims4("harvest images")?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
    }
    if positions_per_image == 0 {
        return Err(Error::invalid("positions_per_image must be positive"));
    }
    let layers = probes
        .iter()
        .map(|p| resolve_probe(model, p))
        .collect::<Result<Vec<_>>>()?;
    let dims: Vec<(usize, usize, usize)> = layers.iter().map(|&l| extent(&model.layers()[l].out_shape)).collect();
    for (p, &(_, h, w)) in probes.iter().zip(&dims) {
        if positions_per_image > h * w {
            return Err(Error::invalid(format!(
                "{positions_per_image} positions requested but {p} has only {h}x{w}"
            )));
        }
    }
    // positions[probe][image] as flat h·w indices
    let positions: Vec<Vec<Vec<usize>>> = dims
        .iter()
        .enumerate()
        .map(|(pi, &(_, h, w))| {
            (0..n)
                .map(|i| {
                    let mut rng = seed::stream(seed, "harvest-positions", (pi as u64) << 40 | i as u64);
                    index::sample(&mut rng, h * w, positions_per_image).into_vec()
                })
                .collect()
        })
        .collect();
    let adversarial = match attack {
        Some(cfg) => {
            let cfg = cfg.clone().with_target(TargetMode::TrueLabel);
            let mut parts = Vec::new();
            for (b, lo) in (0..n).step_by(HARVEST_BATCH).enumerate() {
                let hi = (lo + HARVEST_BATCH).min(n);
                let x = images.slice_batch(lo, hi)?;
                parts.push(pgd(model, &x, &labels[lo..hi], &cfg, seed::derive_seed(seed, "harvest-attack", b as u64))?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Some(Tensor::concat_batch(&refs)?)
        }
        None => None,
    };
    let mut groups: Vec<(bool, &Tensor)> = vec![(false, images)];
    if let Some(adv) = &adversarial {
        groups.push((true, adv));
    }
    let mut out: Vec<Vec<ActivationSample>> = vec![Vec::new(); probes.len()];
    for (is_adv, source) in groups {
        for lo in (0..n).step_by(HARVEST_BATCH) {
            let hi = (lo + HARVEST_BATCH).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(source.slice_batch(lo, hi)?);
            let fp = model.forward(&mut tape, xv, Mode::Eval, None)?;
            for (pi, (&layer, &(c, h, w))) in layers.iter().zip(&dims).enumerate() {
                let act = tape.value(fp.outputs[layer]).data();
                let plane = h * w;
                for i in lo..hi {
                    let base = (i - lo) * c * plane;
                    for &pos in &positions[pi][i] {
                        out[pi].push(ActivationSample {
                            segment: probes[pi].to_string(),
                            channels: (0..c).map(|ch| act[base + ch * plane + pos]).collect(),
                            image_id: i,
                            position: (pos / w, pos % w),
                            adversarial: is_adv,
                            label: labels[i],
                        });
                    }
                }
            }
        }
    }
    Ok(out.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mini_resnet;
    use rand::Rng;

    fn setup(n: usize) -> (ModelGraph, Tensor, Vec<usize>) {
        let m = build_mini_resnet([1, 32, 32], 10, 1, 4, 2).unwrap();
        let mut rng = seed::stream(4, "test", 0);
        let x = Tensor::new(vec![n, 1, 32, 32], (0..n * 1024).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        (m, x, (0..n).map(|i| i % 10).collect())
    }

    #[test]
    fn pooled_feature_read_exactly() {
        let (m, x, y) = setup(3);
        let s = harvest(&m, &x, &y, &["head.gap"], 1, None, 0).unwrap();
        assert_eq!(s.len(), 3);
        let gap = m.layers().iter().position(|l| l.name == "head.gap").unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fp = m.forward(&mut tape, xv, Mode::Eval, None).unwrap();
        let pooled = tape.value(fp.outputs[gap]);
        let c = s[0].channels.len();
        for (i, smp) in s.iter().enumerate() {
            assert_eq!(smp.position, (0, 0));
            assert_eq!(smp.channels.as_slice(), &pooled.data()[i * c..(i + 1) * c]);
        }
    }

    #[test]
    fn positions_shared_and_within_extent() {
        let (m, x, y) = setup(4);
        let cfg = AttackConfig::pgd_eval(8.0 / 255.0, 2.0 / 255.0, 2);
        let s = harvest(&m, &x, &y, &["m_1", "m_4"], 4, Some(&cfg), 1).unwrap();
        assert_eq!(s.len(), 2 * 2 * 4 * 4);
        for seg in ["m_1", "m_4"] {
            let (clean, adv): (Vec<_>, Vec<_>) = s.iter().filter(|a| a.segment == seg).partition(|a| !a.adversarial);
            assert_eq!(clean.len(), adv.len());
            for (a, b) in clean.iter().zip(&adv) {
                assert_eq!((a.image_id, a.position, a.label), (b.image_id, b.position, b.label));
            }
            let l = resolve_probe(&m, seg).unwrap();
            let (c, h, w) = extent(&m.layers()[l].out_shape);
            for a in &clean {
                assert!(a.position.0 < h && a.position.1 < w && a.channels.len() == c);
            }
            for i in 0..4 {
                let mut ps: Vec<_> = clean.iter().filter(|a| a.image_id == i).map(|a| a.position).collect();
                ps.sort();
                ps.dedup();
                assert_eq!(ps.len(), 4, "positions drawn without replacement");
            }
        }
    }

    #[test]
    fn too_many_positions_rejected() {
        let (m, x, y) = setup(1);
        // m_4 is 2×2 at 32×32 input
        assert!(harvest(&m, &x, &y, &["m_4"], 5, None, 0).is_err());
        assert!(harvest(&m, &x, &y, &["nope"], 1, None, 0).is_err());
    }
}
