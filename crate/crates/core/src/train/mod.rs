//! Conventional, adversarial (PGD) and fast-adversarial (PGD-1) training
//! loops over a [`FreezeMask`].
//!
//! Adversarial examples are regenerated every batch from the current
//! weights, in eval mode, targeting the model's own prediction. Frozen
//! parameters receive no updates and frozen batch norm layers keep their
//! running statistics.

mod optim;
mod schedule;

pub use optim::{adam_step, sgd_momentum_step, AdamState, OptimizerConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{schedule_lr, Schedule};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, TargetMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, ModelGraph, Mode};
use crate::seed;
use crate::tensor::{argmax_rows, Tape, Tensor};
use optim::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Conventional,
    Adversarial,
    FastAdversarial,
}

impl TrainMode {
    pub fn is_adversarial(self) -> bool {
        self != TrainMode::Conventional
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Conventional => "conventional",
            TrainMode::Adversarial => "adversarial",
            TrainMode::FastAdversarial => "fast_adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerConfig,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    /// Fraction of each batch left unperturbed (adversarial modes only).
    pub clean_mix_ratio: f64,
    pub attack: AttackConfig,
    /// Overwritten from the root seed when run from a manifest.
    #[serde(default)]
    pub seed: u64,
    /// Random 4-pixel-padded crop plus horizontal flip.
    #[serde(default)]
    pub augment: bool,
    /// Normalize clean and attacked samples of a mixed batch together
    /// (true) or as two separate batch-norm batches (false).
    #[serde(default = "default_true")]
    pub joint_batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// CIFAR-10 recipe: Adam 1e-3, batch 128, 300 epochs, cosine decay,
    /// weight decay 1e-4, PGD-7 (ε 8/255, step 2/255) against the
    /// prediction, 50:50 clean mix.
    pub fn cifar_reference() -> Self {
        Self {
            mode: TrainMode::Adversarial,
            optimizer: OptimizerConfig::Adam { lr: 0.001 },
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 300,
            schedule: Schedule::Cosine,
            clean_mix_ratio: 0.5,
            attack: AttackConfig::madry_training(),
            seed: 0,
            augment: true,
            joint_batch_norm: true,
        }
    }

    /// ImageNet recipe, kept for documentation: SGD 0.256 with momentum
    /// 0.875, batch 256, ÷10 at epochs 30/60/90, fast adversarial training
    /// at ε 4/255 without clean samples.
    pub fn imagenet_reference() -> Self {
        let eps = 4.0 / 255.0;
        Self {
            mode: TrainMode::FastAdversarial,
            optimizer: OptimizerConfig::SgdMomentum {
                lr: 0.256,
                momentum: 0.875,
            },
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 100,
            schedule: Schedule::StepDecay {
                milestones: vec![30, 60, 90],
                factor: 0.1,
            },
            clean_mix_ratio: 0.0,
            attack: AttackConfig::fast(eps, 1.25 * eps),
            seed: 0,
            augment: true,
            joint_batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch normalization"));
        }
        if !(0.0..=1.0).contains(&self.clean_mix_ratio) {
            return Err(Error::invalid(format!(
                "clean_mix_ratio {} outside [0, 1]",
                self.clean_mix_ratio
            )));
        }
        if !(self.optimizer.base_lr() > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and weight decay non-negative"));
        }
        if self.mode.is_adversarial() {
            self.attack.validate()?;
        }
        if self.mode == TrainMode::FastAdversarial && (self.attack.iterations != 1 || !self.attack.random_start) {
            return Err(Error::invalid(
                "fast adversarial training needs a single-iteration attack with random start",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy on the batches as trained (clean and attacked samples alike).
    pub train_acc: f64,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Held-out data scored at the end of every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub dataset: &'a Dataset,
    pub attack: Option<&'a AttackConfig>,
}

/// Keeps the first `floor(ratio·B)` samples clean and replaces the rest with
/// PGD examples that target the model's prediction. Labels are unchanged.
pub fn build_mixed_batch(
    x: &Tensor,
    y: &[usize],
    model: &ModelGraph,
    attack_cfg: &AttackConfig,
    clean_mix_ratio: f64,
    seed: u64,
) -> Result<(Tensor, usize)> {
    if !(0.0..=1.0).contains(&clean_mix_ratio) {
        return Err(Error::invalid(format!("clean_mix_ratio {clean_mix_ratio} outside [0, 1]")));
    }
    let b = y.len();
    let clean = ((clean_mix_ratio * b as f64).floor() as usize).min(b);
    if clean == b {
        return Ok((x.clone(), clean));
    }
    let cfg = attack_cfg.clone().with_target(TargetMode::Prediction);
    assert_eq!(cfg.target_mode, TargetMode::Prediction);
    let tail = x.slice_batch(clean, b)?;
    let adv = attack::pgd(model, &tail, &y[clean..], &cfg, seed)?;
    let mixed = if clean == 0 {
        adv
    } else {
        Tensor::concat_batch(&[&x.slice_batch(0, clean)?, &adv])?
    };
    Ok((mixed, clean))
}

fn augment_batch(x: &mut Tensor, seed: u64, first_index: u64) {
    const PAD: isize = 4;
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2] as isize, s[3] as isize);
    let row = c * (h * w) as usize;
    for (i, img) in x.data_mut().chunks_mut(row).enumerate() {
        let mut rng = seed::stream(seed, "augment", first_index + i as u64);
        let flip = rng.gen_bool(0.5);
        let (dy, dx) = (rng.gen_range(-PAD..=PAD), rng.gen_range(-PAD..=PAD));
        let src = img.to_vec();
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let sy = yy + dy;
                    let mut sx = xx + dx;
                    if flip {
                        sx = w - 1 - sx;
                    }
                    let v = if sy < 0 || sy >= h || sx < 0 || sx >= w {
                        0.0
                    } else {
                        src[ch * (h * w) as usize + (sy * w + sx) as usize]
                    };
                    img[ch * (h * w) as usize + (yy * w + xx) as usize] = v;
                }
            }
        }
    }
}

/// Trains `model` in place; see [`train_monitored`].
pub fn train(model: &mut ModelGraph, dataset: &Dataset, cfg: &TrainConfig, mask: &FreezeMask) -> Result<TrainHistory> {
    train_monitored(model, dataset, cfg, mask, None)
}

pub fn train_monitored(
    model: &mut ModelGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mask: &FreezeMask,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.image_shape() != model.input_shape() {
        return Err(Error::shape(format!(
            "dataset images {:?} do not fit model input {:?}",
            dataset.image_shape(),
            model.input_shape()
        )));
    }
    if dataset.classes() != model.classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, model {}",
            dataset.classes(),
            model.classes()
        )));
    }
    if mask.len() != model.parameters().count() {
        return Err(Error::shape("freeze mask does not match the model's parameters"));
    }
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 || !mask.any_trainable() {
        return Ok(history);
    }
    let mut states: Vec<Option<OptimizerState>> = vec![None; mask.len()];
    let n = dataset.len();
    let batches = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(&cfg.schedule, epoch, cfg.epochs, cfg.optimizer.base_lr())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in 0..batches {
            let (mut x, y) = dataset.batch(&order, b, cfg.batch_size)?;
            if y.len() < 2 {
                continue;
            }
            let batch_key = (epoch * batches + b) as u64;
            if cfg.augment {
                augment_batch(&mut x, cfg.seed, batch_key * cfg.batch_size as u64);
            }
            let clean = if cfg.mode.is_adversarial() {
                let (mixed, clean) = build_mixed_batch(
                    &x,
                    &y,
                    model,
                    &cfg.attack,
                    cfg.clean_mix_ratio,
                    seed::derive_seed(cfg.seed, "train-attack", batch_key),
                )?;
                x = mixed;
                clean
            } else {
                y.len()
            };
            let (loss, hits) = step(model, &x, &y, clean, cfg, mask, &mut states, lr)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b, lr });
            }
            loss_sum += loss * y.len() as f64;
            correct += hits;
            seen += y.len();
        }
        let (clean_acc, robust_acc) = match monitor {
            Some(m) => {
                let eval_attack = m.attack.cloned().unwrap_or_else(|| AttackConfig::pgd_eval(0.0, 1.0, 1));
                let r = attack::evaluate(model, m.dataset, &eval_attack, 256, seed::derive_seed(cfg.seed, "monitor", epoch as u64))?;
                (Some(r.clean_acc), m.attack.map(|_| r.robust_acc))
            }
            None => (None, None),
        };
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            clean_acc,
            robust_acc,
        });
    }
    Ok(history)
}

/// One optimizer step on a (possibly mixed) batch; returns the mean loss and
/// the number of correctly classified samples.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut ModelGraph,
    x: &Tensor,
    y: &[usize],
    clean: usize,
    cfg: &TrainConfig,
    mask: &FreezeMask,
    states: &mut [Option<OptimizerState>],
    lr: f64,
) -> Result<(f64, usize)> {
    let b = y.len();
    // Split normalization only applies to genuinely mixed batches whose
    // parts are each large enough for batch statistics.
    let parts: Vec<(usize, usize)> = if !cfg.joint_batch_norm && clean >= 2 && b - clean >= 2 {
        vec![(0, clean), (clean, b)]
    } else {
        vec![(0, b)]
    };
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; mask.len()];
    let mut loss_total = 0.0;
    let mut hits = 0;
    let mut updates = Vec::new();
    for &(lo, hi) in &parts {
        let xs = if parts.len() == 1 { x.clone() } else { x.slice_batch(lo, hi)? };
        let weight = (hi - lo) as f64 / b as f64;
        let mut tape = Tape::new();
        let xv = tape.constant(xs);
        let fp = model.forward(&mut tape, xv, Mode::Train, Some(mask))?;
        let preds = argmax_rows(tape.value(fp.logits))?;
        hits += preds.iter().zip(&y[lo..hi]).filter(|(p, t)| p == t).count();
        let loss = tape.softmax_cross_entropy(fp.logits, &y[lo..hi])?;
        let lv = tape.value(loss).data()[0];
        loss_total += weight * lv;
        if !lv.is_finite() {
            return Ok((lv, hits));
        }
        tape.backward(loss)?;
        let mut flat = 0;
        for layer_params in &fp.params {
            for &pv in layer_params {
                if mask.is_trainable(flat) {
                    if let Some(g) = tape.take_grad(pv) {
                        match &mut grads[flat] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += weight * v),
                            slot => *slot = Some(g.iter().map(|v| weight * v).collect()),
                        }
                    }
                }
                flat += 1;
            }
        }
        updates.extend(fp.bn_updates);
    }
    let mut flat = 0;
    for layer in model.layers_mut() {
        for p in layer.params.iter_mut() {
            if let Some(g) = &grads[flat] {
                let state = states[flat].get_or_insert_with(|| OptimizerState::new(&cfg.optimizer, p.numel()));
                state.step(&cfg.optimizer, p.data_mut(), g, lr, cfg.weight_decay)?;
            }
            flat += 1;
        }
    }
    model.apply_bn_updates(&updates);
    Ok((loss_total, hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::build_mini_resnet;

    fn quick_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            optimizer: OptimizerConfig::Adam { lr: 0.01 },
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 1,
            schedule: Schedule::Constant,
            clean_mix_ratio: 0.5,
            attack: AttackConfig {
                iterations: 2,
                ..AttackConfig::madry_training()
            },
            seed: 3,
            augment: false,
            joint_batch_norm: true,
        }
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let data = make_synthetic(10, 4, 32, 0).unwrap();
        let mut m = build_mini_resnet([1, 32, 32], 10, 1, 4, 0).unwrap();
        let before = m.clone();
        let mut cfg = quick_cfg(TrainMode::Conventional);
        cfg.epochs = 0;
        let mask = FreezeMask::all_trainable(&m);
        let h = train(&mut m, &data, &cfg, &mask).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn mixed_batch_split_counts() {
        let data = make_synthetic(10, 13, 32, 0).unwrap();
        let m = build_mini_resnet([1, 32, 32], 10, 1, 4, 0).unwrap();
        let x = data.images.slice_batch(0, 128).unwrap();
        let y = &data.labels[..128];
        let cfg = AttackConfig {
            iterations: 1,
            ..AttackConfig::madry_training()
        };
        let (mixed, clean) = build_mixed_batch(&x, y, &m, &cfg, 0.5, 1).unwrap();
        assert_eq!(clean, 64);
        assert_eq!(mixed.slice_batch(0, 64).unwrap(), x.slice_batch(0, 64).unwrap());
        let row = 1024;
        let changed = (64..128)
            .filter(|&i| mixed.data()[i * row..(i + 1) * row] != x.data()[i * row..(i + 1) * row])
            .count();
        assert_eq!(changed, 64);
        let (all_clean, c) = build_mixed_batch(&x, y, &m, &cfg, 1.0, 1).unwrap();
        assert_eq!(c, 128);
        assert!(all_clean.bit_eq(&x));
        let (all_adv, c) = build_mixed_batch(&x, y, &m, &cfg, 0.0, 1).unwrap();
        assert_eq!(c, 0);
        for (a, b) in all_adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= cfg.epsilon + 1e-12 && (0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn fast_mode_requires_single_random_start_step() {
        let mut cfg = quick_cfg(TrainMode::FastAdversarial);
        assert!(cfg.validate().is_err());
        cfg.attack = AttackConfig::fast(8.0 / 255.0, 10.0 / 255.0);
        cfg.validate().unwrap();
        cfg.attack.random_start = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nan_learning_rate_aborts_with_diagnostic() {
        let data = make_synthetic(10, 4, 32, 0).unwrap();
        let mut m = build_mini_resnet([1, 32, 32], 10, 1, 4, 0).unwrap();
        let mut cfg = quick_cfg(TrainMode::Conventional);
        cfg.optimizer = OptimizerConfig::SgdMomentum { lr: 1e300, momentum: 0.9 };
        cfg.epochs = 3;
        let mask = FreezeMask::all_trainable(&m);
        let err = train(&mut m, &data, &cfg, &mask).unwrap_err();
        assert!(matches!(err, Error::NanLoss { .. }), "{err}");
    }

    #[test]
    fn reproducible_runs_are_bit_identical() {
        let data = make_synthetic(10, 4, 32, 0).unwrap();
        let run = || {
            let mut m = build_mini_resnet([1, 32, 32], 10, 1, 4, 0).unwrap();
            let mask = FreezeMask::all_trainable(&m);
            train(&mut m, &data, &quick_cfg(TrainMode::Adversarial), &mask).unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
