//! L∞-bounded attacks (FGSM, PGD-k with random start and restarts) and
//! clean/robust accuracy evaluation.
//!
//! Attack gradients are taken in eval mode, so batch norm uses running
//! statistics and samples in a batch never influence each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Mode};
use crate::seed;
use crate::tensor::{argmax_rows, cross_entropy_per_sample, Tape, Tensor};

/// Which label the attack pushes the loss away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The ground-truth label; used for evaluation.
    TrueLabel,
    /// The model's own clean prediction; used during training to avoid
    /// label leaking.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget in [0, 1] pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub target_mode: TargetMode,
    pub restarts: usize,
}

impl AttackConfig {
    /// PGD-7 training attack: ε = 8/255, step 2/255, random start,
    /// targeting the model's prediction.
    pub fn madry_training() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 7,
            random_start: true,
            target_mode: TargetMode::Prediction,
            restarts: 1,
        }
    }

    /// PGD-k evaluation attack with one restart against the true label.
    pub fn pgd_eval(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            step_size,
            iterations,
            random_start: true,
            target_mode: TargetMode::TrueLabel,
            restarts: 1,
        }
    }

    /// Single random-start step (PGD-1), as used by fast adversarial training.
    pub fn fast(epsilon: f64, step_size: f64) -> Self {
        Self {
            epsilon,
            step_size,
            iterations: 1,
            random_start: true,
            target_mode: TargetMode::Prediction,
            restarts: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("attack iterations must be positive"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step size {} must be positive", self.step_size)));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("attack restarts must be positive"));
        }
        Ok(())
    }

    pub fn with_target(mut self, target_mode: TargetMode) -> Self {
        self.target_mode = target_mode;
        self
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pixels(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::invalid("attack input must lie in [0, 1]"))
    }
}

/// Labels the attack ascends the loss of.
pub fn attack_targets(model: &ModelGraph, x: &Tensor, y: &[usize], mode: TargetMode) -> Result<Vec<usize>> {
    match mode {
        TargetMode::TrueLabel => Ok(y.to_vec()),
        TargetMode::Prediction => argmax_rows(&model.predict(x)?),
    }
}

/// Eval-mode input gradient of the batch-mean cross-entropy, plus the
/// per-sample losses at `x`.
pub fn input_gradient(model: &ModelGraph, x: &Tensor, targets: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let fp = model.forward(&mut tape, xv, Mode::Eval, None)?;
    let losses = cross_entropy_per_sample(tape.value(fp.logits), targets)?;
    let loss = tape.softmax_cross_entropy(fp.logits, targets)?;
    tape.backward(loss)?;
    let grad = tape.take_grad(xv).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((grad, losses))
}

/// Fast gradient sign method: `clamp(x + ε·sign(∇ₓL), 0, 1)`.
pub fn fgsm(model: &ModelGraph, x: &Tensor, y: &[usize], epsilon: f64, target_mode: TargetMode) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} must be non-negative")));
    }
    check_pixels(x)?;
    let targets = attack_targets(model, x, y, target_mode)?;
    let (grad, _) = input_gradient(model, x, &targets)?;
    let mut adv = x.clone();
    for (v, g) in adv.data_mut().iter_mut().zip(&grad) {
        *v = (*v + epsilon * sign(*g)).clamp(0.0, 1.0);
    }
    Ok(adv)
}

/// Projected gradient descent under an L∞ budget.
///
/// Each restart optionally starts from a uniform point in the ε-ball, then
/// takes `iterations` signed-gradient steps, each followed by projection
/// onto the ball around `x` and clamping to [0, 1]. Per sample, the
/// returned point is the highest-loss iterate over all steps and restarts
/// (the first one, on ties). The random start of sample `i` in restart `r`
/// draws from the stream `(seed, "pgd-start", r·2³² + i)`.
pub fn pgd(model: &ModelGraph, x: &Tensor, y: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    Ok(pgd_with_losses(model, x, y, cfg, seed)?.0)
}

/// [`pgd`] that also reports the per-sample loss of the returned point.
pub fn pgd_with_losses(
    model: &ModelGraph,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    check_pixels(x)?;
    let n = x.shape()[0];
    if y.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", y.len())));
    }
    let targets = attack_targets(model, x, y, cfg.target_mode)?;
    if cfg.epsilon == 0.0 {
        let losses = cross_entropy_per_sample(&model.predict(x)?, &targets)?;
        return Ok((x.clone(), losses));
    }
    let row = x.numel() / n;
    let eps = cfg.epsilon;
    let mut best = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    for restart in 0..cfg.restarts {
        let mut cur = x.clone();
        if cfg.random_start {
            for (i, sample) in cur.data_mut().chunks_mut(row).enumerate() {
                let mut rng = seed::stream(seed, "pgd-start", ((restart as u64) << 32) | i as u64);
                for v in sample.iter_mut() {
                    *v = (*v + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
                }
            }
        }
        for it in 0..cfg.iterations {
            let (grad, losses) = input_gradient(model, &cur, &targets)?;
            // `losses` scores the iterate produced by the previous step.
            if it > 0 {
                keep_best(&cur, &losses, &mut best, &mut best_loss, row);
            }
            for ((v, g), x0) in cur.data_mut().iter_mut().zip(&grad).zip(x.data()) {
                let stepped = *v + cfg.step_size * sign(*g);
                *v = stepped.min(x0 + eps).max(x0 - eps).clamp(0.0, 1.0);
            }
        }
        let losses = cross_entropy_per_sample(&model.predict(&cur)?, &targets)?;
        keep_best(&cur, &losses, &mut best, &mut best_loss, row);
    }
    Ok((best, best_loss))
}

fn keep_best(cur: &Tensor, losses: &[f64], best: &mut Tensor, best_loss: &mut [f64], row: usize) {
    for (i, &l) in losses.iter().enumerate() {
        if l > best_loss[i] {
            best_loss[i] = l;
            best.data_mut()[i * row..(i + 1) * row].copy_from_slice(&cur.data()[i * row..(i + 1) * row]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub samples: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub per_class_acc: Vec<ClassAccuracy>,
}

/// Clean and attacked accuracy over `dataset`, in batches of `batch_size`.
/// The attack always targets the true label here, whatever `cfg` says.
pub fn evaluate(
    model: &ModelGraph,
    dataset: &Dataset,
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let cfg = cfg.clone().with_target(TargetMode::TrueLabel);
    cfg.validate()?;
    assert_eq!(cfg.target_mode, TargetMode::TrueLabel);
    let k = dataset.classes();
    let mut count = vec![0usize; k];
    let mut clean = vec![0usize; k];
    let mut robust = vec![0usize; k];
    let order: Vec<usize> = (0..dataset.len()).collect();
    for b in 0..dataset.len().div_ceil(batch_size) {
        let (x, y) = dataset.batch(&order, b, batch_size)?;
        let clean_pred = argmax_rows(&model.predict(&x)?)?;
        let adv = pgd(model, &x, &y, &cfg, seed::derive_seed(seed, "eval-batch", b as u64))?;
        let adv_pred = if cfg.epsilon == 0.0 {
            clean_pred.clone()
        } else {
            argmax_rows(&model.predict(&adv)?)?
        };
        for i in 0..y.len() {
            count[y[i]] += 1;
            clean[y[i]] += usize::from(clean_pred[i] == y[i]);
            robust[y[i]] += usize::from(adv_pred[i] == y[i]);
        }
    }
    let total = dataset.len() as f64;
    Ok(RobustnessReport {
        samples: dataset.len(),
        clean_acc: clean.iter().sum::<usize>() as f64 / total,
        robust_acc: robust.iter().sum::<usize>() as f64 / total,
        per_class_acc: (0..k)
            .map(|c| ClassAccuracy {
                class: c,
                count: count[c],
                clean_acc: if count[c] > 0 { clean[c] as f64 / count[c] as f64 } else { 0.0 },
                robust_acc: if count[c] > 0 { robust[c] as f64 / count[c] as f64 } else { 0.0 },
            })
            .collect(),
    })
}
