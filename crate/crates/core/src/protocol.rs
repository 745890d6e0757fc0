//! Experiment drivers: cut-off retraining at segment or layer granularity,
//! retraining of arbitrary segment subsets with median aggregation, and
//! single-layer reinitialization sweeps.
//!
//! Every retraining run starts from a private copy of the pretrained model,
//! reinitializes the retrained part (unless warm-started), freezes the rest,
//! trains, then verifies that the frozen part is still bit-identical to the
//! pretrained weights before evaluating.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, ModelGraph};
use crate::seed;
use crate::train::{train, TrainConfig, TrainMode};

/// Largest segment count [`run_combination_sweep`] accepts (255 runs).
pub const MAX_SWEEP_SEGMENTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Everything from the input up to and including the cut-off.
    UpTo,
    /// Everything strictly after the cut-off.
    After,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::UpTo => "up_to",
            Direction::After => "after",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up_to" | "up-to" | "upto" => Ok(Direction::UpTo),
            "after" => Ok(Direction::After),
            _ => Err(Error::invalid(format!("unknown direction {s:?} (expected up_to or after)"))),
        }
    }
}

/// Whether retrained layers restart from fresh weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Reinitialize,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainTarget {
    Segments(BTreeSet<String>),
    Layers(BTreeSet<usize>),
}

impl RetrainTarget {
    pub fn is_empty(&self) -> bool {
        match self {
            RetrainTarget::Segments(s) => s.is_empty(),
            RetrainTarget::Layers(l) => l.is_empty(),
        }
    }

    fn layer_set(&self, model: &ModelGraph) -> Result<BTreeSet<usize>> {
        match self {
            RetrainTarget::Segments(names) => {
                let mut set = BTreeSet::new();
                for n in names {
                    set.extend(model.segmentation().get(n)?.layers.clone());
                }
                Ok(set)
            }
            RetrainTarget::Layers(layers) => {
                if let Some(&bad) = layers.iter().find(|&&i| i >= model.layers().len()) {
                    return Err(Error::invalid(format!("layer index {bad} out of range")));
                }
                Ok(layers.clone())
            }
        }
    }
}

/// A pretrained model together with how it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub id: String,
    pub mode: TrainMode,
    pub model: ModelGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainPlan {
    pub pretrained_checkpoint_id: String,
    pub pretrain_mode: TrainMode,
    /// Empty for a pure evaluation of the pretrained model.
    pub retrain: RetrainTarget,
    pub retrain_mode: TrainMode,
    pub train_cfg: TrainConfig,
    #[serde(default)]
    pub init: InitPolicy,
    /// Short human-readable tag, e.g. `up_to:m_1`.
    pub label: String,
}

/// Data and evaluation attack shared by all runs of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentContext<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub eval_attack: &'a AttackConfig,
    pub eval_batch: usize,
    /// Seed of the evaluation attack's random starts.
    pub eval_seed: u64,
}

impl ExperimentContext<'_> {
    pub fn evaluate(&self, model: &ModelGraph) -> Result<(f64, f64)> {
        let r = evaluate(model, self.test, self.eval_attack, self.eval_batch, self.eval_seed)?;
        Ok((r.clean_acc, r.robust_acc))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFlag {
    pub segment: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub plan: String,
    pub pretrained: String,
    pub pretrain_mode: TrainMode,
    pub retrain_mode: TrainMode,
    /// Segments with at least one retrained layer, in network order.
    pub segments: Vec<SegmentFlag>,
    pub retrained_layers: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub wall_time_s: f64,
    pub seed: u64,
}

impl ExperimentReport {
    pub fn retrained_segments(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|f| f.trainable)
            .map(|f| f.segment.as_str())
            .collect()
    }

    /// Whether every reported value except wall time agrees exactly.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| ExperimentReport {
            wall_time_s: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} ({} → {}): clean {:.4}, robust {:.4}",
            self.experiment,
            self.plan,
            self.pretrain_mode.as_str(),
            self.retrain_mode.as_str(),
            self.clean_acc,
            self.robust_acc
        )
    }
}

/// Runs one plan, returning its report and the retrained model.
pub fn run_plan(
    pretrained: &Pretrained,
    plan: &RetrainPlan,
    ctx: &ExperimentContext<'_>,
    experiment: &str,
) -> Result<(ExperimentReport, ModelGraph)> {
    let start = Instant::now();
    let base = &pretrained.model;
    let layers = plan.retrain.layer_set(base)?;
    let mut model = base.clone();
    if !layers.is_empty() {
        let idx: Vec<usize> = layers.iter().copied().collect();
        if plan.init == InitPolicy::Reinitialize {
            model.reinit_layers(&idx, plan.train_cfg.seed);
        }
        let mask = FreezeMask::from_layer_set(&model, &layers)?;
        let cfg = TrainConfig {
            mode: plan.retrain_mode,
            ..plan.train_cfg.clone()
        };
        train(&mut model, ctx.train, &cfg, &mask)?;
        for i in (0..base.layers().len()).filter(|i| !layers.contains(i)) {
            if model.layers_digest(i..i + 1) != base.layers_digest(i..i + 1) {
                return Err(Error::invalid(format!(
                    "frozen layer {} changed during retraining",
                    base.layers()[i].name
                )));
            }
        }
    }
    let (clean_acc, robust_acc) = ctx.evaluate(&model)?;
    let segments = base
        .segmentation()
        .segments()
        .iter()
        .map(|s| SegmentFlag {
            segment: s.name.clone(),
            trainable: s.layers.clone().any(|i| layers.contains(&i)),
        })
        .collect();
    let report = ExperimentReport {
        experiment: experiment.to_string(),
        plan: plan.label.clone(),
        pretrained: plan.pretrained_checkpoint_id.clone(),
        pretrain_mode: plan.pretrain_mode,
        retrain_mode: plan.retrain_mode,
        segments,
        retrained_layers: layers.len(),
        clean_acc,
        robust_acc,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: plan.train_cfg.seed,
    };
    Ok((report, model))
}

/// Segments retrained by a cut-off at `cutoff` in `direction`.
pub fn cutoff_segments(model: &ModelGraph, cutoff: &str, direction: Direction) -> Result<BTreeSet<String>> {
    let seg = model.segmentation();
    let pos = seg.position(cutoff)?;
    let names = seg.names();
    let chosen = match direction {
        Direction::UpTo => &names[..=pos],
        Direction::After => &names[pos + 1..],
    };
    Ok(chosen.iter().map(|s| s.to_string()).collect())
}

fn plan(
    pretrained: &Pretrained,
    retrain: RetrainTarget,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    label: String,
) -> RetrainPlan {
    RetrainPlan {
        pretrained_checkpoint_id: pretrained.id.clone(),
        pretrain_mode: pretrained.mode,
        retrain,
        retrain_mode,
        train_cfg: cfg.clone(),
        init: InitPolicy::Reinitialize,
        label,
    }
}

pub fn cutoff_plan(
    pretrained: &Pretrained,
    cutoff: &str,
    direction: Direction,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
) -> Result<RetrainPlan> {
    let segments = cutoff_segments(&pretrained.model, cutoff, direction)?;
    Ok(plan(
        pretrained,
        RetrainTarget::Segments(segments),
        retrain_mode,
        cfg,
        format!("{}:{cutoff}", direction.as_str()),
    ))
}

/// Retrains the segments before (and including) or after `cutoff`.
/// `After m_fc` retrains nothing and reduces to evaluating the pretrained
/// model; `UpTo m_fc` retrains everything.
pub fn run_cutoff(
    pretrained: &Pretrained,
    cutoff: &str,
    direction: Direction,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    ctx: &ExperimentContext<'_>,
) -> Result<ExperimentReport> {
    let p = cutoff_plan(pretrained, cutoff, direction, retrain_mode, cfg)?;
    Ok(run_plan(pretrained, &p, ctx, "cutoff")?.0)
}

/// Every cut-off in both directions, in segment order (UpTo before After).
pub fn run_cutoff_sweep(
    pretrained: &Pretrained,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    ctx: &ExperimentContext<'_>,
) -> Result<Vec<ExperimentReport>> {
    let mut plans = Vec::new();
    for name in pretrained.model.segmentation().names() {
        for dir in [Direction::UpTo, Direction::After] {
            plans.push(cutoff_plan(pretrained, name, dir, retrain_mode, cfg)?);
        }
    }
    run_plans(pretrained, &plans, ctx, "cutoff")
}

fn run_plans(
    pretrained: &Pretrained,
    plans: &[RetrainPlan],
    ctx: &ExperimentContext<'_>,
    experiment: &str,
) -> Result<Vec<ExperimentReport>> {
    plans
        .par_iter()
        .map(|p| run_plan(pretrained, p, ctx, experiment).map(|(r, _)| r))
        .collect()
}

/// Non-empty segment subsets in binary counting order: subset `k` (1-based)
/// contains segment `i` iff bit `i` of `k` is set.
pub fn enumerate_subsets(names: &[&str]) -> Result<Vec<BTreeSet<String>>> {
    let n = names.len();
    if n > MAX_SWEEP_SEGMENTS {
        return Err(Error::SweepBudget {
            segments: n,
            required: (1usize << n) - 1,
        });
    }
    Ok((1..1usize << n)
        .map(|k| {
            (0..n)
                .filter(|i| k >> i & 1 == 1)
                .map(|i| names[i].to_string())
                .collect()
        })
        .collect())
}

fn subset_label(model: &ModelGraph, set: &BTreeSet<String>) -> String {
    let names = model.segmentation().names();
    let ordered: Vec<&str> = names.into_iter().filter(|n| set.contains(*n)).collect();
    ordered.join("+")
}

/// Retrains every non-empty subset of segments (2ⁿ − 1 runs).
pub fn run_combination_sweep(
    pretrained: &Pretrained,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    ctx: &ExperimentContext<'_>,
) -> Result<Vec<ExperimentReport>> {
    let model = &pretrained.model;
    let plans: Vec<RetrainPlan> = enumerate_subsets(&model.segmentation().names())?
        .into_iter()
        .map(|set| {
            let label = subset_label(model, &set);
            plan(pretrained, RetrainTarget::Segments(set), retrain_mode, cfg, label)
        })
        .collect();
    run_plans(pretrained, &plans, ctx, "combination")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianPair {
    pub count: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSummary {
    pub segment: String,
    pub with: MedianPair,
    pub without: MedianPair,
}

/// Median with the midpoint rule for even counts. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Medians of clean and robust accuracy over reports that did and did not
/// retrain `segment`.
pub fn aggregate_median(reports: &[ExperimentReport], segment: &str) -> Result<MedianSummary> {
    let (with, without): (Vec<&ExperimentReport>, Vec<&ExperimentReport>) = reports
        .iter()
        .partition(|r| r.segments.iter().any(|f| f.trainable && f.segment == segment));
    let pair = |part: &[&ExperimentReport], which: &str| -> Result<MedianPair> {
        let clean: Vec<f64> = part.iter().map(|r| r.clean_acc).collect();
        let robust: Vec<f64> = part.iter().map(|r| r.robust_acc).collect();
        match (median(&clean), median(&robust)) {
            (Some(c), Some(r)) => Ok(MedianPair {
                count: part.len(),
                clean_acc: c,
                robust_acc: r,
            }),
            _ => Err(Error::invalid(format!("no reports {which} segment {segment}"))),
        }
    };
    Ok(MedianSummary {
        segment: segment.to_string(),
        with: pair(&with, "with")?,
        without: pair(&without, "without")?,
    })
}

pub fn layer_cutoff_plan(
    pretrained: &Pretrained,
    layer: usize,
    direction: Direction,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
) -> Result<RetrainPlan> {
    let model = &pretrained.model;
    let l = model
        .layers()
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer index {layer} out of range")))?;
    if !l.kind.is_parameterized() {
        return Err(Error::invalid(format!("layer {layer} ({}) has no parameters", l.name)));
    }
    let n = model.layers().len();
    let layers: BTreeSet<usize> = match direction {
        Direction::UpTo => (0..=layer).collect(),
        Direction::After => (layer + 1..n).collect(),
    };
    Ok(plan(
        pretrained,
        RetrainTarget::Layers(layers),
        retrain_mode,
        cfg,
        format!("{}:{}", direction.as_str(), l.name),
    ))
}

/// Cut-off at layer granularity; `layer` must carry parameters.
pub fn run_layer_cutoff(
    pretrained: &Pretrained,
    layer: usize,
    direction: Direction,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    ctx: &ExperimentContext<'_>,
) -> Result<ExperimentReport> {
    let p = layer_cutoff_plan(pretrained, layer, direction, retrain_mode, cfg)?;
    Ok(run_plan(pretrained, &p, ctx, "layer_cutoff")?.0)
}

/// Layer cut-offs at every parameterized layer in `direction`.
pub fn run_layer_sweep(
    pretrained: &Pretrained,
    direction: Direction,
    retrain_mode: TrainMode,
    cfg: &TrainConfig,
    ctx: &ExperimentContext<'_>,
) -> Result<Vec<ExperimentReport>> {
    let plans = pretrained
        .model
        .parameterized_layers()
        .into_iter()
        .map(|i| layer_cutoff_plan(pretrained, i, direction, retrain_mode, cfg))
        .collect::<Result<Vec<_>>>()?;
    run_plans(pretrained, &plans, ctx, "layer_cutoff")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinitEntry {
    /// `None` for the unmodified model.
    pub layer: Option<usize>,
    pub name: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Resets one parameterized layer at a time to fresh weights and evaluates
/// without retraining. The first entry (`none`) is the untouched model.
pub fn reinit_robustness_sweep(model: &ModelGraph, ctx: &ExperimentContext<'_>, seed: u64) -> Result<Vec<ReinitEntry>> {
    let (clean_acc, robust_acc) = ctx.evaluate(model)?;
    let mut entries = vec![ReinitEntry {
        layer: None,
        name: "none".into(),
        clean_acc,
        robust_acc,
    }];
    let mut work = model.clone();
    for i in model.parameterized_layers() {
        let original = reinit_in_place(&mut work, i, seed::derive_seed(seed, "reinit-sweep", i as u64));
        let (clean_acc, robust_acc) = ctx.evaluate(&work)?;
        restore_layer(&mut work, i, original);
        entries.push(ReinitEntry {
            layer: Some(i),
            name: model.layers()[i].name.clone(),
            clean_acc,
            robust_acc,
        });
    }
    debug_assert_eq!(&work, model);
    Ok(entries)
}

/// Swaps a freshly initialized copy of layer `i` into `model`, returning the
/// original so it can be put back with [`restore_layer`].
pub fn reinit_in_place(model: &mut ModelGraph, i: usize, seed: u64) -> crate::model::Layer {
    let original = model.layers()[i].clone();
    model.reinit_layers(&[i], seed);
    original
}

pub fn restore_layer(model: &mut ModelGraph, i: usize, original: crate::model::Layer) {
    model.layers_mut()[i] = original;
}
