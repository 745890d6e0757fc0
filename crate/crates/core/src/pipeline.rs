//! Manifest-driven runs shared by the command-line tool and tests. Every
//! stochastic stage draws its seed from the manifest's root seed and a
//! fixed purpose tag.

use serde::{Deserialize, Serialize};

use crate::analysis::{embed_by_segment, harvest, resolve_probe, ActivationSample, EmbedConfig, EmbeddingResult};
use crate::attack::{evaluate, RobustnessReport};
use crate::data::Dataset;
use crate::error::Result;
use crate::io::{load_dataset, ExperimentManifest, Provenance};
use crate::model::{FreezeMask, ModelGraph};
use crate::protocol::{cutoff_plan, run_plan, ExperimentContext, ExperimentReport, Pretrained};
use crate::seed::derive_seed;
use crate::train::{train, TrainConfig, TrainHistory, TrainMode};

pub struct Workspace {
    pub manifest: ExperimentManifest,
    pub train: Dataset,
    pub test: Dataset,
}

fn mode_index(mode: TrainMode) -> u64 {
    match mode {
        TrainMode::Conventional => 0,
        TrainMode::Adversarial => 1,
        TrainMode::FastAdversarial => 2,
    }
}

impl Workspace {
    pub fn load(manifest: ExperimentManifest) -> Result<Self> {
        let (train, test) = load_dataset(&manifest.dataset, manifest.seed)?;
        Ok(Self { manifest, train, test })
    }

    pub fn seed(&self, purpose: &str) -> u64 {
        derive_seed(self.manifest.seed, purpose, 0)
    }

    pub fn pretrain_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            seed: derive_seed(self.manifest.seed, "pretrain", mode_index(mode)),
            ..self.manifest.pretrain.clone()
        }
    }

    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed("retrain"),
            ..self.manifest.retrain.clone()
        }
    }

    pub fn context(&self) -> ExperimentContext<'_> {
        ExperimentContext {
            train: &self.train,
            test: &self.test,
            eval_attack: &self.manifest.evaluation.attack,
            eval_batch: self.manifest.evaluation.batch_size,
            eval_seed: self.seed("eval"),
        }
    }

    pub fn pretrained_id(&self, mode: TrainMode) -> String {
        format!("{}-{}", self.manifest.name, mode.as_str())
    }

    /// Fresh model trained from scratch in `mode`.
    pub fn pretrain(&self, mode: TrainMode) -> Result<(Pretrained, TrainHistory, Provenance)> {
        let cfg = self.pretrain_config(mode);
        let mut model = self.manifest.architecture.build(self.seed("init"))?;
        let mask = FreezeMask::all_trainable(&model);
        let history = train(&mut model, &self.train, &cfg, &mask)?;
        let pretrained = Pretrained {
            id: self.pretrained_id(mode),
            mode,
            model,
        };
        Ok((pretrained, history, Provenance::from_config(&cfg)))
    }

    /// The manifest's cut-off grid: retrain modes × cut-offs × directions.
    pub fn cutoff_sweep(&self, pretrained: &Pretrained) -> Result<Vec<ExperimentReport>> {
        let spec = &self.manifest.cutoff;
        let names: Vec<String> = if spec.segments.is_empty() {
            pretrained.model.segmentation().names().iter().map(|s| s.to_string()).collect()
        } else {
            spec.segments.clone()
        };
        let cfg = self.retrain_config();
        let ctx = self.context();
        let mut reports = Vec::new();
        for &mode in &spec.retrain_modes {
            for name in &names {
                for &dir in &spec.directions {
                    let plan = cutoff_plan(pretrained, name, dir, mode, &cfg)?;
                    reports.push(run_plan(pretrained, &plan, &ctx, "cutoff")?.0);
                }
            }
        }
        Ok(reports)
    }

    pub fn attack_eval(&self, model: &ModelGraph) -> Result<RobustnessReport> {
        let e = &self.manifest.evaluation;
        evaluate(model, &self.test, &e.attack, e.batch_size, self.seed("eval"))
    }

    /// Test images used for feature analysis (class-balanced).
    pub fn analysis_images(&self) -> Result<Dataset> {
        let n = self.manifest.analysis.images.min(self.test.len());
        self.test.stratified_subset(n, self.seed("analysis-images"))
    }

    /// Clean and attacked channel vectors at every configured probe;
    /// positions per image are capped at each probe's spatial extent.
    pub fn harvest(&self, model: &ModelGraph) -> Result<Vec<ActivationSample>> {
        let a = &self.manifest.analysis;
        let images = self.analysis_images()?;
        let mut out = Vec::new();
        for probe in &a.probes {
            let layer = resolve_probe(model, probe)?;
            let shape = &model.layers()[layer].out_shape;
            let extent = shape.iter().skip(1).product::<usize>().max(1);
            out.extend(harvest(
                model,
                &images.images,
                &images.labels,
                &[probe.as_str()],
                a.positions_per_image.min(extent),
                Some(&self.manifest.evaluation.attack),
                self.seed("harvest"),
            )?);
        }
        Ok(out)
    }

    pub fn embed_config(&self) -> EmbedConfig {
        let mut cfg = self.manifest.analysis.embed.clone();
        cfg.tsne.seed = self.seed("tsne");
        cfg
    }

    pub fn embed(&self, samples: &[ActivationSample]) -> Result<Vec<EmbeddingResult>> {
        embed_by_segment(samples, &self.embed_config())
    }
}

/// Divergence summary of one embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub model: String,
    pub segment: String,
    pub samples: usize,
    pub kl: f64,
    pub js_divergence: f64,
}

pub struct PipelineOutput {
    pub pretrained: Pretrained,
    pub provenance: Provenance,
    pub history: TrainHistory,
    pub reports: Vec<ExperimentReport>,
    pub divergences: Vec<DivergenceRow>,
}

/// Pretrain in the manifest's mode, run the cut-off grid, then embed the
/// pretrained model's features.
pub fn run_pipeline(ws: &Workspace) -> Result<PipelineOutput> {
    let (pretrained, history, provenance) = ws.pretrain(ws.manifest.pretrain.mode)?;
    let reports = ws.cutoff_sweep(&pretrained)?;
    let samples = ws.harvest(&pretrained.model)?;
    let divergences = ws
        .embed(&samples)?
        .into_iter()
        .map(|e| DivergenceRow {
            model: pretrained.id.clone(),
            segment: e.segment.clone(),
            samples: e.coords.len(),
            kl: e.kl,
            js_divergence: e.divergence.unwrap_or(0.0),
        })
        .collect();
    Ok(PipelineOutput {
        pretrained,
        provenance,
        history,
        reports,
        divergences,
    })
}
