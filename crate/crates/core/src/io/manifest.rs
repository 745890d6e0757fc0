//! TOML experiment manifests. Unknown keys are rejected and every error
//! names the offending key path (e.g. `pretrain.epochs`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::EmbedConfig;
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::protocol::Direction;
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        path: PathBuf,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    /// Directory with the standard `{train,t10k}-{images-idx3,labels-idx1}-ubyte` files.
    Mnist {
        path: PathBuf,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
        #[serde(default = "default_pad")]
        pad_to: usize,
    },
    Synthetic {
        classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        image_size: usize,
    },
}

fn default_pad() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub attack: AttackConfig,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffSpec {
    /// Cut-off segments; empty means every segment.
    pub segments: Vec<String>,
    pub directions: Vec<Direction>,
    pub retrain_modes: Vec<TrainMode>,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self {
            segments: Vec::new(),
            directions: vec![Direction::UpTo, Direction::After],
            retrain_modes: vec![TrainMode::Adversarial],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Segment or layer names to read activations from.
    pub probes: Vec<String>,
    /// Capped per probe at the probe's spatial extent.
    pub positions_per_image: usize,
    /// Test images analysed (first N of a class-balanced subset).
    pub images: usize,
    pub embed: EmbedConfig,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            probes: ["m_1", "m_2", "m_3", "m_4"].map(String::from).to_vec(),
            positions_per_image: 20,
            images: 200,
            embed: EmbedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    /// Root seed; every stochastic stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    pub pretrain: TrainConfig,
    /// Retraining recipe; its mode is set per plan.
    pub retrain: TrainConfig,
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub cutoff: CutoffSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let m: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut path = e.path().to_string();
            let inner = e.inner().message().to_string();
            // Qualify "missing field `x`" with the field itself.
            if let Some(field) = inner.strip_prefix("missing field `").and_then(|s| s.strip_suffix('`')) {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
                return config_err(&path, "required field is missing");
            }
            let span = e
                .inner()
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!(" (line {line})")
                })
                .unwrap_or_default();
            config_err(if path == "." { "manifest" } else { &path }, format!("{inner}{span}"))
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &str, r: Result<()>| r.map_err(|e| config_err(path, e));
        wrap("pretrain", self.pretrain.validate())?;
        wrap("retrain", self.retrain.validate())?;
        wrap("evaluation.attack", self.evaluation.attack.validate())?;
        if self.evaluation.batch_size == 0 {
            return Err(config_err("evaluation.batch_size", "must be positive"));
        }
        let model = self
            .architecture
            .build(0)
            .map_err(|e| config_err("architecture", e))?;
        let seg = model.segmentation();
        for (i, s) in self.cutoff.segments.iter().enumerate() {
            seg.position(s).map_err(|e| config_err(&format!("cutoff.segments[{i}]"), e))?;
        }
        for (i, p) in self.analysis.probes.iter().enumerate() {
            crate::analysis::resolve_probe(&model, p).map_err(|e| config_err(&format!("analysis.probes[{i}]"), e))?;
        }
        if self.analysis.positions_per_image == 0 || self.analysis.images == 0 {
            return Err(config_err("analysis", "positions_per_image and images must be positive"));
        }
        let [c, h, w] = model.input_shape();
        let classes = model.classes();
        let fits = match &self.dataset {
            DatasetSpec::Cifar10 { .. } => (c, h, w, classes) == (3, 32, 32, 10),
            DatasetSpec::Mnist { pad_to, .. } => c == 1 && h == *pad_to && w == *pad_to && classes == 10,
            DatasetSpec::Synthetic {
                classes: k,
                image_size,
                samples_per_class,
                test_samples_per_class,
            } => {
                if *samples_per_class == 0 || *test_samples_per_class == 0 {
                    return Err(config_err("dataset", "sample counts must be positive"));
                }
                c == 1 && h == *image_size && w == *image_size && classes == *k
            }
        };
        if !fits {
            return Err(config_err(
                "architecture",
                format!("input {:?} with {classes} classes does not fit the dataset", model.input_shape()),
            ));
        }
        Ok(())
    }
}
