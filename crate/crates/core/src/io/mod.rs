//! Persistence and configuration: checkpoints, experiment manifests,
//! report tables/documents, and dataset loading from a manifest.

mod checkpoint;
mod manifest;
mod report;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Provenance, FORMAT_VERSION,
    MAGIC,
};
pub use manifest::{AnalysisSpec, CutoffSpec, DatasetSpec, EvaluationSpec, ExperimentManifest};
pub use report::{
    merge_reports, read_json, reports_from_table, reports_table, write_file, write_json, write_reports, Document,
    Table, REPORT_COLUMNS,
};

use crate::data::{load_cifar10, load_mnist_idx, Dataset, Split, SyntheticSpec};
use crate::error::Result;
use crate::seed;

/// Train and test splits described by `spec`; subsets are class-balanced
/// draws seeded from `root_seed`.
pub fn load_dataset(spec: &DatasetSpec, root_seed: u64) -> Result<(Dataset, Dataset)> {
    let subset = |d: Dataset, n: Option<usize>, split: u64| match n {
        Some(n) if n < d.len() => d.stratified_subset(n, seed::derive_seed(root_seed, "subset", split)),
        _ => Ok(d),
    };
    match spec {
        DatasetSpec::Cifar10 {
            path,
            train_subset,
            test_subset,
        } => Ok((
            subset(load_cifar10(path, Split::Train)?, *train_subset, 0)?,
            subset(load_cifar10(path, Split::Test)?, *test_subset, 1)?,
        )),
        DatasetSpec::Mnist {
            path,
            train_subset,
            test_subset,
            pad_to,
        } => {
            let train = load_mnist_idx(
                path.join("train-images-idx3-ubyte"),
                path.join("train-labels-idx1-ubyte"),
                Split::Train,
            )?;
            let test = load_mnist_idx(
                path.join("t10k-images-idx3-ubyte"),
                path.join("t10k-labels-idx1-ubyte"),
                Split::Test,
            )?;
            Ok((
                subset(train, *train_subset, 0)?.zero_pad(*pad_to)?,
                subset(test, *test_subset, 1)?.zero_pad(*pad_to)?,
            ))
        }
        DatasetSpec::Synthetic {
            classes,
            samples_per_class,
            test_samples_per_class,
            image_size,
        } => {
            let s = seed::derive_seed(root_seed, "dataset", 0);
            Ok((
                SyntheticSpec::new(*classes, *samples_per_class, *image_size, s).generate()?,
                SyntheticSpec::new(*classes, *test_samples_per_class, *image_size, s)
                    .with_split(Split::Test)
                    .generate()?,
            ))
        }
    }
}
