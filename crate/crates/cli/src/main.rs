use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layerprobe::analysis::ActivationSample;
use layerprobe::io::{
    load_checkpoint, merge_reports, read_json, save_checkpoint, write_file, write_json, write_reports, Document,
    ExperimentManifest, Table,
};
use layerprobe::pipeline::{DivergenceRow, Workspace};
use layerprobe::protocol::{
    aggregate_median, reinit_robustness_sweep, run_combination_sweep, run_cutoff, run_layer_sweep, Direction,
    ExperimentReport, MedianSummary, Pretrained, ReinitEntry,
};
use layerprobe::train::TrainMode;
use layerprobe::Error;

/// Layer-wise adversarial robustness experiments.
#[derive(Parser)]
#[command(name = "layerprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override pretraining and retraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override ε of every attack (training and evaluation).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output directory (defaults to the manifest's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Conventional,
    Adversarial,
    FastAdversarial,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Conventional => TrainMode::Conventional,
            ModeArg::Adversarial => TrainMode::Adversarial,
            ModeArg::FastAdversarial => TrainMode::FastAdversarial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    UpTo,
    After,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::UpTo => Direction::UpTo,
            DirectionArg::After => Direction::After,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Defaults to the manifest's pretraining mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Retrain everything up to / after one segment.
    RetrainCutoff {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cutoff: String,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value = "adversarial")]
        mode: ModeArg,
    },
    /// Retrain every non-empty subset of segments.
    SweepCombinations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "adversarial")]
        mode: ModeArg,
    },
    /// Cut-offs at every parameterized layer.
    SweepLayers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "up-to")]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value = "adversarial")]
        mode: ModeArg,
    },
    /// Reinitialize one layer at a time and evaluate without retraining.
    ReinitSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Clean and robust accuracy of a checkpoint.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Collect clean/adversarial channel vectors at the analysis probes.
    Harvest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Embed harvested samples and score distribution divergence.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Output of `harvest`.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Merge report documents into one table and document.
    Report {
        #[command(flatten)]
        common: Common,
        /// JSON report documents to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_manifest(c: &Common) -> Result<ExperimentManifest, Failure> {
    let mut m = ExperimentManifest::load(&c.manifest).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e),
        other => other.into(),
    })?;
    if let Some(seed) = c.seed {
        m.seed = seed;
    }
    if let Some(epochs) = c.epochs {
        m.pretrain.epochs = epochs;
        m.retrain.epochs = epochs;
    }
    if let Some(eps) = c.epsilon {
        m.pretrain.attack.epsilon = eps;
        m.retrain.attack.epsilon = eps;
        m.evaluation.attack.epsilon = eps;
    }
    if let Some(out) = &c.out {
        m.output_dir = out.clone();
    }
    m.validate().map_err(Failure::Config)?;
    Ok(m)
}

fn workspace(c: &Common) -> Result<Workspace, Failure> {
    Ok(Workspace::load(load_manifest(c)?)?)
}

fn pretrained_from(path: &Path) -> Result<Pretrained, Failure> {
    let ck = load_checkpoint(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    Ok(Pretrained {
        id,
        mode: ck.provenance.mode,
        model: ck.model,
    })
}

fn emit_reports(out: &Path, stem: &str, reports: &[ExperimentReport]) -> Result<(), Failure> {
    let (tsv, _) = write_reports(out, stem, reports)?;
    for r in reports {
        println!("{r}");
    }
    println!("wrote {}", tsv.display());
    Ok(())
}

fn emit_table(out: &Path, stem: &str, kind: &str, table: &Table, records: &[impl serde::Serialize]) -> Result<(), Failure> {
    let tsv = out.join(format!("{stem}.tsv"));
    write_file(&tsv, &table.to_tsv())?;
    write_json(&out.join(format!("{stem}.json")), kind, records)?;
    print!("{}", table.to_tsv());
    println!("wrote {}", tsv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { common, mode } => {
            let ws = workspace(&common)?;
            let out = ws.manifest.output_dir.clone();
            let mode = mode.map(TrainMode::from).unwrap_or(ws.manifest.pretrain.mode);
            let (pretrained, history, provenance) = ws.pretrain(mode)?;
            let path = out.join(format!("{}.lprb", pretrained.id));
            save_checkpoint(&path, &pretrained.model, &provenance)?;
            let mut t = Table::new(&["epoch", "lr", "train_loss", "train_acc"]);
            for r in &history.records {
                t.push(vec![
                    r.epoch.to_string(),
                    r.lr.to_string(),
                    r.train_loss.to_string(),
                    r.train_acc.to_string(),
                ]);
            }
            emit_table(&out, &format!("{}-history", pretrained.id), "train_history", &t, &history.records)?;
            println!("saved {}", path.display());
        }
        Command::RetrainCutoff {
            common,
            checkpoint,
            cutoff,
            direction,
            mode,
        } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let (dir, mode) = (Direction::from(direction), TrainMode::from(mode));
            let r = run_cutoff(&p, &cutoff, dir, mode, &ws.retrain_config(), &ws.context())?;
            let stem = format!("cutoff-{}-{}-{}-{}", p.id, dir.as_str(), cutoff, mode.as_str());
            emit_reports(&ws.manifest.output_dir, &stem, &[r])?;
        }
        Command::SweepCombinations { common, checkpoint, mode } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let mode = TrainMode::from(mode);
            let reports = run_combination_sweep(&p, mode, &ws.retrain_config(), &ws.context())?;
            let out = &ws.manifest.output_dir;
            emit_reports(out, &format!("combinations-{}-{}", p.id, mode.as_str()), &reports)?;
            let medians = p
                .model
                .segmentation()
                .names()
                .iter()
                .map(|s| aggregate_median(&reports, s))
                .collect::<Result<Vec<MedianSummary>, _>>()?;
            let mut t = Table::new(&[
                "segment",
                "with_count",
                "with_clean_acc",
                "with_robust_acc",
                "without_count",
                "without_clean_acc",
                "without_robust_acc",
            ]);
            for m in &medians {
                t.push(vec![
                    m.segment.clone(),
                    m.with.count.to_string(),
                    m.with.clean_acc.to_string(),
                    m.with.robust_acc.to_string(),
                    m.without.count.to_string(),
                    m.without.clean_acc.to_string(),
                    m.without.robust_acc.to_string(),
                ]);
            }
            emit_table(out, &format!("medians-{}-{}", p.id, mode.as_str()), "median_summary", &t, &medians)?;
        }
        Command::SweepLayers {
            common,
            checkpoint,
            direction,
            mode,
        } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let (dir, mode) = (Direction::from(direction), TrainMode::from(mode));
            let reports = run_layer_sweep(&p, dir, mode, &ws.retrain_config(), &ws.context())?;
            let stem = format!("layers-{}-{}-{}", p.id, dir.as_str(), mode.as_str());
            emit_reports(&ws.manifest.output_dir, &stem, &reports)?;
        }
        Command::ReinitSweep { common, checkpoint } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let entries: Vec<ReinitEntry> = reinit_robustness_sweep(&p.model, &ws.context(), ws.seed("reinit"))?;
            let mut t = Table::new(&["layer", "name", "clean_acc", "robust_acc"]);
            for e in &entries {
                t.push(vec![
                    e.layer.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
                    e.name.clone(),
                    e.clean_acc.to_string(),
                    e.robust_acc.to_string(),
                ]);
            }
            emit_table(&ws.manifest.output_dir, &format!("reinit-{}", p.id), "reinit_sweep", &t, &entries)?;
        }
        Command::AttackEval { common, checkpoint } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let r = ws.attack_eval(&p.model)?;
            let a = &ws.manifest.evaluation.attack;
            let mut t = Table::new(&["checkpoint", "samples", "epsilon", "iterations", "clean_acc", "robust_acc"]);
            t.push(vec![
                p.id.clone(),
                r.samples.to_string(),
                a.epsilon.to_string(),
                a.iterations.to_string(),
                r.clean_acc.to_string(),
                r.robust_acc.to_string(),
            ]);
            emit_table(&ws.manifest.output_dir, &format!("attack-eval-{}", p.id), "robustness", &t, &[r])?;
        }
        Command::Harvest { common, checkpoint } => {
            let ws = workspace(&common)?;
            let p = pretrained_from(&checkpoint)?;
            let samples = ws.harvest(&p.model)?;
            let path = ws.manifest.output_dir.join(format!("samples-{}.json", p.id));
            write_json(&path, "activation_samples", &samples)?;
            println!("{} samples → {}", samples.len(), path.display());
        }
        Command::Embed { common, samples } => {
            let ws = workspace(&common)?;
            let doc: Document<ActivationSample> = read_json(&samples)?;
            let model = samples
                .file_stem()
                .map(|s| s.to_string_lossy().trim_start_matches("samples-").to_string())
                .unwrap_or_default();
            let out = ws.manifest.output_dir.clone();
            let results = ws.embed(&doc.records)?;
            let mut rows = Vec::new();
            for e in &results {
                write_json(&out.join(format!("embedding-{model}-{}.json", e.segment)), "embedding", &[e])?;
                rows.push(DivergenceRow {
                    model: model.clone(),
                    segment: e.segment.clone(),
                    samples: e.coords.len(),
                    kl: e.kl,
                    js_divergence: e.divergence.unwrap_or(0.0),
                });
            }
            let mut t = Table::new(&["model", "segment", "samples", "tsne_kl", "js_divergence"]);
            for r in &rows {
                t.push(vec![
                    r.model.clone(),
                    r.segment.clone(),
                    r.samples.to_string(),
                    r.kl.to_string(),
                    r.js_divergence.to_string(),
                ]);
            }
            emit_table(&out, &format!("divergence-{model}"), "divergence", &t, &rows)?;
        }
        Command::Report { common, inputs } => {
            let m = load_manifest(&common)?;
            let collections = inputs
                .iter()
                .map(|p| read_json::<ExperimentReport>(p).map(|d| d.records))
                .collect::<Result<Vec<_>, _>>()?;
            emit_reports(&m.output_dir, "merged", &merge_reports(collections))?;
        }
    }
    Ok(())
}
