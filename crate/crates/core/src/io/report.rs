//! Report persistence: a tab-separated table with a fixed column order and
//! a JSON document carrying the same records. Floats are written in Rust's
//! shortest round-trip form, so both formats reload field-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ExperimentReport, SegmentFlag};
use crate::train::TrainMode;

pub const REPORT_COLUMNS: [&str; 11] = [
    "experiment",
    "plan",
    "pretrained",
    "pretrain_mode",
    "retrain_mode",
    "segments",
    "retrained_layers",
    "clean_acc",
    "robust_acc",
    "wall_time_s",
    "seed",
];

/// A header plus rows of already-formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty table"))?;
        let columns: Vec<String> = header.split('\t').map(String::from).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<String> = line.split('\t').map(String::from).collect();
            if cells.len() != columns.len() {
                return Err(Error::invalid(format!(
                    "table row {} has {} cells, header has {}",
                    i + 1,
                    cells.len(),
                    columns.len()
                )));
            }
            rows.push(cells);
        }
        Ok(Self { columns, rows })
    }
}

fn mode_str(m: TrainMode) -> &'static str {
    m.as_str()
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "conventional" => Ok(TrainMode::Conventional),
        "adversarial" => Ok(TrainMode::Adversarial),
        "fast_adversarial" => Ok(TrainMode::FastAdversarial),
        _ => Err(Error::invalid(format!("unknown training mode {s:?}"))),
    }
}

/// `m_0=1;m_1=0;…` in network order.
fn encode_segments(flags: &[SegmentFlag]) -> String {
    flags
        .iter()
        .map(|f| format!("{}={}", f.segment, u8::from(f.trainable)))
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_segments(s: &str) -> Result<Vec<SegmentFlag>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|part| match part.split_once('=') {
            Some((name, "1")) => Ok(SegmentFlag { segment: name.into(), trainable: true }),
            Some((name, "0")) => Ok(SegmentFlag { segment: name.into(), trainable: false }),
            _ => Err(Error::invalid(format!("bad segment flag {part:?}"))),
        })
        .collect()
}

pub fn reports_table(reports: &[ExperimentReport]) -> Table {
    let mut t = Table::new(&REPORT_COLUMNS);
    for r in reports {
        t.push(vec![
            r.experiment.clone(),
            r.plan.clone(),
            r.pretrained.clone(),
            mode_str(r.pretrain_mode).into(),
            mode_str(r.retrain_mode).into(),
            encode_segments(&r.segments),
            r.retrained_layers.to_string(),
            r.clean_acc.to_string(),
            r.robust_acc.to_string(),
            r.wall_time_s.to_string(),
            r.seed.to_string(),
        ]);
    }
    t
}

fn cell<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::invalid(format!("bad {what} {s:?}")))
}

pub fn reports_from_table(table: &Table) -> Result<Vec<ExperimentReport>> {
    if table.columns != REPORT_COLUMNS {
        return Err(Error::invalid("table columns do not match the report layout"));
    }
    table
        .rows
        .iter()
        .map(|r| {
            Ok(ExperimentReport {
                experiment: r[0].clone(),
                plan: r[1].clone(),
                pretrained: r[2].clone(),
                pretrain_mode: parse_mode(&r[3])?,
                retrain_mode: parse_mode(&r[4])?,
                segments: decode_segments(&r[5])?,
                retrained_layers: cell(&r[6], "layer count")?,
                clean_acc: cell(&r[7], "accuracy")?,
                robust_acc: cell(&r[8], "accuracy")?,
                wall_time_s: cell(&r[9], "wall time")?,
                seed: cell(&r[10], "seed")?,
            })
        })
        .collect()
}

/// The structured document: a kind tag plus the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub kind: String,
    pub records: Vec<T>,
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    #[derive(Serialize)]
    struct Borrowed<'a, T> {
        kind: &'a str,
        records: &'a [T],
    }
    let doc = Borrowed { kind, records };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Document<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<stem>.tsv` and `<dir>/<stem>.json`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[ExperimentReport]) -> Result<(PathBuf, PathBuf)> {
    let tsv = dir.join(format!("{stem}.tsv"));
    let json = dir.join(format!("{stem}.json"));
    write_file(&tsv, &reports_table(reports).to_tsv())?;
    write_json(&json, "experiment_reports", reports)?;
    Ok((tsv, json))
}

/// Concatenates report collections and orders them by plan key
/// (experiment, pretrained, retrain mode, plan), keeping input order
/// among equal keys.
pub fn merge_reports(collections: Vec<Vec<ExperimentReport>>) -> Vec<ExperimentReport> {
    let mut all: Vec<ExperimentReport> = collections.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        (&a.experiment, &a.pretrained, a.retrain_mode.as_str(), &a.plan).cmp(&(
            &b.experiment,
            &b.pretrained,
            b.retrain_mode.as_str(),
            &b.plan,
        ))
    });
    all
}
