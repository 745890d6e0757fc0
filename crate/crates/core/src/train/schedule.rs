use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `base·½(1 + cos(π·epoch/total))`
    Cosine,
    /// `base·factor^k`, where k counts the milestones at or below `epoch`.
    StepDecay { milestones: Vec<usize>, factor: f64 },
}

pub fn schedule_lr(schedule: &Schedule, epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside a {total_epochs}-epoch schedule"
        )));
    }
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => base_lr * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()),
        Schedule::StepDecay { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base_lr * factor.powi(passed as i32)
        }
    })
}
