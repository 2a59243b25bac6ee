use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::write_atomic;
use crate::objective::LossBreakdown;

pub const STEP_LOG_HEADER: &str = "step,ntp,concept,combined,gated_count,active_count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ntp: f64,
    pub concept: f64,
    pub combined: f64,
    pub gated_count: usize,
    pub active_count: usize,
}

impl StepRecord {
    pub fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            ntp: b.ntp_loss,
            concept: b.concept_loss,
            combined: b.combined,
            gated_count: b.gated_count,
            active_count: b.active_count,
        }
    }
}

/// Validation losses after an epoch; epoch 0 is the untrained starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_combined: Option<f64>,
    pub val_ntp: f64,
    pub val_concept: f64,
    pub val_combined: f64,
    pub val_gated_fraction: f64,
    pub train_gated_fraction: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, train_combined: Option<f64>, val: &LossBreakdown) -> Self {
        Self {
            epoch,
            train_combined,
            val_ntp: val.ntp_loss,
            val_concept: val.concept_loss,
            val_combined: val.combined,
            val_gated_fraction: val.gated_fraction(),
            train_gated_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl RunLog {
    /// Step log as CSV with the [`STEP_LOG_HEADER`] columns.
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.steps.len() + 1));
        out.push_str(STEP_LOG_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{},{}\n",
                s.step, s.ntp, s.concept, s.combined, s.gated_count, s.active_count
            ));
        }
        write_atomic(path, out.as_bytes())
    }

    /// Validation NTP loss per epoch, starting with the untrained model.
    pub fn val_ntp_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_ntp).collect()
    }
}
