//! Change-detection metrics and experiment harnesses.

mod pipeline;
mod scenario;
mod sweep;

pub use pipeline::{run_on_map, run_pipeline, Method, PipelineOutput, PipelineReport, PipelineSettings, PriorMap};
pub use scenario::{object_database, PairRecipe, Scenario};
pub use sweep::{select_tau_map, sweep, SweepAxis, SweepConfig, SweepRow, CSV_HEADER};

use crate::error::{invalid_input, Result};
use crate::geometry::ChangeClass;

/// Positive-change agreement between predicted and true scan labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// True changes.
    pub tc: u64,
    /// False changes.
    pub fc: u64,
    /// False statics.
    pub fs: u64,
}

impl ConfusionCounts {
    /// Counts over the points where `include` holds (all when `None`).
    pub fn from_labels(pred: &[ChangeClass], truth: &[ChangeClass], include: Option<&[bool]>) -> Result<Self> {
        if pred.len() != truth.len() || include.is_some_and(|m| m.len() != pred.len()) {
            return Err(invalid_input(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let mut c = Self::default();
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if include.is_some_and(|m| !m[i]) {
                continue;
            }
            match (p == ChangeClass::Positive, t == ChangeClass::Positive) {
                (true, true) => c.tc += 1,
                (true, false) => c.fc += 1,
                (false, true) => c.fs += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// `TC / (TC + FC + FS)`, or 1 when all counts are zero.
    pub fn iou(&self) -> f64 {
        let d = self.tc + self.fc + self.fs;
        if d == 0 {
            1.0
        } else {
            self.tc as f64 / d as f64
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.tc += o.tc;
        self.fc += o.fc;
        self.fs += o.fs;
    }
}

/// Positive-change IoU of one scan.
pub fn scan_iou(pred: &[ChangeClass], truth: &[ChangeClass]) -> Result<f64> {
    Ok(ConfusionCounts::from_labels(pred, truth, None)?.iou())
}

/// How per-scan IoUs are combined over a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouAveraging {
    /// Mean of per-scan IoUs.
    #[default]
    Macro,
    /// IoU of the pooled counts.
    Micro,
}

/// Map maintenance quality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapScores {
    /// Preservation rate: kept statics over all statics.
    pub pr: f64,
    /// Rejection rate: removed negative changes over all negative changes.
    pub rr: f64,
    pub f1: f64,
}

impl MapScores {
    pub fn from_rates(pr: f64, rr: f64) -> Self {
        let f1 = if pr + rr > 0.0 { 2.0 * pr * rr / (pr + rr) } else { 0.0 };
        Self { pr, rr, f1 }
    }
}

/// Scores a final map. `truth` labels every prior-map point static or
/// negative; `kept` says whether it survived. Points with `include` false
/// are ignored. An absent class scores 1.
pub fn map_scores_masked(truth: &[ChangeClass], kept: &[bool], include: Option<&[bool]>) -> Result<MapScores> {
    if truth.len() != kept.len() || include.is_some_and(|m| m.len() != kept.len()) {
        return Err(invalid_input(format!("{} labels for {} map points", truth.len(), kept.len())));
    }
    let (mut statics, mut preserved, mut changes, mut removed) = (0u64, 0u64, 0u64, 0u64);
    for (i, (&t, &k)) in truth.iter().zip(kept).enumerate() {
        if include.is_some_and(|m| !m[i]) {
            continue;
        }
        match t {
            ChangeClass::Static => {
                statics += 1;
                preserved += k as u64;
            }
            ChangeClass::Negative => {
                changes += 1;
                removed += !k as u64;
            }
            ChangeClass::Positive => return Err(invalid_input("prior-map truth cannot contain positive changes")),
        }
    }
    let pr = if statics == 0 { 1.0 } else { preserved as f64 / statics as f64 };
    let rr = if changes == 0 { 1.0 } else { removed as f64 / changes as f64 };
    Ok(MapScores::from_rates(pr, rr))
}

pub fn map_scores(truth: &[ChangeClass], kept: &[bool]) -> Result<MapScores> {
    map_scores_masked(truth, kept, None)
}
