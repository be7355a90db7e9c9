//! Lifelong learners behind a common "observe task t, then predict any task
//! <= t" interface: the dynamically expandable network pipeline plus the
//! single-task, anchored, Fisher-consolidated and progressive-column
//! baselines.

mod baselines;
mod den;

pub use baselines::{EwcLearner, L2Learner, ProgressiveLearner, StlLearner};
pub use den::DenLearner;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetError, StableCoord, TaskId, UnitId};
use crate::regularizers::RegularizerError;
use crate::tasks::TaskDataset;
use crate::trainer::{TrainConfig, TrainError, TrainableSet};

#[derive(Debug, Error)]
pub enum LifelongError {
    #[error("tasks must arrive in order: expected task {expected}, got {got}")]
    OutOfOrder { expected: TaskId, got: TaskId },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
}

/// Regularization strengths, loss/drift thresholds, expansion width, and
/// optimizer settings. Defaults were tuned once on the reference seed and
/// frozen; every value is overridable in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Elementwise l1 strength (first-task fit, sparse heads, expansion).
    pub mu: f64,
    /// Group-sparsity strength on expanded units' incoming groups.
    pub gamma: f64,
    /// Quadratic anchor strength (split re-solve and anchored baselines).
    pub lambda: f64,
    /// Loss threshold: expansion triggers when the post-retrain training
    /// loss stays above it.
    pub tau: f64,
    /// Drift threshold: units whose incoming weights moved further than this
    /// split.
    pub sigma: f64,
    /// Units added per hidden layer on expansion (also the progressive
    /// baseline's column width).
    pub k: usize,
    pub train: TrainConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            mu: 1e-4,
            gamma: 1e-3,
            lambda: 1e-2,
            tau: 0.35,
            sigma: 0.02,
            k: 8,
            train: TrainConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), LifelongError> {
        for (name, v) in [("mu", self.mu), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if v < 0.0 || !v.is_finite() {
                return Err(LifelongError::Argument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.tau > 0.0) {
            return Err(LifelongError::Argument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.sigma < 0.0 || self.sigma.is_nan() {
            return Err(LifelongError::Argument(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.k < 1 {
            return Err(LifelongError::Argument("k must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Result of the breadth-first subnetwork walk: which input features and
/// hidden units have a nonzero-weight path to the task's output unit, plus
/// the derived trainable coordinate set (edges between selected units in
/// adjacent layers, their biases, and the task head).
#[derive(Debug, Clone)]
pub struct SubnetworkSelection {
    pub input_features: BTreeSet<usize>,
    pub hidden: Vec<BTreeSet<UnitId>>,
    pub trainable: TrainableSet,
}

impl SubnetworkSelection {
    pub fn selected_unit_count(&self) -> usize {
        self.hidden.iter().map(|s| s.len()).sum()
    }
}

/// Per-unit semantic drift measured against the previous-stage snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEntry {
    pub layer: usize,
    pub unit: UnitId,
    pub rho: f64,
    pub split: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn split_count(&self) -> usize {
        self.entries.iter().filter(|e| e.split).count()
    }
}

/// Expansion bookkeeping for one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerExpansion {
    pub layer: usize,
    pub added: usize,
    pub pruned: usize,
}

impl LayerExpansion {
    pub fn surviving(&self) -> usize {
        self.added - self.pruned
    }
}

/// Which parameters a stage was allowed to touch, in structure-independent
/// coordinates. Bitwise change audits check every observed difference
/// against these sets.
#[derive(Debug, Clone, Default)]
pub struct StageAudit {
    /// Selection-derived trainable set (plus the stage's head).
    pub trainable: BTreeSet<StableCoord>,
    /// Units created during the stage (expansion units, including ones later
    /// pruned, and split copies).
    pub created_units: BTreeSet<UnitId>,
    /// Originals whose incoming weights were restored by a split.
    pub restored_units: BTreeSet<UnitId>,
}

impl StageAudit {
    /// True when a change at `coord` is accounted for by the stage's
    /// trainable set, a created unit, or a split restoration.
    pub fn allows(&self, coord: &StableCoord) -> bool {
        if self.trainable.contains(coord) {
            return true;
        }
        let touches_created = |u: &UnitId| self.created_units.contains(u);
        match coord {
            StableCoord::Edge { from, to } => {
                let from_created = matches!(from, crate::network::Source::Unit(u) if touches_created(u));
                from_created
                    || touches_created(to)
                    || self.restored_units.contains(to)
            }
            StableCoord::Bias { unit } => touches_created(unit) || self.restored_units.contains(unit),
            StableCoord::HeadWeight { unit, .. } => touches_created(unit),
            StableCoord::HeadBias { .. } => false,
        }
    }
}

/// Per-stage record: loss after selective retraining, expansion and split
/// counts, capacity, wall time, and the audit sets.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub task_id: TaskId,
    /// Mean training cross-entropy after the stage's main fit (for the
    /// expandable network: after selective retraining, the value compared
    /// against tau).
    pub retrain_loss: f64,
    pub expansion: Vec<LayerExpansion>,
    pub split_count: usize,
    /// Per-unit drift measurements behind the split decisions.
    pub drift: DriftReport,
    pub capacity_before: usize,
    pub capacity_after: usize,
    pub wall_ms: u64,
    pub audit: StageAudit,
}

impl StageReport {
    pub fn added_total(&self) -> usize {
        self.expansion.iter().map(|e| e.added).sum()
    }

    pub fn surviving_total(&self) -> usize {
        self.expansion.iter().map(|e| e.surviving()).sum()
    }
}

/// A continual learner: observes tasks strictly in order and predicts for
/// any task seen so far. Prediction is read-only, so learners are shareable
/// across evaluation threads.
pub trait Learner: Send + Sync {
    fn name(&self) -> &str;
    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError>;
    fn predict(&self, task: TaskId, x: &[f64]) -> Result<f64, LifelongError>;
    fn capacity(&self) -> usize;
    fn tasks_seen(&self) -> TaskId;
    /// Checkpoint document, when the learner is backed by a single network.
    fn checkpoint_json(&self) -> Option<String>;
}

pub(crate) fn check_order(expected: TaskId, got: TaskId) -> Result<(), LifelongError> {
    if expected != got {
        return Err(LifelongError::OutOfOrder { expected, got });
    }
    Ok(())
}

/// 1.0 for every coordinate except the given task's head entries. Anchors
/// preserve previous-stage knowledge; a head created this stage has none, so
/// the final re-solve leaves it free to recalibrate over the new structure.
pub(crate) fn non_head_mask(trainable: &TrainableSet, task: TaskId) -> Vec<f64> {
    use crate::trainer::Coord;
    trainable
        .coords()
        .iter()
        .map(|c| match c {
            Coord::HeadWeight { task: t, .. } | Coord::HeadBias { task: t } if *t == task => 0.0,
            _ => 1.0,
        })
        .collect()
}

/// Anchor values for a trainable set: the snapshot value where the
/// coordinate already existed at the previous stage, and the coordinate's
/// current value otherwise (parameters born after the snapshot anchor to
/// their own initialization).
pub(crate) fn snapshot_anchor(
    net: &crate::network::DenNetwork,
    trainable: &TrainableSet,
) -> Vec<f64> {
    use crate::trainer::Coord;
    let snap = net.snapshot();
    trainable
        .coords()
        .iter()
        .map(|c| match *c {
            Coord::Weight { layer, row, col } => {
                let s = &snap.layers[layer];
                if row < s.incoming.rows() && col < s.incoming.cols() {
                    s.incoming.get(row, col)
                } else {
                    net.weight(layer, row, col)
                }
            }
            Coord::Bias { layer, idx } => {
                let s = &snap.layers[layer];
                if idx < s.bias.len() {
                    s.bias[idx]
                } else {
                    net.bias(layer, idx)
                }
            }
            Coord::HeadWeight { task, unit } => snap
                .heads
                .get(&task)
                .and_then(|h| h.weights.get(&unit).copied())
                .unwrap_or_else(|| net.head_weight(task, unit)),
            Coord::HeadBias { task } => snap
                .heads
                .get(&task)
                .map(|h| h.bias)
                .unwrap_or_else(|| net.head_bias(task)),
        })
        .collect()
}
