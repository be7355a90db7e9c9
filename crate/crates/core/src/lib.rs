//! Lifelong learning for feedforward binary classifiers.
//!
//! The centerpiece is a dynamically expandable network: a ReLU MLP with one
//! sigmoid output head per task, per-unit creation timestamps, and a snapshot
//! of the previous stage's weights. Observing a new task runs a pipeline of
//! sparse head fitting, breadth-first subnetwork selection, selective
//! retraining, group-sparse capacity expansion with dead-unit removal, and
//! drift-triggered unit splitting. At inference time a task only sees units
//! stamped at or before its own stage, so later growth can never perturb an
//! earlier task's predictions.
//!
//! Baseline continual learners (single-task, L2-anchored, Fisher-weighted
//! anchoring, progressive columns) share the same network and trainer
//! machinery behind a common [`lifelong::Learner`] interface, and
//! [`experiment`] drives them through config-defined synthetic task sequences,
//! recording per-stage AUROC and capacity tables.

pub mod experiment;
pub(crate) mod jsonfmt;
pub mod lifelong;
pub mod network;
pub mod numerics;
pub mod regularizers;
pub mod tasks;
pub mod trainer;
