//! The dynamically expandable network: ReLU hidden layers whose units carry
//! creation timestamps and lineage, one sigmoid output head per task, and a
//! deep snapshot of the previous stage's weights.
//!
//! Structure only ever grows by appending units (ids are monotone and layer
//! order is id order), so the units visible to task `t` — those stamped at or
//! before `t` — always form a per-layer prefix. Masked inference simply
//! truncates every layer to that prefix, which makes old-task predictions
//! bitwise invariant under any later growth or retraining of newer units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt;
use crate::numerics::{relu, sigmoid, Matrix, SeededRng, RNG_ALGORITHM};

pub type TaskId = u32;

/// Stable unit identifier; never reused after removal.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct UnitId(pub u32);

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitOrigin {
    Initial,
    Expanded,
    SplitCopyOf(UnitId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub unit_id: UnitId,
    pub timestamp: TaskId,
    pub origin: UnitOrigin,
}

/// One hidden layer: incoming weights (`prev_width x width`, column `j` is
/// unit `j`'s incoming group), biases, and per-unit metadata in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub incoming: Matrix,
    pub bias: Vec<f64>,
    pub units: Vec<UnitMeta>,
}

impl HiddenLayer {
    pub fn width(&self) -> usize {
        self.units.len()
    }

    pub fn index_of(&self, id: UnitId) -> Option<usize> {
        self.units.binary_search_by_key(&id, |u| u.unit_id).ok()
    }

    /// Number of units visible to `task` (a prefix, since timestamps are
    /// non-decreasing in id order).
    pub fn active_count(&self, task: TaskId) -> usize {
        self.units.partition_point(|u| u.timestamp <= task)
    }
}

/// Per-task output head: a sparse-by-value linear readout over top hidden
/// units stamped at or before the task, plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub task_id: TaskId,
    pub weights: BTreeMap<UnitId, f64>,
    pub bias: f64,
}

/// Source end of an edge: an input feature or a hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Input(usize),
    Unit(UnitId),
}

/// Structure-independent parameter address, used for bitwise change audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StableCoord {
    Edge { from: Source, to: UnitId },
    Bias { unit: UnitId },
    HeadWeight { task: TaskId, unit: UnitId },
    HeadBias { task: TaskId },
}

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("no output head for task {0}")]
    MissingHead(TaskId),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("structural integrity violated: {0}")]
    Integrity(String),
}

/// Weights, biases, metadata and heads — everything the snapshot copies.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub input_dim: usize,
    pub layers: Vec<HiddenLayer>,
    pub heads: BTreeMap<TaskId, TaskHead>,
}

impl NetState {
    fn prev_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layers[layer - 1].width()
        }
    }

    /// Masked forward pass: hidden units stamped after `task` are excluded,
    /// so the arithmetic is identical to running the network as it existed
    /// when those units were absent.
    pub fn forward(&self, x: &[f64], task: TaskId) -> Result<f64, NetError> {
        Ok(self.forward_trace(x, task)?.prob)
    }

    pub fn forward_trace(&self, x: &[f64], task: TaskId) -> Result<ForwardTrace, NetError> {
        let head = self
            .heads
            .get(&task)
            .ok_or(NetError::MissingHead(task))?;
        if x.len() != self.input_dim {
            return Err(NetError::Shape(format!(
                "input length {} != input dimension {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut active = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let n_out = layer.active_count(task);
            let prev: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let mut z = vec![0.0; n_out];
            layer_preactivations(layer, prev, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
            active.push(n_out);
            preacts.push(z);
            acts.push(a);
        }
        let top = self.layers.len() - 1;
        let score = self.head_score(head, &acts[top])?;
        Ok(ForwardTrace {
            active,
            preacts,
            acts,
            score,
            prob: sigmoid(score),
        })
    }

    /// Score-only forward pass reusing caller-owned activation buffers; the
    /// arithmetic is identical to [`NetState::forward_trace`].
    pub fn forward_score(
        &self,
        x: &[f64],
        task: TaskId,
        work: &mut ScoreWorkspace,
    ) -> Result<f64, NetError> {
        let head = self
            .heads
            .get(&task)
            .ok_or(NetError::MissingHead(task))?;
        if x.len() != self.input_dim {
            return Err(NetError::Shape(format!(
                "input length {} != input dimension {}",
                x.len(),
                self.input_dim
            )));
        }
        let (mut cur, mut next) = (&mut work.a, &mut work.b);
        for (l, layer) in self.layers.iter().enumerate() {
            let n_out = layer.active_count(task);
            next.clear();
            next.resize(n_out, 0.0);
            let prev: &[f64] = if l == 0 { x } else { cur };
            layer_preactivations(layer, prev, next);
            for v in next.iter_mut() {
                *v = relu(*v);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        self.head_score(head, cur)
    }

    fn head_score(&self, head: &TaskHead, top_acts: &[f64]) -> Result<f64, NetError> {
        let top_layer = self.layers.last().expect("nonempty");
        let mut score = 0.0;
        for (&uid, &w) in &head.weights {
            let idx = top_layer.index_of(uid).ok_or_else(|| {
                NetError::Integrity(format!("head {} references missing unit {uid}", head.task_id))
            })?;
            debug_assert!(idx < top_acts.len());
            score += w * top_acts[idx];
        }
        Ok(score + head.bias)
    }
}

/// Reusable activation buffers for [`NetState::forward_score`].
#[derive(Debug, Default)]
pub struct ScoreWorkspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Writes `z = W^T prev + b` for the active prefix. Accumulation runs in
/// ascending source order for every target, so the result is bit-identical
/// to a per-target dot product; sources with a zero activation contribute
/// exact zeros and are skipped.
fn layer_preactivations(layer: &HiddenLayer, prev: &[f64], z: &mut [f64]) {
    let n_out = z.len();
    let cols = layer.incoming.cols();
    for (i, &p) in prev.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = &layer.incoming.data()[i * cols..i * cols + n_out];
        for (zj, &w) in z.iter_mut().zip(row) {
            *zj += w * p;
        }
    }
    for (zj, &b) in z.iter_mut().zip(&layer.bias) {
        *zj += b;
    }
}

/// Activations recorded by a forward pass, consumed by backpropagation and by
/// kink-detection in gradient-check tests.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Visible unit count per hidden layer.
    pub active: Vec<usize>,
    pub preacts: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
    pub score: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenNetwork {
    state: NetState,
    snapshot: NetState,
    stage: TaskId,
    next_unit: u32,
}

impl DenNetwork {
    /// Fresh stage-1 network. Hidden weights draw from a uniform
    /// fan-balanced range; biases start at zero; every unit is stamped 1.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self, NetError> {
        if input_dim == 0 {
            return Err(NetError::Argument("input dimension must be positive".into()));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(NetError::Argument(
                "need at least one hidden layer, all with positive width".into(),
            ));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut next_unit = 1u32;
        for (l, &width) in hidden.iter().enumerate() {
            let fan_in = if l == 0 { input_dim } else { hidden[l - 1] };
            let fan_out = hidden.get(l + 1).copied().unwrap_or(1);
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, width);
            for row in 0..fan_in {
                for col in 0..width {
                    w.set(row, col, rng.uniform(-r, r));
                }
            }
            let units = (0..width)
                .map(|_| {
                    let meta = UnitMeta {
                        unit_id: UnitId(next_unit),
                        timestamp: 1,
                        origin: UnitOrigin::Initial,
                    };
                    next_unit += 1;
                    meta
                })
                .collect();
            layers.push(HiddenLayer {
                incoming: w,
                bias: vec![0.0; width],
                units,
            });
        }
        let state = NetState {
            input_dim,
            layers,
            heads: BTreeMap::new(),
        };
        Ok(DenNetwork {
            snapshot: state.clone(),
            state,
            stage: 1,
            next_unit,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.state.input_dim
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.state.layers.len()
    }

    pub fn current_stage(&self) -> TaskId {
        self.stage
    }

    /// Next id the allocator would hand out; ids below it were either issued
    /// already or never will be.
    pub fn next_unit_id(&self) -> u32 {
        self.next_unit
    }

    pub fn state(&self) -> &NetState {
        &self.state
    }

    pub fn snapshot(&self) -> &NetState {
        &self.snapshot
    }

    pub fn layer(&self, l: usize) -> &HiddenLayer {
        &self.state.layers[l]
    }

    pub fn head(&self, task: TaskId) -> Option<&TaskHead> {
        self.state.heads.get(&task)
    }

    pub fn head_tasks(&self) -> Vec<TaskId> {
        self.state.heads.keys().copied().collect()
    }

    // --- raw parameter access (used by the trainer and by audits) ---

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.state.layers[layer].incoming.get(row, col)
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: f64) {
        self.state.layers[layer].incoming.set(row, col, v);
    }

    pub fn bias(&self, layer: usize, idx: usize) -> f64 {
        self.state.layers[layer].bias[idx]
    }

    pub fn set_bias(&mut self, layer: usize, idx: usize, v: f64) {
        self.state.layers[layer].bias[idx] = v;
    }

    pub fn head_weight(&self, task: TaskId, unit: UnitId) -> f64 {
        self.state.heads[&task].weights[&unit]
    }

    pub fn set_head_weight(&mut self, task: TaskId, unit: UnitId, v: f64) {
        *self
            .state
            .heads
            .get_mut(&task)
            .expect("head exists")
            .weights
            .get_mut(&unit)
            .expect("head weight exists") = v;
    }

    pub fn head_bias(&self, task: TaskId) -> f64 {
        self.state.heads[&task].bias
    }

    pub fn set_head_bias(&mut self, task: TaskId, v: f64) {
        self.state.heads.get_mut(&task).expect("head exists").bias = v;
    }

    pub fn forward(&self, x: &[f64], task: TaskId) -> Result<f64, NetError> {
        self.state.forward(x, task)
    }

    pub fn forward_trace(&self, x: &[f64], task: TaskId) -> Result<ForwardTrace, NetError> {
        self.state.forward_trace(x, task)
    }

    /// Evaluates the previous stage's snapshot directly.
    pub fn snapshot_forward(&self, x: &[f64], task: TaskId) -> Result<f64, NetError> {
        self.snapshot.forward(x, task)
    }

    /// Adds a zero entry for `unit` to the task head if not already present
    /// (used when expansion introduces top-layer units mid-stage).
    pub fn ensure_head_entry(&mut self, task: TaskId, unit: UnitId) -> Result<(), NetError> {
        let top = self.state.layers.last().expect("at least one hidden layer");
        match top.index_of(unit) {
            Some(i) if top.units[i].timestamp <= task => {}
            Some(_) => {
                return Err(NetError::Integrity(format!(
                    "unit {unit} is stamped after task {task}"
                )))
            }
            None => {
                return Err(NetError::Argument(format!("unit {unit} is not a top-layer unit")))
            }
        }
        let head = self
            .state
            .heads
            .get_mut(&task)
            .ok_or(NetError::MissingHead(task))?;
        head.weights.entry(unit).or_insert(0.0);
        Ok(())
    }

    /// Units carrying the given timestamp, as `(layer, id)` pairs.
    pub fn units_stamped(&self, ts: TaskId) -> Vec<(usize, UnitId)> {
        let mut out = Vec::new();
        for (l, layer) in self.state.layers.iter().enumerate() {
            for u in &layer.units {
                if u.timestamp == ts {
                    out.push((l, u.unit_id));
                }
            }
        }
        out
    }

    /// Creates an all-zero head for `task` over the top-layer units stamped
    /// at or before it.
    pub fn add_head(&mut self, task: TaskId) -> Result<(), NetError> {
        if self.state.heads.contains_key(&task) {
            return Err(NetError::Integrity(format!("head for task {task} already exists")));
        }
        let top = self.state.layers.last().expect("at least one hidden layer");
        let weights = top
            .units
            .iter()
            .filter(|u| u.timestamp <= task)
            .map(|u| (u.unit_id, 0.0))
            .collect();
        self.state.heads.insert(
            task,
            TaskHead {
                task_id: task,
                weights,
                bias: 0.0,
            },
        );
        Ok(())
    }

    /// Appends `count` fresh units to hidden layer `layer` (0-based), stamped
    /// with the current stage. Incoming and outgoing edges draw small random
    /// values; biases start at zero. Heads and the snapshot are untouched, so
    /// every existing task's predictions are unchanged by construction.
    pub fn add_units(
        &mut self,
        layer: usize,
        count: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<UnitId>, NetError> {
        if layer >= self.state.layers.len() {
            return Err(NetError::Argument(format!(
                "layer {layer} out of range (have {})",
                self.state.layers.len()
            )));
        }
        if count == 0 {
            return Err(NetError::Argument("unit count must be positive".into()));
        }
        let fan_in = self.state.prev_width(layer);
        let fan_out = if layer + 1 < self.state.layers.len() {
            self.state.layers[layer + 1].width()
        } else {
            1
        };
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut new_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = UnitId(self.next_unit);
            self.next_unit += 1;
            let col: Vec<f64> = (0..fan_in).map(|_| rng.uniform(-r, r)).collect();
            let this = &mut self.state.layers[layer];
            this.incoming.push_col(&col);
            this.bias.push(0.0);
            this.units.push(UnitMeta {
                unit_id: id,
                timestamp: self.stage,
                origin: UnitOrigin::Expanded,
            });
            if layer + 1 < self.state.layers.len() {
                let next_width = self.state.layers[layer + 1].width();
                let row: Vec<f64> = (0..next_width).map(|_| rng.uniform(-r, r)).collect();
                self.state.layers[layer + 1].incoming.push_row(&row);
            }
            new_ids.push(id);
        }
        debug_assert!(self.check().is_ok());
        Ok(new_ids)
    }

    /// Deletes units whose incoming group (weights and bias) is exactly zero.
    /// Such a unit's ReLU activation is identically zero, so removal leaves
    /// every task's outputs unchanged.
    pub fn remove_units(&mut self, layer: usize, ids: &[UnitId]) -> Result<(), NetError> {
        if layer >= self.state.layers.len() {
            return Err(NetError::Argument(format!("layer {layer} out of range")));
        }
        let mut indices = Vec::with_capacity(ids.len());
        for &id in ids {
            let idx = self.state.layers[layer]
                .index_of(id)
                .ok_or_else(|| NetError::Argument(format!("unit {id} not in layer {layer}")))?;
            let l = &self.state.layers[layer];
            let col_zero = (0..l.incoming.rows()).all(|r| l.incoming.get(r, idx) == 0.0);
            if !col_zero || l.bias[idx] != 0.0 {
                return Err(NetError::Integrity(format!(
                    "unit {id} has a nonzero incoming group and cannot be removed"
                )));
            }
            if self.snapshot.layers[layer].index_of(id).is_some() {
                return Err(NetError::Integrity(format!(
                    "unit {id} exists in the previous-stage snapshot and cannot be removed"
                )));
            }
            indices.push(idx);
        }
        if self.state.layers[layer].width() <= indices.len() {
            return Err(NetError::Integrity(format!(
                "removal would empty hidden layer {layer}"
            )));
        }
        indices.sort_unstable();
        indices.dedup();
        for &idx in indices.iter().rev() {
            let id = self.state.layers[layer].units[idx].unit_id;
            let l = &mut self.state.layers[layer];
            l.incoming.remove_col(idx);
            l.bias.remove(idx);
            l.units.remove(idx);
            if layer + 1 < self.state.layers.len() {
                self.state.layers[layer + 1].incoming.remove_row(idx);
            }
            for head in self.state.heads.values_mut() {
                head.weights.remove(&id);
            }
        }
        debug_assert!(self.check().is_ok());
        Ok(())
    }

    /// Splits unit `id`: the original's incoming weights (and bias) are
    /// restored to their previous-stage snapshot values, and a copy stamped
    /// with the current stage takes over the drifted incoming weights. The
    /// copy's outgoing weights duplicate the original's current ones, except
    /// that the current stage's head weight moves to the copy rather than
    /// being duplicated. Incoming edges from units younger than the snapshot
    /// move entirely to the copy.
    pub fn split_unit(&mut self, layer: usize, id: UnitId) -> Result<UnitId, NetError> {
        if layer >= self.state.layers.len() {
            return Err(NetError::Argument(format!("layer {layer} out of range")));
        }
        let idx = self.state.layers[layer]
            .index_of(id)
            .ok_or_else(|| NetError::Argument(format!("unit {id} not in layer {layer}")))?;
        if self.state.layers[layer].units[idx].timestamp >= self.stage {
            return Err(NetError::Integrity(format!(
                "unit {id} was created this stage and has no previous-stage reference"
            )));
        }
        let snap_idx = self.snapshot.layers[layer].index_of(id).ok_or_else(|| {
            NetError::Integrity(format!("unit {id} is missing from the snapshot"))
        })?;
        let snap_prev = self.snapshot.prev_width(layer);
        let prev_width = self.state.prev_width(layer);

        // Drifted incoming group, including edges from post-snapshot units.
        let drifted: Vec<f64> = (0..prev_width)
            .map(|r| self.state.layers[layer].incoming.get(r, idx))
            .collect();

        // Restore the original to its snapshot values; post-snapshot edges
        // belong to the copy and zero out here.
        for r in 0..prev_width {
            let v = if r < snap_prev {
                self.snapshot.layers[layer].incoming.get(r, snap_idx)
            } else {
                0.0
            };
            self.state.layers[layer].incoming.set(r, idx, v);
        }
        self.state.layers[layer].bias[idx] = self.snapshot.layers[layer].bias[snap_idx];

        let copy_id = UnitId(self.next_unit);
        self.next_unit += 1;
        {
            let l = &mut self.state.layers[layer];
            l.incoming.push_col(&drifted);
            l.bias.push(0.0);
            l.units.push(UnitMeta {
                unit_id: copy_id,
                timestamp: self.stage,
                origin: UnitOrigin::SplitCopyOf(id),
            });
        }
        if layer + 1 < self.state.layers.len() {
            let next = &mut self.state.layers[layer + 1];
            let row: Vec<f64> = (0..next.width()).map(|c| next.incoming.get(idx, c)).collect();
            next.incoming.push_row(&row);
        }
        let stage = self.stage;
        if let Some(head) = self.state.heads.get_mut(&stage) {
            // the drifted feature now lives in the copy, so the current
            // task's readout follows it; the restored original keeps serving
            // older heads only
            if let Some(w) = head.weights.get_mut(&id) {
                let moved = *w;
                *w = 0.0;
                head.weights.insert(copy_id, moved);
            }
        }
        debug_assert!(self.check().is_ok());
        Ok(copy_id)
    }

    /// Total scalar parameter count: layer weights and biases plus every head
    /// weight and head bias. Storage is dense, so value-level zeros count.
    pub fn capacity(&self) -> usize {
        capacity_of(&self.state)
    }

    /// Freezes the current weights as the new previous-stage snapshot and
    /// advances the stage counter.
    pub fn snapshot_commit(&mut self) {
        self.snapshot = self.state.clone();
        self.stage += 1;
    }

    /// L2 distance between a unit's current and snapshot incoming group
    /// (weights over snapshot-era source units, plus bias). `None` when the
    /// unit postdates the snapshot. Edges from younger units are excluded:
    /// they are invisible to every task the snapshot could serve.
    pub fn unit_drift(&self, layer: usize, id: UnitId) -> Option<f64> {
        let idx = self.state.layers[layer].index_of(id)?;
        let snap_idx = self.snapshot.layers[layer].index_of(id)?;
        let snap_prev = self.snapshot.prev_width(layer);
        let mut acc = 0.0;
        for r in 0..snap_prev {
            let d = self.state.layers[layer].incoming.get(r, idx)
                - self.snapshot.layers[layer].incoming.get(r, snap_idx);
            acc += d * d;
        }
        let db = self.state.layers[layer].bias[idx] - self.snapshot.layers[layer].bias[snap_idx];
        acc += db * db;
        Some(acc.sqrt())
    }

    /// Every parameter keyed by a structure-independent address.
    pub fn parameter_map(&self) -> BTreeMap<StableCoord, f64> {
        let mut map = BTreeMap::new();
        for (l, layer) in self.state.layers.iter().enumerate() {
            for (j, unit) in layer.units.iter().enumerate() {
                for r in 0..layer.incoming.rows() {
                    let from = if l == 0 {
                        Source::Input(r)
                    } else {
                        Source::Unit(self.state.layers[l - 1].units[r].unit_id)
                    };
                    map.insert(
                        StableCoord::Edge {
                            from,
                            to: unit.unit_id,
                        },
                        layer.incoming.get(r, j),
                    );
                }
                map.insert(StableCoord::Bias { unit: unit.unit_id }, layer.bias[j]);
            }
        }
        for (&task, head) in &self.state.heads {
            for (&uid, &w) in &head.weights {
                map.insert(StableCoord::HeadWeight { task, unit: uid }, w);
            }
            map.insert(StableCoord::HeadBias { task }, head.bias);
        }
        map
    }

    /// Structural consistency: dimensions match metadata, ids are strictly
    /// increasing per layer, timestamps never exceed the stage and are
    /// non-decreasing in id order, the snapshot is a per-layer prefix of the
    /// current structure, heads reference visible units, and all parameters
    /// are finite.
    pub fn check(&self) -> Result<(), NetError> {
        let s = &self.state;
        if s.layers.is_empty() {
            return Err(NetError::Integrity("no hidden layers".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (l, layer) in s.layers.iter().enumerate() {
            let prev = s.prev_width(l);
            if layer.incoming.rows() != prev || layer.incoming.cols() != layer.width() {
                return Err(NetError::Integrity(format!(
                    "layer {l} incoming is {}x{}, expected {}x{}",
                    layer.incoming.rows(),
                    layer.incoming.cols(),
                    prev,
                    layer.width()
                )));
            }
            if layer.bias.len() != layer.width() {
                return Err(NetError::Integrity(format!("layer {l} bias length mismatch")));
            }
            if layer.width() == 0 {
                return Err(NetError::Integrity(format!("layer {l} is empty")));
            }
            layer
                .incoming
                .check_finite()
                .map_err(|e| NetError::Integrity(format!("layer {l}: {e}")))?;
            if layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Integrity(format!("layer {l} has non-finite bias")));
            }
            let mut last_ts = 0;
            for w in layer.units.windows(2) {
                if w[0].unit_id >= w[1].unit_id {
                    return Err(NetError::Integrity(format!("layer {l} ids out of order")));
                }
            }
            for u in &layer.units {
                if !seen.insert(u.unit_id) {
                    return Err(NetError::Integrity(format!("duplicate unit id {}", u.unit_id)));
                }
                if u.unit_id.0 >= self.next_unit {
                    return Err(NetError::Integrity(format!(
                        "unit id {} not below allocation counter",
                        u.unit_id
                    )));
                }
                if u.timestamp > self.stage {
                    return Err(NetError::Integrity(format!(
                        "unit {} stamped {} after current stage {}",
                        u.unit_id, u.timestamp, self.stage
                    )));
                }
                if u.timestamp < last_ts {
                    return Err(NetError::Integrity(format!(
                        "timestamps decrease within layer {l}"
                    )));
                }
                last_ts = u.timestamp;
            }
        }
        if self.snapshot.layers.len() != s.layers.len()
            || self.snapshot.input_dim != s.input_dim
        {
            return Err(NetError::Integrity("snapshot shape differs".into()));
        }
        for (l, (snap, cur)) in self.snapshot.layers.iter().zip(&s.layers).enumerate() {
            if snap.width() > cur.width() {
                return Err(NetError::Integrity(format!("snapshot layer {l} wider than current")));
            }
            for (i, u) in snap.units.iter().enumerate() {
                if cur.units[i].unit_id != u.unit_id {
                    return Err(NetError::Integrity(format!(
                        "snapshot layer {l} is not an id prefix of the current layer"
                    )));
                }
            }
        }
        let top = s.layers.last().expect("nonempty");
        for (task, head) in &s.heads {
            if head.task_id != *task {
                return Err(NetError::Integrity(format!("head key {task} != task {}", head.task_id)));
            }
            if !head.bias.is_finite() {
                return Err(NetError::Integrity(format!("head {task} bias non-finite")));
            }
            for (&uid, w) in &head.weights {
                if !w.is_finite() {
                    return Err(NetError::Integrity(format!("head {task} weight non-finite")));
                }
                match top.index_of(uid) {
                    Some(i) if top.units[i].timestamp <= *task => {}
                    Some(_) => {
                        return Err(NetError::Integrity(format!(
                            "head {task} references unit {uid} stamped after it"
                        )))
                    }
                    None => {
                        return Err(NetError::Integrity(format!(
                            "head {task} references missing unit {uid}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes the network and RNG state to the versioned checkpoint
    /// document, with reals at 17 significant digits.
    pub fn to_checkpoint_json(&self, rng: &SeededRng) -> String {
        let doc = CheckpointDoc::from_network(self, rng);
        jsonfmt::to_string_f17(&doc).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<(DenNetwork, SeededRng), CheckpointError> {
        let doc: CheckpointDoc = serde_json::from_str(s)?;
        doc.into_network()
    }
}

fn capacity_of(state: &NetState) -> usize {
    let mut n = 0;
    for layer in &state.layers {
        n += layer.incoming.rows() * layer.incoming.cols() + layer.bias.len();
    }
    for head in state.heads.values() {
        n += head.weights.len() + 1;
    }
    n
}

// --- checkpoint document ---

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format_version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadDoc {
    weights: BTreeMap<UnitId, f64>,
    bias: f64,
}

#[derive(Serialize, Deserialize)]
struct RngStateDoc {
    algo: String,
    rng: SeededRng,
}

#[derive(Serialize, Deserialize)]
struct StateDoc {
    layers: Vec<LayerDoc>,
    unit_meta: Vec<Vec<UnitMeta>>,
    heads: BTreeMap<TaskId, HeadDoc>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    current_stage: TaskId,
    layers: Vec<LayerDoc>,
    unit_meta: Vec<Vec<UnitMeta>>,
    heads: BTreeMap<TaskId, HeadDoc>,
    rng_state: RngStateDoc,
    snapshot_prev: StateDoc,
}

fn state_to_doc(state: &NetState) -> (Vec<LayerDoc>, Vec<Vec<UnitMeta>>, BTreeMap<TaskId, HeadDoc>) {
    let layers = state
        .layers
        .iter()
        .map(|l| LayerDoc {
            w: (0..l.incoming.rows()).map(|r| l.incoming.row(r).to_vec()).collect(),
            b: l.bias.clone(),
        })
        .collect();
    let meta = state.layers.iter().map(|l| l.units.clone()).collect();
    let heads = state
        .heads
        .iter()
        .map(|(t, h)| {
            (
                *t,
                HeadDoc {
                    weights: h.weights.clone(),
                    bias: h.bias,
                },
            )
        })
        .collect();
    (layers, meta, heads)
}

fn state_from_doc(
    layers: Vec<LayerDoc>,
    meta: Vec<Vec<UnitMeta>>,
    heads: BTreeMap<TaskId, HeadDoc>,
) -> Result<NetState, CheckpointError> {
    if layers.is_empty() || layers.len() != meta.len() {
        return Err(CheckpointError::Invalid(
            "layer and unit_meta counts disagree or are empty".into(),
        ));
    }
    let input_dim = layers[0].w.len();
    let mut out_layers = Vec::with_capacity(layers.len());
    for (l, (doc, units)) in layers.into_iter().zip(meta).enumerate() {
        let incoming = Matrix::from_rows(&doc.w)
            .map_err(|e| CheckpointError::Invalid(format!("layer {l} weights: {e}")))?;
        if incoming.cols() != units.len() || doc.b.len() != units.len() {
            return Err(CheckpointError::Invalid(format!(
                "layer {l} width disagrees with metadata"
            )));
        }
        out_layers.push(HiddenLayer {
            incoming,
            bias: doc.b,
            units,
        });
    }
    let heads = heads
        .into_iter()
        .map(|(t, h)| {
            (
                t,
                TaskHead {
                    task_id: t,
                    weights: h.weights,
                    bias: h.bias,
                },
            )
        })
        .collect();
    Ok(NetState {
        input_dim,
        layers: out_layers,
        heads,
    })
}

impl CheckpointDoc {
    fn from_network(net: &DenNetwork, rng: &SeededRng) -> Self {
        let (layers, unit_meta, heads) = state_to_doc(&net.state);
        let (s_layers, s_meta, s_heads) = state_to_doc(&net.snapshot);
        CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            current_stage: net.stage,
            layers,
            unit_meta,
            heads,
            rng_state: RngStateDoc {
                algo: RNG_ALGORITHM.to_string(),
                rng: rng.clone(),
            },
            snapshot_prev: StateDoc {
                layers: s_layers,
                unit_meta: s_meta,
                heads: s_heads,
            },
        }
    }

    fn into_network(self) -> Result<(DenNetwork, SeededRng), CheckpointError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        if self.rng_state.algo != RNG_ALGORITHM {
            return Err(CheckpointError::Invalid(format!(
                "unknown rng algorithm {:?}, expected {RNG_ALGORITHM:?}",
                self.rng_state.algo
            )));
        }
        let state = state_from_doc(self.layers, self.unit_meta, self.heads)?;
        let snapshot = state_from_doc(
            self.snapshot_prev.layers,
            self.snapshot_prev.unit_meta,
            self.snapshot_prev.heads,
        )?;
        let next_unit = state
            .layers
            .iter()
            .flat_map(|l| l.units.iter())
            .map(|u| u.unit_id.0 + 1)
            .max()
            .unwrap_or(1);
        let net = DenNetwork {
            state,
            snapshot,
            stage: self.current_stage,
            next_unit,
        };
        net.check()
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        Ok((net, self.rng_state.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net() -> (DenNetwork, SeededRng) {
        let mut rng = SeededRng::new(9);
        let mut net = DenNetwork::new(3, &[4, 3], &mut rng).unwrap();
        net.add_head(1).unwrap();
        // give the head something to read
        let uids: Vec<UnitId> = net.layer(1).units.iter().map(|u| u.unit_id).collect();
        for (i, uid) in uids.iter().enumerate() {
            net.set_head_weight(1, *uid, 0.3 * (i as f64 + 1.0));
        }
        net.set_head_bias(1, -0.1);
        (net, rng)
    }

    #[test]
    fn forward_matches_hand_computation_on_one_unit_net() {
        let mut rng = SeededRng::new(1);
        let mut net = DenNetwork::new(1, &[1], &mut rng).unwrap();
        net.set_weight(0, 0, 0, 1.0);
        net.add_head(1).unwrap();
        let uid = net.layer(0).units[0].unit_id;
        net.set_head_weight(1, uid, 1.0);
        let p = net.forward(&[2.0], 1).unwrap();
        assert!((p - sigmoid(2.0)).abs() < 1e-15);
        assert!((p - 0.8807970779778823).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let (net, _) = toy_net();
        assert_eq!(net.forward(&[0.0; 3], 2), Err(NetError::MissingHead(2)));
        assert!(matches!(net.forward(&[0.0; 4], 1), Err(NetError::Shape(_))));
    }

    #[test]
    fn masking_is_identity_when_all_units_are_stamped_one() {
        let (net, _) = toy_net();
        let x = [0.4, -0.2, 1.0];
        // task 1 and a hypothetical later task see the same prefix
        let t1 = net.forward_trace(&x, 1).unwrap();
        assert_eq!(t1.active, vec![4, 3]);
    }

    #[test]
    fn add_units_masks_old_tasks_bit_exactly() {
        let (mut net, mut rng) = toy_net();
        net.snapshot_commit(); // stage 2
        let x = [0.5, 0.25, -1.5];
        let before = net.forward(&x, 1).unwrap();
        let ids = net.add_units(0, 2, &mut rng).unwrap();
        assert_eq!(ids.len(), 2);
        let _ = net.add_units(1, 2, &mut rng).unwrap();
        let after = net.forward(&x, 1).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
        // perturbing everything incident to the new units leaves task 1 alone
        for l in 0..2 {
            let w = net.layer(l).incoming.cols();
            let rows = net.layer(l).incoming.rows();
            for j in 0..w {
                if net.layer(l).units[j].timestamp > 1 {
                    for r in 0..rows {
                        net.set_weight(l, r, j, 123.456);
                    }
                    net.set_bias(l, j, -7.0);
                }
            }
        }
        let perturbed = net.forward(&x, 1).unwrap();
        assert_eq!(before.to_bits(), perturbed.to_bits());
    }

    #[test]
    fn add_units_shape_bookkeeping_and_errors() {
        let (mut net, mut rng) = toy_net();
        assert!(matches!(net.add_units(0, 0, &mut rng), Err(NetError::Argument(_))));
        let before_in = net.layer(0).incoming.cols();
        let before_out_rows = net.layer(1).incoming.rows();
        net.add_units(0, 2, &mut rng).unwrap();
        assert_eq!(net.layer(0).incoming.cols(), before_in + 2);
        assert_eq!(net.layer(1).incoming.rows(), before_out_rows + 2);
        net.check().unwrap();
    }

    #[test]
    fn remove_units_requires_zero_group_and_preserves_outputs() {
        let (mut net, mut rng) = toy_net();
        net.snapshot_commit();
        let ids = net.add_units(0, 3, &mut rng).unwrap();
        // nonzero incoming: refuse
        assert!(matches!(
            net.remove_units(0, &[ids[0]]),
            Err(NetError::Integrity(_))
        ));
        // zero out two of the three and remove them
        for &id in &ids[..2] {
            let idx = net.layer(0).index_of(id).unwrap();
            for r in 0..net.layer(0).incoming.rows() {
                net.set_weight(0, r, idx, 0.0);
            }
            net.set_bias(0, idx, 0.0);
        }
        let x = [0.1, -0.3, 0.9];
        let cap_before = net.capacity();
        let out_before = net.forward(&x, 1).unwrap();
        net.remove_units(0, &ids[..2]).unwrap();
        let out_after = net.forward(&x, 1).unwrap();
        assert_eq!(out_before.to_bits(), out_after.to_bits());
        // each removed layer-0 unit owned 3 incoming weights + 1 bias + 3 outgoing
        assert_eq!(cap_before - net.capacity(), 2 * (3 + 1 + 3));
        // snapshot-era units may never be removed
        let old = net.layer(0).units[0].unit_id;
        let idx = net.layer(0).index_of(old).unwrap();
        for r in 0..3 {
            net.set_weight(0, r, idx, 0.0);
        }
        net.set_bias(0, idx, 0.0);
        assert!(matches!(net.remove_units(0, &[old]), Err(NetError::Integrity(_))));
    }

    #[test]
    fn removal_cannot_empty_a_layer() {
        let mut rng = SeededRng::new(3);
        let mut net = DenNetwork::new(2, &[1], &mut rng).unwrap();
        net.add_head(1).unwrap();
        net.snapshot_commit();
        let ids = net.add_units(0, 1, &mut rng).unwrap();
        let idx = net.layer(0).index_of(ids[0]).unwrap();
        for r in 0..2 {
            net.set_weight(0, r, idx, 0.0);
        }
        // removing just the fresh unit is fine; removing both would empty the layer
        let both: Vec<UnitId> = net.layer(0).units.iter().map(|u| u.unit_id).collect();
        assert!(matches!(net.remove_units(0, &both), Err(NetError::Integrity(_))));
        net.remove_units(0, &[ids[0]]).unwrap();
    }

    #[test]
    fn split_restores_original_and_copies_drift() {
        let (mut net, _) = toy_net();
        net.snapshot_commit(); // stage 2, snapshot = stage-1 weights
        let target = net.layer(0).units[1].unit_id;
        let idx = net.layer(0).index_of(target).unwrap();
        let original: Vec<f64> = (0..3).map(|r| net.weight(0, r, idx)).collect();
        // drift the unit's incoming weights
        for r in 0..3 {
            net.set_weight(0, r, idx, original[r] + 0.5);
        }
        net.set_bias(0, idx, 0.25);
        let drifted: Vec<f64> = (0..3).map(|r| net.weight(0, r, idx)).collect();
        let x = [1.0, -0.5, 0.25];
        let snap_out = net.snapshot_forward(&x, 1).unwrap();

        let width_before = net.layer(0).width();
        let copy = net.split_unit(0, target).unwrap();
        assert_eq!(net.layer(0).width(), width_before + 1);
        // original restored bit-exactly
        for r in 0..3 {
            assert_eq!(net.weight(0, r, idx).to_bits(), original[r].to_bits());
        }
        assert_eq!(net.bias(0, idx), 0.0);
        // copy carries the drifted incoming weights bit-exactly
        let cidx = net.layer(0).index_of(copy).unwrap();
        for r in 0..3 {
            assert_eq!(net.weight(0, r, cidx).to_bits(), drifted[r].to_bits());
        }
        assert_eq!(
            net.layer(0).units[cidx].origin,
            UnitOrigin::SplitCopyOf(target)
        );
        assert_eq!(net.layer(0).units[cidx].timestamp, 2);
        // copy's outgoing row duplicates the original's
        for c in 0..net.layer(1).width() {
            assert_eq!(
                net.layer(1).incoming.get(cidx, c).to_bits(),
                net.layer(1).incoming.get(idx, c).to_bits()
            );
        }
        // old task sees the snapshot function again (copy masked, original restored)
        let out = net.forward(&x, 1).unwrap();
        assert_eq!(out.to_bits(), snap_out.to_bits());
    }

    #[test]
    fn split_rejects_units_created_this_stage() {
        let (mut net, mut rng) = toy_net();
        net.snapshot_commit();
        let ids = net.add_units(0, 1, &mut rng).unwrap();
        assert!(matches!(net.split_unit(0, ids[0]), Err(NetError::Integrity(_))));
    }

    #[test]
    fn capacity_counts_and_roundtrip() {
        let mut rng = SeededRng::new(4);
        let mut net = DenNetwork::new(2, &[2], &mut rng).unwrap();
        net.add_head(1).unwrap();
        // 2x2 weights + 2 biases + 2 head weights + 1 head bias
        assert_eq!(net.capacity(), 9);
        net.snapshot_commit();
        let cap = net.capacity();
        let ids = net.add_units(0, 3, &mut rng).unwrap();
        assert!(net.capacity() > cap);
        for &id in &ids {
            let idx = net.layer(0).index_of(id).unwrap();
            for r in 0..2 {
                net.set_weight(0, r, idx, 0.0);
            }
        }
        net.remove_units(0, &ids).unwrap();
        assert_eq!(net.capacity(), cap);
    }

    #[test]
    fn snapshot_commit_bumps_stage_and_zeroes_drift() {
        let (mut net, _) = toy_net();
        assert_eq!(net.current_stage(), 1);
        net.snapshot_commit();
        assert_eq!(net.current_stage(), 2);
        for l in 0..2 {
            for u in net.layer(l).units.clone() {
                assert_eq!(net.unit_drift(l, u.unit_id), Some(0.0));
            }
        }
        // commit only copies; weights untouched
        let before = net.parameter_map();
        net.snapshot_commit();
        assert_eq!(before, net.parameter_map());
        assert_eq!(net.current_stage(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let (mut net, mut rng) = toy_net();
        net.snapshot_commit();
        net.add_units(0, 2, &mut rng).unwrap();
        net.add_head(2).unwrap();
        let json = net.to_checkpoint_json(&rng);
        let (loaded, loaded_rng) = DenNetwork::from_checkpoint_json(&json).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(loaded_rng, rng);
        let json2 = loaded.to_checkpoint_json(&loaded_rng);
        assert_eq!(json, json2);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let (net, rng) = toy_net();
        let json = net.to_checkpoint_json(&rng);
        let bad = json.replace("\"format_version\":1", "\"format_version\":9");
        match DenNetwork::from_checkpoint_json(&bad) {
            Err(CheckpointError::Version { found: 9, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn structural_check_catches_corruption() {
        let (mut net, _) = toy_net();
        net.check().unwrap();
        net.state.layers[0].units[0].timestamp = 99;
        assert!(net.check().is_err());
    }
}
