//! Full-batch proximal gradient training. One loop serves every objective in
//! the crate: a gradient step on the data loss plus any smooth quadratic
//! penalties, followed by closed-form proximal maps for the nonsmooth parts,
//! restricted to an explicit set of trainable coordinates. Everything outside
//! that set is frozen bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{DenNetwork, NetError, Source, StableCoord, TaskId, UnitId};
use crate::numerics::sigmoid;
use crate::regularizers::{
    group_shrink, soft_threshold, AnchorPenalty, GroupSpec, RegularizerError,
};
use crate::tasks::Example;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
}

/// Full-batch optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tol: f64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, max_epochs: usize, tol: f64) -> Result<Self, TrainError> {
        let cfg = TrainConfig {
            learning_rate,
            max_epochs,
            tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Argument("max_epochs must be at least 1".into()));
        }
        if self.tol < 0.0 || !self.tol.is_finite() {
            return Err(TrainError::Argument(format!(
                "tol must be nonnegative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 500,
            tol: 1e-5,
        }
    }
}

/// Address of one trainable scalar. Weight/bias positions are indices into
/// the current structure; head entries are keyed by stable unit id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coord {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, idx: usize },
    HeadWeight { task: TaskId, unit: UnitId },
    HeadBias { task: TaskId },
}

/// Explicit, deduplicated, canonically ordered set of trainable coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableSet {
    coords: Vec<Coord>,
}

impl TrainableSet {
    pub fn new(mut coords: Vec<Coord>, net: &DenNetwork) -> Result<Self, TrainError> {
        coords.sort_unstable();
        coords.dedup();
        for c in &coords {
            match *c {
                Coord::Weight { layer, row, col } => {
                    if layer >= net.num_hidden_layers()
                        || row >= net.layer(layer).incoming.rows()
                        || col >= net.layer(layer).incoming.cols()
                    {
                        return Err(TrainError::Argument(format!("coordinate {c:?} out of range")));
                    }
                }
                Coord::Bias { layer, idx } => {
                    if layer >= net.num_hidden_layers() || idx >= net.layer(layer).width() {
                        return Err(TrainError::Argument(format!("coordinate {c:?} out of range")));
                    }
                }
                Coord::HeadWeight { task, unit } => {
                    let ok = net
                        .head(task)
                        .is_some_and(|h| h.weights.contains_key(&unit));
                    if !ok {
                        return Err(TrainError::Argument(format!("coordinate {c:?} out of range")));
                    }
                }
                Coord::HeadBias { task } => {
                    if net.head(task).is_none() {
                        return Err(TrainError::Argument(format!("coordinate {c:?} out of range")));
                    }
                }
            }
        }
        Ok(TrainableSet { coords })
    }

    /// Every parameter of the network plus the given task head.
    pub fn all_params(net: &DenNetwork, task: TaskId) -> Result<Self, TrainError> {
        let mut coords = Vec::new();
        for l in 0..net.num_hidden_layers() {
            let layer = net.layer(l);
            for col in 0..layer.incoming.cols() {
                for row in 0..layer.incoming.rows() {
                    coords.push(Coord::Weight { layer: l, row, col });
                }
                coords.push(Coord::Bias { layer: l, idx: col });
            }
        }
        coords.extend(Self::head_coords(net, task)?);
        TrainableSet::new(coords, net)
    }

    /// Just the given task head (weights and bias).
    pub fn head_only(net: &DenNetwork, task: TaskId) -> Result<Self, TrainError> {
        TrainableSet::new(Self::head_coords(net, task)?, net)
    }

    pub fn head_coords(net: &DenNetwork, task: TaskId) -> Result<Vec<Coord>, TrainError> {
        let head = net.head(task).ok_or(NetError::MissingHead(task))?;
        let mut coords: Vec<Coord> = head
            .weights
            .keys()
            .map(|&unit| Coord::HeadWeight { task, unit })
            .collect();
        coords.push(Coord::HeadBias { task });
        Ok(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn index_of(&self, c: &Coord) -> Option<usize> {
        self.coords.binary_search(c).ok()
    }

    /// Indices (into the gathered vector) of weight-type coordinates; biases
    /// are excluded, matching the rule that sparsity penalties never touch
    /// biases.
    pub fn weight_indices(&self) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, Coord::Weight { .. } | Coord::HeadWeight { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// 1.0 for weight coordinates, 0.0 for biases — a fisher-style mask for
    /// weight decay penalties.
    pub fn weight_mask(&self) -> Vec<f64> {
        self.coords
            .iter()
            .map(|c| match c {
                Coord::Weight { .. } | Coord::HeadWeight { .. } => 1.0,
                _ => 0.0,
            })
            .collect()
    }

    pub fn gather(&self, net: &DenNetwork) -> Vec<f64> {
        self.coords
            .iter()
            .map(|c| match *c {
                Coord::Weight { layer, row, col } => net.weight(layer, row, col),
                Coord::Bias { layer, idx } => net.bias(layer, idx),
                Coord::HeadWeight { task, unit } => net.head_weight(task, unit),
                Coord::HeadBias { task } => net.head_bias(task),
            })
            .collect()
    }

    pub fn scatter(&self, net: &mut DenNetwork, theta: &[f64]) {
        debug_assert_eq!(theta.len(), self.coords.len());
        for (c, &v) in self.coords.iter().zip(theta) {
            match *c {
                Coord::Weight { layer, row, col } => net.set_weight(layer, row, col, v),
                Coord::Bias { layer, idx } => net.set_bias(layer, idx, v),
                Coord::HeadWeight { task, unit } => net.set_head_weight(task, unit, v),
                Coord::HeadBias { task } => net.set_head_bias(task, v),
            }
        }
    }

    /// Translates positional coordinates into structure-independent ones.
    pub fn stable_coords(&self, net: &DenNetwork) -> std::collections::BTreeSet<StableCoord> {
        self.coords
            .iter()
            .map(|c| match *c {
                Coord::Weight { layer, row, col } => {
                    let from = if layer == 0 {
                        Source::Input(row)
                    } else {
                        Source::Unit(net.layer(layer - 1).units[row].unit_id)
                    };
                    StableCoord::Edge {
                        from,
                        to: net.layer(layer).units[col].unit_id,
                    }
                }
                Coord::Bias { layer, idx } => StableCoord::Bias {
                    unit: net.layer(layer).units[idx].unit_id,
                },
                Coord::HeadWeight { task, unit } => StableCoord::HeadWeight { task, unit },
                Coord::HeadBias { task } => StableCoord::HeadBias { task },
            })
            .collect()
    }
}

/// Binary cross-entropy from the raw score, in overflow-safe form.
pub fn bce_loss_from_score(score: f64, y: f64) -> f64 {
    score.max(0.0) - score * y + (-score.abs()).exp().ln_1p()
}

/// d(loss)/d(score) = sigmoid(score) - y.
pub fn bce_grad_from_score(score: f64, y: f64) -> f64 {
    sigmoid(score) - y
}

/// Mean binary cross-entropy of the network on a batch (data term only).
pub fn mean_data_loss(
    net: &DenNetwork,
    batch: &[Example<'_>],
    task: TaskId,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Argument("empty batch".into()));
    }
    let mut work = crate::network::ScoreWorkspace::default();
    let mut acc = 0.0;
    for &(x, y) in batch {
        let score = net.state().forward_score(x, task, &mut work)?;
        acc += bce_loss_from_score(score, y);
    }
    Ok(acc / batch.len() as f64)
}

/// Dense gradient buffers shaped like the current network; only entries
/// visible to the evaluated task ever become nonzero.
struct GradAccum {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    head_w: BTreeMap<UnitId, f64>,
    head_b: f64,
    task: TaskId,
}

impl GradAccum {
    fn new(net: &DenNetwork, task: TaskId) -> Self {
        GradAccum {
            weights: (0..net.num_hidden_layers())
                .map(|l| vec![0.0; net.layer(l).incoming.rows() * net.layer(l).incoming.cols()])
                .collect(),
            biases: (0..net.num_hidden_layers())
                .map(|l| vec![0.0; net.layer(l).width()])
                .collect(),
            head_w: net
                .head(task)
                .map(|h| h.weights.keys().map(|&u| (u, 0.0)).collect())
                .unwrap_or_default(),
            head_b: 0.0,
            task,
        }
    }

    /// Backpropagates one example, accumulating into the buffers; returns the
    /// example's loss.
    fn accumulate(&mut self, net: &DenNetwork, x: &[f64], y: f64) -> Result<f64, TrainError> {
        let trace = net.forward_trace(x, self.task)?;
        let loss = bce_loss_from_score(trace.score, y);
        let dscore = bce_grad_from_score(trace.score, y);
        let top = net.num_hidden_layers() - 1;
        let head = net.head(self.task).expect("head checked by forward");

        // gradient wrt top activations, via the head
        let mut delta_act = vec![0.0; trace.active[top]];
        for (&uid, &w) in &head.weights {
            let idx = net.layer(top).index_of(uid).expect("head unit exists");
            delta_act[idx] += w * dscore;
            *self.head_w.get_mut(&uid).expect("buffer has head key") +=
                trace.acts[top][idx] * dscore;
        }
        self.head_b += dscore;

        for l in (0..=top).rev() {
            let n_out = trace.active[l];
            let n_in = if l == 0 { x.len() } else { trace.active[l - 1] };
            let cols = net.layer(l).incoming.cols();
            // through the ReLU
            let delta_pre: Vec<f64> = (0..n_out)
                .map(|j| {
                    if trace.preacts[l][j] > 0.0 {
                        delta_act[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let prev_act: &[f64] = if l == 0 { x } else { &trace.acts[l - 1] };
            let wbuf = &mut self.weights[l];
            for (j, &dp) in delta_pre.iter().enumerate() {
                self.biases[l][j] += dp;
            }
            // row-contiguous accumulation; rows with a zero activation only
            // contribute exact zeros and are skipped
            for (i, &pa) in prev_act.iter().enumerate().take(n_in) {
                if pa == 0.0 {
                    continue;
                }
                let row = &mut wbuf[i * cols..i * cols + n_out];
                for (w, &dp) in row.iter_mut().zip(&delta_pre) {
                    *w += pa * dp;
                }
            }
            if l > 0 {
                let mut prev_delta = vec![0.0; n_in];
                let layer = net.layer(l);
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (j, &dp) in delta_pre.iter().enumerate() {
                        s += layer.incoming.get(i, j) * dp;
                    }
                    *pd = s;
                }
                delta_act = prev_delta;
            }
        }
        Ok(loss)
    }

    fn gather(&self, net: &DenNetwork, trainable: &TrainableSet, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), trainable.len());
        for (o, c) in out.iter_mut().zip(trainable.coords()) {
            *o = scale
                * match *c {
                    Coord::Weight { layer, row, col } => {
                        self.weights[layer][row * net.layer(layer).incoming.cols() + col]
                    }
                    Coord::Bias { layer, idx } => self.biases[layer][idx],
                    Coord::HeadWeight { task, unit } => {
                        if task == self.task {
                            self.head_w.get(&unit).copied().unwrap_or(0.0)
                        } else {
                            0.0
                        }
                    }
                    Coord::HeadBias { task } => {
                        if task == self.task {
                            self.head_b
                        } else {
                            0.0
                        }
                    }
                };
        }
    }
}

/// Mean data-loss gradient over a batch, restricted to `trainable`. Returns
/// the gradient vector and the mean loss.
pub fn backprop(
    net: &DenNetwork,
    batch: &[Example<'_>],
    task: TaskId,
    trainable: &TrainableSet,
) -> Result<(Vec<f64>, f64), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Argument("empty batch".into()));
    }
    let mut acc = GradAccum::new(net, task);
    let mut loss = 0.0;
    for &(x, y) in batch {
        loss += acc.accumulate(net, x, y)?;
    }
    let n = batch.len() as f64;
    let mut out = vec![0.0; trainable.len()];
    acc.gather(net, trainable, 1.0 / n, &mut out);
    Ok((out, loss / n))
}

/// Single-example gradient of the Bernoulli log-likelihood magnitude
/// (identical to the per-example loss gradient up to sign), used for Fisher
/// information estimation.
pub fn example_gradient(
    net: &DenNetwork,
    x: &[f64],
    y: f64,
    task: TaskId,
    trainable: &TrainableSet,
    out: &mut [f64],
) -> Result<(), TrainError> {
    let mut acc = GradAccum::new(net, task);
    acc.accumulate(net, x, y)?;
    acc.gather(net, trainable, 1.0, out);
    Ok(())
}

/// A differentiable objective over a flat parameter vector.
pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&mut self, theta: &[f64]) -> Result<f64, TrainError>;
    /// Writes the gradient and returns the value at `theta`.
    fn value_and_grad(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<f64, TrainError>;
}

/// Nonsmooth part of an objective, handled by proximal maps. `l1_indices`
/// get elementwise soft-thresholding; each group gets block shrinkage on the
/// full group vector. Groups must be disjoint but may overlap the l1 set
/// (sparse-group composition applies the elementwise map first).
#[derive(Debug, Clone, Default)]
pub struct ProxSpec {
    pub l1_indices: Vec<usize>,
    pub l1_strength: f64,
    pub groups: Vec<Vec<usize>>,
    pub group_strength: f64,
}

impl ProxSpec {
    pub fn validate(&self, dim: usize) -> Result<(), TrainError> {
        if self.l1_strength < 0.0 || self.group_strength < 0.0 {
            return Err(TrainError::Argument("prox strengths must be nonnegative".into()));
        }
        if self.l1_indices.iter().any(|&i| i >= dim) {
            return Err(TrainError::Argument("l1 index out of range".into()));
        }
        GroupSpec {
            groups: self.groups.clone(),
        }
        .validate(dim)?;
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        (self.l1_indices.is_empty() || self.l1_strength == 0.0)
            && (self.groups.is_empty() || self.group_strength == 0.0)
    }

    fn apply(&self, theta: &mut [f64], step: f64) -> Result<(), TrainError> {
        let l1_thr = self.l1_strength * step;
        if l1_thr > 0.0 {
            for &i in &self.l1_indices {
                theta[i] = soft_threshold(theta[i], l1_thr)?;
            }
        }
        let g_thr = self.group_strength * step;
        if g_thr > 0.0 {
            for g in &self.groups {
                let v: Vec<f64> = g.iter().map(|&i| theta[i]).collect();
                let s = group_shrink(&v, g_thr)?;
                for (&i, &val) in g.iter().zip(&s) {
                    theta[i] = val;
                }
            }
        }
        Ok(())
    }

    /// Penalty value at `theta` (included in the monitored objective).
    pub fn penalty_value(&self, theta: &[f64]) -> f64 {
        let mut v = 0.0;
        if self.l1_strength > 0.0 {
            v += self.l1_strength * self.l1_indices.iter().map(|&i| theta[i].abs()).sum::<f64>();
        }
        if self.group_strength > 0.0 {
            for g in self.groups.iter() {
                v += self.group_strength
                    * g.iter().map(|&i| theta[i] * theta[i]).sum::<f64>().sqrt();
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome {
    pub objective: f64,
    pub epochs: usize,
    pub halvings: usize,
}

const MAX_HALVINGS: usize = 10;

fn descent_slack(prev: f64) -> f64 {
    1e-12 * prev.abs().max(1.0)
}

/// Full-batch proximal gradient descent with step halving. A step that turns
/// the objective non-finite or increases it beyond slack halves the learning
/// rate (at most [`MAX_HALVINGS`] times) and retries; exhausted halvings on a
/// non-finite objective is a divergence error, while exhausted halvings on a
/// mere non-decrease stops at the current iterate. The monitored objective
/// includes the nonsmooth penalty values, so it is non-increasing across
/// accepted epochs.
pub fn proximal_descent<O: SmoothObjective + ?Sized>(
    obj: &mut O,
    theta: &mut Vec<f64>,
    prox: Option<&ProxSpec>,
    cfg: &TrainConfig,
) -> Result<DescentOutcome, TrainError> {
    cfg.validate()?;
    if let Some(p) = prox {
        p.validate(theta.len())?;
    }
    let penalty = |t: &[f64]| prox.map_or(0.0, |p| p.penalty_value(t));
    let mut eta = cfg.learning_rate;
    let mut halvings = 0;
    let mut grad = vec![0.0; theta.len()];
    let mut prev_obj = obj.value(theta)? + penalty(theta);
    if !prev_obj.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    let mut epochs = 0;
    'outer: for epoch in 1..=cfg.max_epochs {
        obj.value_and_grad(theta, &mut grad)?;
        let accepted;
        loop {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - eta * g)
                .collect();
            if let Some(p) = prox {
                p.apply(&mut cand, eta)?;
            }
            let cand_obj = obj.value(&cand)? + penalty(&cand);
            if cand_obj.is_finite() && cand_obj <= prev_obj + descent_slack(prev_obj) {
                accepted = Some((cand, cand_obj));
                break;
            }
            if halvings >= MAX_HALVINGS {
                if !cand_obj.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                // cannot make progress at the smallest step: stop here
                epochs = epoch;
                break 'outer;
            }
            eta *= 0.5;
            halvings += 1;
        }
        let (cand, cand_obj) = accepted.expect("loop exits set a candidate");
        let change = prev_obj - cand_obj;
        *theta = cand;
        prev_obj = cand_obj;
        epochs = epoch;
        if change.abs() <= cfg.tol * prev_obj.abs().max(1.0) {
            break;
        }
    }
    Ok(DescentOutcome {
        objective: prev_obj,
        epochs,
        halvings,
    })
}

/// Network objective: mean batch cross-entropy at the scattered parameters
/// plus any quadratic anchor penalties, over one trainable set.
pub struct NetObjective<'a> {
    pub net: &'a mut DenNetwork,
    pub batch: &'a [Example<'a>],
    pub task: TaskId,
    pub trainable: &'a TrainableSet,
    pub penalties: &'a [AnchorPenalty],
}

impl SmoothObjective for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.trainable.len()
    }

    fn value(&mut self, theta: &[f64]) -> Result<f64, TrainError> {
        self.trainable.scatter(self.net, theta);
        let mut v = mean_data_loss(self.net, self.batch, self.task)?;
        for p in self.penalties {
            v += p.value(theta);
        }
        Ok(v)
    }

    fn value_and_grad(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<f64, TrainError> {
        self.trainable.scatter(self.net, theta);
        let (g, mut v) = backprop(self.net, self.batch, self.task, self.trainable)?;
        grad.copy_from_slice(&g);
        for p in self.penalties {
            v += p.value(theta);
            p.add_grad(theta, grad);
        }
        Ok(v)
    }
}

/// Trains the network on one batch: gradient steps on the data loss plus
/// smooth penalties over `trainable`, then proximal maps for the nonsmooth
/// part. Returns the final objective value (loss plus all penalty values).
/// Coordinates outside `trainable` are bit-identical afterwards.
pub fn train(
    net: &mut DenNetwork,
    batch: &[Example<'_>],
    task: TaskId,
    trainable: &TrainableSet,
    penalties: &[AnchorPenalty],
    prox: Option<&ProxSpec>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Argument("empty batch".into()));
    }
    if net.head(task).is_none() {
        return Err(NetError::MissingHead(task).into());
    }
    for p in penalties {
        if p.anchor.len() != trainable.len() {
            return Err(TrainError::Argument(format!(
                "anchor penalty dimension {} != trainable dimension {}",
                p.anchor.len(),
                trainable.len()
            )));
        }
    }
    let mut theta = trainable.gather(net);
    let outcome = {
        let mut obj = NetObjective {
            net,
            batch,
            task,
            trainable,
            penalties,
        };
        proximal_descent(&mut obj, &mut theta, prox, cfg)?
    };
    trainable.scatter(net, &theta);
    Ok(outcome.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, SeededRng};
    use crate::tasks::Example;

    fn small_net(seed: u64) -> (DenNetwork, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let mut net = DenNetwork::new(4, &[5, 3], &mut rng).unwrap();
        net.add_head(1).unwrap();
        // nonzero head so gradients flow everywhere
        let uids: Vec<UnitId> = net.layer(1).units.iter().map(|u| u.unit_id).collect();
        for uid in uids {
            let v = rng.uniform(-0.8, 0.8);
            net.set_head_weight(1, uid, v);
        }
        (net, rng)
    }

    fn random_batch(rng: &mut SeededRng, n: usize, d: usize) -> Vec<(Vec<f64>, f64)> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let y = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                (x, y)
            })
            .collect()
    }

    fn as_examples(data: &[(Vec<f64>, f64)]) -> Vec<Example<'_>> {
        data.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss_from_score(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(bce_grad_from_score(0.0, 1.0), -0.5);
        assert_eq!(bce_loss_from_score(-1000.0, 0.0), 0.0);
        // gradient matches a central difference on the score
        let y = 1.0;
        let g = finite_diff_grad(|s| bce_loss_from_score(s[0], y), &[0.3], 1e-6).unwrap();
        assert!((g[0] - bce_grad_from_score(0.3, y)).abs() < 1e-8);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::new(0.0, 10, 1e-5).is_err());
        assert!(TrainConfig::new(0.1, 0, 1e-5).is_err());
        assert!(TrainConfig::new(0.1, 10, -1.0).is_err());
        assert!(TrainConfig::new(0.1, 10, 0.0).is_ok());
    }

    #[test]
    fn zero_net_balanced_labels_zero_bias_gradient() {
        let mut rng = SeededRng::new(2);
        let mut net = DenNetwork::new(2, &[2], &mut rng).unwrap();
        for c in 0..2 {
            for r in 0..2 {
                net.set_weight(0, r, c, 0.0);
            }
        }
        net.add_head(1).unwrap();
        let data = vec![
            (vec![1.0, 0.0], 1.0),
            (vec![0.0, 1.0], 0.0),
            (vec![-1.0, 2.0], 1.0),
            (vec![2.0, -1.0], 0.0),
        ];
        let batch = as_examples(&data);
        let set = TrainableSet::all_params(&net, 1).unwrap();
        let (g, _) = backprop(&net, &batch, 1, &set).unwrap();
        let hb = set.index_of(&Coord::HeadBias { task: 1 }).unwrap();
        assert_eq!(g[hb], 0.0);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let (mut net, mut rng) = small_net(31);
        let data = random_batch(&mut rng, 8, 4);
        let batch = as_examples(&data);
        let set = TrainableSet::all_params(&net, 1).unwrap();
        let (analytic, _) = backprop(&net, &batch, 1, &set).unwrap();
        let theta0 = set.gather(&net);
        let numeric = finite_diff_grad(
            |t| {
                set.scatter(&mut net, t);
                mean_data_loss(&net, &batch, 1).unwrap()
            },
            &theta0,
            1e-5,
        )
        .unwrap();
        set.scatter(&mut net, &theta0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / scale < 1e-6,
                "coordinate {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn frozen_coordinates_are_bit_identical_after_training() {
        let (mut net, mut rng) = small_net(32);
        let data = random_batch(&mut rng, 16, 4);
        let batch = as_examples(&data);
        // train only the head
        let set = TrainableSet::head_only(&net, 1).unwrap();
        let before = net.parameter_map();
        train(
            &mut net,
            &batch,
            1,
            &set,
            &[],
            None,
            &TrainConfig::new(0.2, 50, 1e-9).unwrap(),
        )
        .unwrap();
        let after = net.parameter_map();
        let stable = set.stable_coords(&net);
        for (k, v) in &before {
            if !stable.contains(k) {
                assert_eq!(
                    v.to_bits(),
                    after[k].to_bits(),
                    "frozen coordinate {k:?} moved"
                );
            }
        }
        // the head did move
        assert!(stable.iter().any(|k| before[k].to_bits() != after[k].to_bits()));
    }

    /// min over theta of 0.5*(theta - 3)^2 + |theta|, solved by the descent
    /// loop on a hand-rolled objective; the fixed point is exactly 2.
    struct ShiftedQuadratic;

    impl SmoothObjective for ShiftedQuadratic {
        fn dim(&self) -> usize {
            1
        }
        fn value(&mut self, t: &[f64]) -> Result<f64, TrainError> {
            Ok(0.5 * (t[0] - 3.0) * (t[0] - 3.0))
        }
        fn value_and_grad(&mut self, t: &[f64], g: &mut [f64]) -> Result<f64, TrainError> {
            g[0] = t[0] - 3.0;
            self.value(t)
        }
    }

    #[test]
    fn one_parameter_prox_problem_converges_to_two() {
        let prox = ProxSpec {
            l1_indices: vec![0],
            l1_strength: 1.0,
            ..Default::default()
        };
        let mut theta = vec![0.0];
        let cfg = TrainConfig::new(0.1, 2000, 0.0).unwrap();
        let out = proximal_descent(&mut ShiftedQuadratic, &mut theta, Some(&prox), &cfg).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-6, "got {}", theta[0]);
        assert!((out.objective - 2.5).abs() < 1e-5);
    }

    #[test]
    fn descent_is_monotone_and_recovers_from_large_steps() {
        // deliberately oversized learning rate: halving must rescue it
        let mut theta = vec![50.0];
        let cfg = TrainConfig::new(6.4, 300, 1e-12).unwrap();
        let out = proximal_descent(&mut ShiftedQuadratic, &mut theta, None, &cfg).unwrap();
        assert!(out.halvings > 0);
        assert!((theta[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn dominant_l1_zeroes_every_regularized_coordinate() {
        let (mut net, mut rng) = small_net(33);
        let data = random_batch(&mut rng, 12, 4);
        let batch = as_examples(&data);
        let set = TrainableSet::all_params(&net, 1).unwrap();
        let prox = ProxSpec {
            l1_indices: set.weight_indices(),
            l1_strength: 1e4,
            ..Default::default()
        };
        train(
            &mut net,
            &batch,
            1,
            &set,
            &[],
            Some(&prox),
            &TrainConfig::default(),
        )
        .unwrap();
        let theta = set.gather(&net);
        for &i in &prox.l1_indices {
            assert_eq!(theta[i], 0.0, "coordinate {i} not exactly zero");
        }
    }

    #[test]
    fn exact_zeros_or_clearly_away_from_threshold() {
        let (mut net, mut rng) = small_net(34);
        let data = random_batch(&mut rng, 16, 4);
        let batch = as_examples(&data);
        let set = TrainableSet::all_params(&net, 1).unwrap();
        let prox = ProxSpec {
            l1_indices: set.weight_indices(),
            l1_strength: 0.02,
            ..Default::default()
        };
        train(
            &mut net,
            &batch,
            1,
            &set,
            &[],
            Some(&prox),
            &TrainConfig::default(),
        )
        .unwrap();
        let theta = set.gather(&net);
        for &i in &prox.l1_indices {
            let v = theta[i].abs();
            assert!(
                v == 0.0 || v > 1e-12,
                "coordinate {i} stuck in machine-noise limbo: {v}"
            );
        }
    }

    #[test]
    fn anchor_penalty_holds_parameters_near_anchor() {
        let (mut net, mut rng) = small_net(35);
        let data = random_batch(&mut rng, 12, 4);
        let batch = as_examples(&data);
        let set = TrainableSet::all_params(&net, 1).unwrap();
        let anchor = set.gather(&net);
        let pen = AnchorPenalty::new(anchor.clone(), 1e6, None).unwrap();
        train(
            &mut net,
            &batch,
            1,
            &set,
            &[pen],
            None,
            &TrainConfig::default(),
        )
        .unwrap();
        let theta = set.gather(&net);
        for (a, t) in anchor.iter().zip(&theta) {
            assert!((a - t).abs() < 1e-4, "parameter escaped a strong anchor");
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (mut net, _) = small_net(36);
        let set = TrainableSet::head_only(&net, 1).unwrap();
        let err = train(
            &mut net,
            &[],
            1,
            &set,
            &[],
            None,
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(TrainError::Argument(_))));
    }
}
