//! Comparison learners: a fixed net continuously retrained under a quadratic
//! anchor to the previous stage (optionally Fisher-weighted per task), one
//! fresh network per task, and fixed-width progressive columns with lateral
//! connections and frozen history.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::network::{DenNetwork, TaskId, UnitId};
use crate::numerics::SeededRng;
use crate::regularizers::{fisher_diagonal, AnchorPenalty};
use crate::tasks::{Split, TaskDataset};
use crate::trainer::{self, Coord, TrainableSet};

use super::{check_order, HyperParams, Learner, LifelongError, StageAudit, StageReport};

fn plain_report(
    task: TaskId,
    loss: f64,
    capacity_before: usize,
    capacity_after: usize,
    start: Instant,
    audit: StageAudit,
) -> StageReport {
    StageReport {
        task_id: task,
        retrain_loss: loss,
        expansion: Vec::new(),
        split_count: 0,
        drift: super::DriftReport::default(),
        capacity_before,
        capacity_after,
        wall_ms: start.elapsed().as_millis() as u64,
        audit,
    }
}

use super::snapshot_anchor;

/// Fixed-architecture network, initialized from the previous stage and
/// continuously retrained with a quadratic anchor to it.
pub struct L2Learner {
    pub name: String,
    pub net: DenNetwork,
    pub rng: SeededRng,
    pub hp: HyperParams,
}

impl L2Learner {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, LifelongError> {
        hp.validate()?;
        let mut rng = SeededRng::new(seed);
        let net = DenNetwork::new(input_dim, hidden, &mut rng)?;
        Ok(L2Learner {
            name: name.into(),
            net,
            rng,
            hp,
        })
    }
}

impl Learner for L2Learner {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        let t = data.task_id;
        check_order(self.net.current_stage(), t)?;
        let start = Instant::now();
        let capacity_before = self.net.capacity();
        self.net.add_head(t)?;
        let batch = data.examples(Split::Train);
        let trainable = TrainableSet::all_params(&self.net, t)?;
        let penalties = if t > 1 && self.hp.lambda > 0.0 {
            let anchor = snapshot_anchor(&self.net, &trainable);
            vec![AnchorPenalty::new(anchor, self.hp.lambda, None)?]
        } else {
            Vec::new()
        };
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &penalties,
            None,
            &self.hp.train,
        )?;
        let loss = trainer::mean_data_loss(&self.net, &batch, t)?;
        let audit = StageAudit {
            trainable: trainable.stable_coords(&self.net),
            ..Default::default()
        };
        self.net.snapshot_commit();
        Ok(plain_report(
            t,
            loss,
            capacity_before,
            self.net.capacity(),
            start,
            audit,
        ))
    }

    fn predict(&self, task: TaskId, x: &[f64]) -> Result<f64, LifelongError> {
        Ok(self.net.forward(x, task)?)
    }

    fn capacity(&self) -> usize {
        self.net.capacity()
    }

    fn tasks_seen(&self) -> TaskId {
        self.net.current_stage() - 1
    }

    fn checkpoint_json(&self) -> Option<String> {
        Some(self.net.to_checkpoint_json(&self.rng))
    }
}

/// Like [`L2Learner`], but each finished task leaves behind a quadratic
/// anchor weighted by its empirical diagonal Fisher information; all stored
/// anchors act simultaneously on later stages.
pub struct EwcLearner {
    pub name: String,
    pub net: DenNetwork,
    pub rng: SeededRng,
    pub hp: HyperParams,
    /// Scales every stored Fisher diagonal; 1.0 is the real thing, 0.0
    /// degenerates the penalty for baseline-equivalence checks.
    pub fisher_scale: f64,
    consolidated: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EwcLearner {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, LifelongError> {
        hp.validate()?;
        let mut rng = SeededRng::new(seed);
        let net = DenNetwork::new(input_dim, hidden, &mut rng)?;
        Ok(EwcLearner {
            name: name.into(),
            net,
            rng,
            hp,
            fisher_scale: 1.0,
            consolidated: Vec::new(),
        })
    }

    /// Body coordinates (weights and biases, no heads) — the parameter order
    /// every stored anchor aligns to. This is a prefix of every per-task
    /// trainable set because head coordinates sort last.
    fn body_set(&self) -> Result<TrainableSet, LifelongError> {
        let net = &self.net;
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
        Ok(TrainableSet::new(coords, net)?)
    }
}

impl Learner for EwcLearner {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        let t = data.task_id;
        check_order(self.net.current_stage(), t)?;
        let start = Instant::now();
        let capacity_before = self.net.capacity();
        self.net.add_head(t)?;
        let batch = data.examples(Split::Train);
        let body = self.body_set()?;
        let trainable = TrainableSet::all_params(&self.net, t)?;
        debug_assert_eq!(&trainable.coords()[..body.len()], body.coords());
        let head_len = trainable.len() - body.len();
        let gathered = trainable.gather(&self.net);
        let head_current = &gathered[body.len()..];
        let mut penalties = Vec::with_capacity(self.consolidated.len());
        for (anchor_body, fisher_body) in &self.consolidated {
            let mut anchor = anchor_body.clone();
            anchor.extend_from_slice(head_current);
            let mut fisher: Vec<f64> =
                fisher_body.iter().map(|f| f * self.fisher_scale).collect();
            fisher.extend(std::iter::repeat(0.0).take(head_len));
            penalties.push(AnchorPenalty::new(anchor, self.hp.lambda, Some(fisher))?);
        }
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &penalties,
            None,
            &self.hp.train,
        )?;
        let loss = trainer::mean_data_loss(&self.net, &batch, t)?;
        let fisher = fisher_diagonal(&self.net, t, &batch, &body)?;
        self.consolidated.push((body.gather(&self.net), fisher));
        let audit = StageAudit {
            trainable: trainable.stable_coords(&self.net),
            ..Default::default()
        };
        self.net.snapshot_commit();
        Ok(plain_report(
            t,
            loss,
            capacity_before,
            self.net.capacity(),
            start,
            audit,
        ))
    }

    fn predict(&self, task: TaskId, x: &[f64]) -> Result<f64, LifelongError> {
        Ok(self.net.forward(x, task)?)
    }

    fn capacity(&self) -> usize {
        self.net.capacity()
    }

    fn tasks_seen(&self) -> TaskId {
        self.net.current_stage() - 1
    }

    fn checkpoint_json(&self) -> Option<String> {
        Some(self.net.to_checkpoint_json(&self.rng))
    }
}

/// One independent network per task; capacity grows exactly linearly in the
/// number of tasks.
pub struct StlLearner {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub hp: HyperParams,
    pub rng: SeededRng,
    pub nets: Vec<DenNetwork>,
}

impl StlLearner {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, LifelongError> {
        hp.validate()?;
        Ok(StlLearner {
            name: name.into(),
            input_dim,
            hidden: hidden.to_vec(),
            hp,
            rng: SeededRng::new(seed),
            nets: Vec::new(),
        })
    }
}

impl Learner for StlLearner {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        let t = data.task_id;
        check_order(self.nets.len() as TaskId + 1, t)?;
        let start = Instant::now();
        let capacity_before = self.capacity();
        let mut net = DenNetwork::new(self.input_dim, &self.hidden, &mut self.rng)?;
        net.add_head(t)?;
        let batch = data.examples(Split::Train);
        let trainable = TrainableSet::all_params(&net, t)?;
        trainer::train(&mut net, &batch, t, &trainable, &[], None, &self.hp.train)?;
        let loss = trainer::mean_data_loss(&net, &batch, t)?;
        let audit = StageAudit {
            trainable: trainable.stable_coords(&net),
            ..Default::default()
        };
        self.nets.push(net);
        Ok(plain_report(
            t,
            loss,
            capacity_before,
            self.capacity(),
            start,
            audit,
        ))
    }

    fn predict(&self, task: TaskId, x: &[f64]) -> Result<f64, LifelongError> {
        let net = self
            .nets
            .get(task as usize - 1)
            .ok_or(crate::network::NetError::MissingHead(task))?;
        Ok(net.forward(x, task)?)
    }

    fn capacity(&self) -> usize {
        self.nets.iter().map(|n| n.capacity()).sum()
    }

    fn tasks_seen(&self) -> TaskId {
        self.nets.len() as TaskId
    }

    fn checkpoint_json(&self) -> Option<String> {
        None
    }
}

/// Progressive columns: task 1 trains the base network; each later task adds
/// a column of `k` units per hidden layer that reads every earlier column
/// through lateral incoming edges but never writes back (edges from new
/// units into old ones are pinned at zero and old parameters are frozen).
pub struct ProgressiveLearner {
    pub name: String,
    pub net: DenNetwork,
    pub rng: SeededRng,
    pub hp: HyperParams,
}

impl ProgressiveLearner {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, LifelongError> {
        hp.validate()?;
        let mut rng = SeededRng::new(seed);
        let net = DenNetwork::new(input_dim, hidden, &mut rng)?;
        Ok(ProgressiveLearner {
            name: name.into(),
            net,
            rng,
            hp,
        })
    }
}

impl Learner for ProgressiveLearner {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        let t = data.task_id;
        check_order(self.net.current_stage(), t)?;
        let start = Instant::now();
        let capacity_before = self.net.capacity();
        let batch = data.examples(Split::Train);
        let depth = self.net.num_hidden_layers();
        let trainable = if t == 1 {
            self.net.add_head(1)?;
            TrainableSet::all_params(&self.net, 1)?
        } else {
            // new column of k units per layer
            let mut column: Vec<Vec<UnitId>> = Vec::with_capacity(depth);
            for l in 0..depth {
                column.push(self.net.add_units(l, self.hp.k, &mut self.rng)?);
            }
            // pin edges from the new column into older units at zero
            for l in 0..depth.saturating_sub(1) {
                for &uid in &column[l] {
                    let row = self.net.layer(l).index_of(uid).expect("new unit present");
                    let old_cols: Vec<usize> = (0..self.net.layer(l + 1).width())
                        .filter(|&c| self.net.layer(l + 1).units[c].timestamp < t)
                        .collect();
                    for c in old_cols {
                        self.net.set_weight(l + 1, row, c, 0.0);
                    }
                }
            }
            self.net.add_head(t)?;
            // trainable: the new column's incoming edges (laterals from every
            // earlier column included), its biases, and the head entries that
            // read the new column's top units
            let mut coords = Vec::new();
            for (l, ids) in column.iter().enumerate() {
                for &uid in ids {
                    let col = self.net.layer(l).index_of(uid).expect("new unit present");
                    for row in 0..self.net.layer(l).incoming.rows() {
                        coords.push(Coord::Weight { layer: l, row, col });
                    }
                    coords.push(Coord::Bias { layer: l, idx: col });
                }
            }
            for &uid in &column[depth - 1] {
                coords.push(Coord::HeadWeight { task: t, unit: uid });
            }
            coords.push(Coord::HeadBias { task: t });
            TrainableSet::new(coords, &self.net)?
        };
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &[],
            None,
            &self.hp.train,
        )?;
        let loss = trainer::mean_data_loss(&self.net, &batch, t)?;
        let created_units: BTreeSet<UnitId> = self
            .net
            .units_stamped(t)
            .into_iter()
            .map(|(_, u)| u)
            .collect();
        let audit = StageAudit {
            trainable: trainable.stable_coords(&self.net),
            created_units,
            ..Default::default()
        };
        self.net.snapshot_commit();
        Ok(plain_report(
            t,
            loss,
            capacity_before,
            self.net.capacity(),
            start,
            audit,
        ))
    }

    fn predict(&self, task: TaskId, x: &[f64]) -> Result<f64, LifelongError> {
        Ok(self.net.forward(x, task)?)
    }

    fn capacity(&self) -> usize {
        self.net.capacity()
    }

    fn tasks_seen(&self) -> TaskId {
        self.net.current_stage() - 1
    }

    fn checkpoint_json(&self) -> Option<String> {
        Some(self.net.to_checkpoint_json(&self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::StableCoord;
    use crate::numerics::SeededRng;
    use crate::tasks::{generate, TaskFamily, TaskFamilyConfig};
    use crate::trainer::TrainConfig;

    fn small_tasks(count: u32, seed: u64) -> Vec<crate::tasks::TaskDataset> {
        generate(&TaskFamilyConfig {
            family: TaskFamily::SharedStructure,
            task_count: count,
            feature_dim: 8,
            n_train: 40,
            n_val: 8,
            n_test: 40,
            relatedness: 0.5,
            noise_std: 0.3,
            seed,
        })
        .unwrap()
    }

    fn small_hp() -> HyperParams {
        HyperParams {
            train: TrainConfig::new(0.1, 150, 1e-6).unwrap(),
            ..Default::default()
        }
    }

    fn probes(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn progressive_freezes_previous_columns_bit_exactly() {
        let tasks = small_tasks(3, 31);
        let mut learner = ProgressiveLearner::new("prog", 8, &[6, 4], small_hp(), 1).unwrap();
        learner.observe(&tasks[0]).unwrap();
        let xs = probes(5, 8, 32);
        let params_after_1 = learner.net.parameter_map();
        let preds_1: Vec<f64> = xs.iter().map(|x| learner.predict(1, x).unwrap()).collect();
        learner.observe(&tasks[1]).unwrap();
        let params_after_2 = learner.net.parameter_map();
        learner.observe(&tasks[2]).unwrap();
        let params_after_3 = learner.net.parameter_map();
        // every stage-1 parameter survives stages 2 and 3 bit-identically
        for (k, v) in &params_after_1 {
            assert_eq!(params_after_2[k].to_bits(), v.to_bits(), "{k:?} changed at stage 2");
            assert_eq!(params_after_3[k].to_bits(), v.to_bits(), "{k:?} changed at stage 3");
        }
        // and stage-2 parameters survive stage 3
        for (k, v) in &params_after_2 {
            assert_eq!(params_after_3[k].to_bits(), v.to_bits(), "{k:?} changed at stage 3");
        }
        // old-task predictions are bit-identical too
        for (x, p) in xs.iter().zip(&preds_1) {
            assert_eq!(learner.predict(1, x).unwrap().to_bits(), p.to_bits());
        }
    }

    #[test]
    fn progressive_new_units_never_write_into_old_columns() {
        let tasks = small_tasks(2, 33);
        let mut learner = ProgressiveLearner::new("prog", 8, &[6, 4], small_hp(), 2).unwrap();
        learner.observe(&tasks[0]).unwrap();
        learner.observe(&tasks[1]).unwrap();
        let net = &learner.net;
        for l in 0..net.num_hidden_layers() - 1 {
            let above = net.layer(l + 1);
            for (row, unit) in net.layer(l).units.iter().enumerate() {
                if unit.timestamp < 2 {
                    continue;
                }
                for (col, target) in above.units.iter().enumerate() {
                    if target.timestamp < unit.timestamp {
                        assert_eq!(
                            above.incoming.get(row, col),
                            0.0,
                            "edge from new {} into old {} is nonzero",
                            unit.unit_id,
                            target.unit_id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ewc_with_zero_fisher_matches_unanchored_l2_trajectory() {
        let tasks = small_tasks(3, 34);
        let mut ewc = EwcLearner::new("ewc", 8, &[6, 4], small_hp(), 3).unwrap();
        ewc.fisher_scale = 0.0;
        let mut l2 = L2Learner::new("l2", 8, &[6, 4], small_hp(), 3).unwrap();
        l2.hp.lambda = 0.0;
        for data in &tasks {
            ewc.observe(data).unwrap();
            l2.observe(data).unwrap();
            let pe = ewc.net.parameter_map();
            let pl = l2.net.parameter_map();
            assert_eq!(pe.len(), pl.len());
            for (k, v) in &pe {
                assert!(
                    (v - pl[&k]).abs() <= 1e-9,
                    "{k:?}: ewc {v} vs l2 {}",
                    pl[&k]
                );
            }
        }
    }

    #[test]
    fn ewc_fisher_anchors_are_nonnegative_and_penalize_movement() {
        let tasks = small_tasks(2, 35);
        let mut ewc = EwcLearner::new("ewc", 8, &[6, 4], small_hp(), 4).unwrap();
        ewc.observe(&tasks[0]).unwrap();
        let (anchor, fisher) = ewc.consolidated[0].clone();
        assert!(fisher.iter().all(|&f| f >= 0.0 && f.is_finite()));
        assert_eq!(anchor.len(), fisher.len());
        assert!(fisher.iter().any(|&f| f > 0.0), "fisher came out identically zero");
        ewc.observe(&tasks[1]).unwrap();
        assert_eq!(ewc.consolidated.len(), 2);
    }

    #[test]
    fn l2_anchor_limits_body_movement() {
        let tasks = small_tasks(2, 36);
        let mut strong = L2Learner::new("l2", 8, &[6, 4], small_hp(), 5).unwrap();
        strong.hp.lambda = 1e6;
        strong.observe(&tasks[0]).unwrap();
        let before = strong.net.parameter_map();
        strong.observe(&tasks[1]).unwrap();
        for (k, v) in strong.net.parameter_map() {
            if let Some(prev) = before.get(&k) {
                if matches!(k, StableCoord::Edge { .. } | StableCoord::Bias { .. }) {
                    assert!((v - prev).abs() < 1e-3, "{k:?} escaped a strong anchor");
                }
            }
        }
    }

    #[test]
    fn stl_capacity_is_exactly_linear() {
        let tasks = small_tasks(3, 37);
        let mut stl = StlLearner::new("stl", 8, &[6, 4], small_hp(), 6).unwrap();
        let mut caps = Vec::new();
        for data in &tasks {
            stl.observe(data).unwrap();
            caps.push(stl.capacity());
        }
        assert_eq!(caps[0] * 2, caps[1]);
        assert_eq!(caps[0] * 3, caps[2]);
        assert!(stl.checkpoint_json().is_none());
        // each per-task net predicts with its own head
        let x = probes(1, 8, 38).pop().unwrap();
        for t in 1..=3 {
            stl.predict(t, &x).unwrap();
        }
        assert!(stl.predict(4, &x).is_err());
    }

    #[test]
    fn baselines_reject_out_of_order_tasks() {
        let tasks = small_tasks(2, 39);
        let mut l2 = L2Learner::new("l2", 8, &[6, 4], small_hp(), 7).unwrap();
        assert!(matches!(
            l2.observe(&tasks[1]),
            Err(LifelongError::OutOfOrder { .. })
        ));
        let mut stl = StlLearner::new("stl", 8, &[6, 4], small_hp(), 8).unwrap();
        assert!(matches!(
            stl.observe(&tasks[1]),
            Err(LifelongError::OutOfOrder { .. })
        ));
    }
}
