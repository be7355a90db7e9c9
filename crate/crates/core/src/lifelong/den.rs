//! The dynamically expandable network pipeline. Each incremental stage fits
//! a sparse head for the new task, walks the nonzero weights breadth-first to
//! pick the subnetwork worth retraining, retrains exactly that, expands
//! capacity with group-sparse pruning when the loss stays above threshold,
//! and finally splits units whose incoming weights drifted beyond the drift
//! threshold — restoring the originals so earlier tasks keep their features.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::network::{DenNetwork, TaskId, UnitId};
use crate::numerics::SeededRng;
use crate::regularizers::AnchorPenalty;
use crate::tasks::{Split, TaskDataset};
use crate::trainer::{self, Coord, ProxSpec, TrainableSet};

use super::{
    check_order, non_head_mask, snapshot_anchor, DriftEntry, DriftReport, HyperParams, Learner,
    LayerExpansion, LifelongError, StageAudit, StageReport, SubnetworkSelection,
};

pub struct DenLearner {
    pub name: String,
    pub net: DenNetwork,
    pub rng: SeededRng,
    pub hp: HyperParams,
}

impl DenLearner {
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
        Ok(DenLearner {
            name: name.into(),
            net,
            rng,
            hp,
        })
    }

    /// First stage: train every parameter with elementwise l1 so the network
    /// starts sparse, then freeze the snapshot.
    pub fn den_first_task(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        check_order(1, self.net.current_stage())?;
        check_order(1, data.task_id)?;
        let start = Instant::now();
        let capacity_before = self.net.capacity();
        self.net.add_head(1)?;
        let batch = data.examples(Split::Train);
        let trainable = TrainableSet::all_params(&self.net, 1)?;
        let prox = ProxSpec {
            l1_indices: trainable.weight_indices(),
            l1_strength: self.hp.mu,
            ..Default::default()
        };
        trainer::train(
            &mut self.net,
            &batch,
            1,
            &trainable,
            &[],
            Some(&prox),
            &self.hp.train,
        )?;
        let retrain_loss = trainer::mean_data_loss(&self.net, &batch, 1)?;
        let audit = StageAudit {
            trainable: trainable.stable_coords(&self.net),
            ..Default::default()
        };
        self.net.snapshot_commit();
        Ok(StageReport {
            task_id: 1,
            retrain_loss,
            expansion: Vec::new(),
            split_count: 0,
            drift: DriftReport::default(),
            capacity_before,
            capacity_after: self.net.capacity(),
            wall_ms: start.elapsed().as_millis() as u64,
            audit,
        })
    }

    /// Fits a sparse linear head for the current task over the top hidden
    /// units, leaving every other parameter frozen at its snapshot value.
    pub fn fit_output_head(&mut self, data: &TaskDataset) -> Result<(), LifelongError> {
        let t = self.net.current_stage();
        self.net.add_head(t)?;
        let batch = data.examples(Split::Train);
        let trainable = TrainableSet::head_only(&self.net, t)?;
        let prox = ProxSpec {
            l1_indices: trainable.weight_indices(),
            l1_strength: self.hp.mu,
            ..Default::default()
        };
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &[],
            Some(&prox),
            &self.hp.train,
        )?;
        Ok(())
    }

    /// Breadth-first walk from the nonzero head weights down through nonzero
    /// previous-stage weights. Returns the selected units, the input features
    /// they reach, and the trainable set they induce: edges between selected
    /// units in adjacent layers, their biases, and the task head.
    pub fn select_subnetwork(&self) -> Result<SubnetworkSelection, LifelongError> {
        let t = self.net.current_stage();
        let net = &self.net;
        let head = net
            .head(t)
            .ok_or(crate::network::NetError::MissingHead(t))?;
        let depth = net.num_hidden_layers();
        let mut hidden: Vec<BTreeSet<UnitId>> = vec![BTreeSet::new(); depth];
        hidden[depth - 1] = head
            .weights
            .iter()
            .filter(|(_, &w)| w != 0.0)
            .map(|(&u, _)| u)
            .collect();
        for l in (0..depth - 1).rev() {
            let above = &net.layer(l + 1);
            let mut sel = BTreeSet::new();
            for unit in &net.layer(l).units {
                let row = net.layer(l).index_of(unit.unit_id).expect("unit present");
                let reaches = hidden[l + 1].iter().any(|&j| {
                    let col = above.index_of(j).expect("selected unit present");
                    above.incoming.get(row, col) != 0.0
                });
                if reaches {
                    sel.insert(unit.unit_id);
                }
            }
            hidden[l] = sel;
        }
        let mut input_features = BTreeSet::new();
        for f in 0..net.input_dim() {
            let layer0 = net.layer(0);
            let reaches = hidden[0].iter().any(|&j| {
                let col = layer0.index_of(j).expect("selected unit present");
                layer0.incoming.get(f, col) != 0.0
            });
            if reaches {
                input_features.insert(f);
            }
        }
        let mut coords = Vec::new();
        for (f, &uid) in input_features
            .iter()
            .flat_map(|f| hidden[0].iter().map(move |u| (*f, u)))
        {
            let col = net.layer(0).index_of(uid).expect("unit present");
            coords.push(Coord::Weight {
                layer: 0,
                row: f,
                col,
            });
        }
        for l in 1..depth {
            for &from in &hidden[l - 1] {
                let row = net.layer(l - 1).index_of(from).expect("unit present");
                for &to in &hidden[l] {
                    let col = net.layer(l).index_of(to).expect("unit present");
                    coords.push(Coord::Weight { layer: l, row, col });
                }
            }
        }
        for (l, sel) in hidden.iter().enumerate() {
            for &uid in sel {
                let idx = net.layer(l).index_of(uid).expect("unit present");
                coords.push(Coord::Bias { layer: l, idx });
            }
        }
        coords.extend(TrainableSet::head_coords(net, t)?);
        let trainable = TrainableSet::new(coords, net)?;
        Ok(SubnetworkSelection {
            input_features,
            hidden,
            trainable,
        })
    }

    /// Retrains only the selected subnetwork (with squared-l2 weight decay on
    /// its weights) and returns the mean training cross-entropy afterwards —
    /// the value compared against tau.
    pub fn selective_retrain(
        &mut self,
        data: &TaskDataset,
        selection: &SubnetworkSelection,
    ) -> Result<f64, LifelongError> {
        let t = self.net.current_stage();
        let batch = data.examples(Split::Train);
        let decay = AnchorPenalty::decay(
            selection.trainable.len(),
            self.hp.mu,
            selection.trainable.weight_mask(),
        )?;
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &selection.trainable,
            &[decay],
            None,
            &self.hp.train,
        )?;
        Ok(trainer::mean_data_loss(&self.net, &batch, t)?)
    }

    /// Adds `k` units at every hidden layer, trains only the new parameters
    /// with elementwise l1 plus group sparsity over each new unit's incoming
    /// group (weights and bias), then removes every added unit whose incoming
    /// group came out exactly zero.
    pub fn dynamic_expand(
        &mut self,
        data: &TaskDataset,
    ) -> Result<Vec<LayerExpansion>, LifelongError> {
        let t = self.net.current_stage();
        let depth = self.net.num_hidden_layers();
        let k = self.hp.k;
        let batch = data.examples(Split::Train);
        let mut per_layer: Vec<Vec<UnitId>> = Vec::with_capacity(depth);
        for l in 0..depth {
            per_layer.push(self.net.add_units(l, k, &mut self.rng)?);
        }
        for &uid in &per_layer[depth - 1] {
            self.net.ensure_head_entry(t, uid)?;
        }
        let mut coords = Vec::new();
        for (l, ids) in per_layer.iter().enumerate() {
            for &uid in ids {
                let col = self.net.layer(l).index_of(uid).expect("fresh unit present");
                for row in 0..self.net.layer(l).incoming.rows() {
                    coords.push(Coord::Weight { layer: l, row, col });
                }
                coords.push(Coord::Bias { layer: l, idx: col });
                if l + 1 < depth {
                    // the unit's own index doubles as its row in the layer above
                    for c in 0..self.net.layer(l + 1).incoming.cols() {
                        coords.push(Coord::Weight {
                            layer: l + 1,
                            row: col,
                            col: c,
                        });
                    }
                } else {
                    coords.push(Coord::HeadWeight { task: t, unit: uid });
                }
            }
        }
        let trainable = TrainableSet::new(coords, &self.net)?;
        let mut groups = Vec::new();
        for (l, ids) in per_layer.iter().enumerate() {
            for &uid in ids {
                let col = self.net.layer(l).index_of(uid).expect("fresh unit present");
                let mut g = Vec::with_capacity(self.net.layer(l).incoming.rows() + 1);
                for row in 0..self.net.layer(l).incoming.rows() {
                    let c = Coord::Weight { layer: l, row, col };
                    g.push(trainable.index_of(&c).expect("coord in set"));
                }
                g.push(
                    trainable
                        .index_of(&Coord::Bias { layer: l, idx: col })
                        .expect("coord in set"),
                );
                groups.push(g);
            }
        }
        let prox = ProxSpec {
            l1_indices: trainable.weight_indices(),
            l1_strength: self.hp.mu,
            groups,
            group_strength: self.hp.gamma,
        };
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &[],
            Some(&prox),
            &self.hp.train,
        )?;
        // top-down removal of units whose whole incoming group reached zero
        let mut stats = vec![
            LayerExpansion {
                layer: 0,
                added: k,
                pruned: 0,
            };
            depth
        ];
        for l in (0..depth).rev() {
            stats[l].layer = l;
            let dead: Vec<UnitId> = per_layer[l]
                .iter()
                .copied()
                .filter(|&uid| {
                    let layer = self.net.layer(l);
                    let col = layer.index_of(uid).expect("fresh unit present");
                    layer.bias[col] == 0.0
                        && (0..layer.incoming.rows()).all(|r| layer.incoming.get(r, col) == 0.0)
                })
                .collect();
            if !dead.is_empty() {
                self.net.remove_units(l, &dead)?;
                stats[l].pruned = dead.len();
            }
        }
        Ok(stats)
    }

    /// The split pass. First the stage's touched parameters (the selection,
    /// anything stamped this stage, and the task head) are retrained under
    /// the quadratic anchor to the previous stage, pulling back any drift the
    /// new task does not actually need. Per-unit drift is then measured
    /// against the snapshot, units beyond sigma are split (originals
    /// restored, copies stamped with this stage), and the anchored objective
    /// is re-solved over the stage's new structure only — units stamped this
    /// stage plus the head — so the restoration stays untouched and earlier
    /// tasks keep their predictions.
    pub fn split_stage(
        &mut self,
        data: &TaskDataset,
        selection: Option<&SubnetworkSelection>,
    ) -> Result<DriftReport, LifelongError> {
        let t = self.net.current_stage();
        let depth = self.net.num_hidden_layers();
        let batch = data.examples(Split::Train);

        // anchored solve producing the drift-defining weights
        let mut first_coords = self.stage_structure_trainable(t)?.coords().to_vec();
        if let Some(sel) = selection {
            first_coords.extend_from_slice(sel.trainable.coords());
        }
        let first = TrainableSet::new(first_coords, &self.net)?;
        let anchor = snapshot_anchor(&self.net, &first);
        let pen = AnchorPenalty::new(anchor, self.hp.lambda, None)?;
        trainer::train(&mut self.net, &batch, t, &first, &[pen], None, &self.hp.train)?;

        let mut report = DriftReport::default();
        let mut to_split = Vec::new();
        for l in 0..depth {
            for unit in &self.net.snapshot().layers[l].units {
                let rho = self
                    .net
                    .unit_drift(l, unit.unit_id)
                    .expect("snapshot units persist");
                let split = rho > self.hp.sigma;
                if split {
                    to_split.push((l, unit.unit_id));
                }
                report.entries.push(DriftEntry {
                    layer: l,
                    unit: unit.unit_id,
                    rho,
                    split,
                });
            }
        }
        for &(l, uid) in &to_split {
            self.net.split_unit(l, uid)?;
        }
        let trainable = self.stage_structure_trainable(t)?;
        let anchor = trainable.gather(&self.net);
        let mask = non_head_mask(&trainable, t);
        let pen = AnchorPenalty::new(anchor, self.hp.lambda, Some(mask))?;
        trainer::train(
            &mut self.net,
            &batch,
            t,
            &trainable,
            &[pen],
            None,
            &self.hp.train,
        )?;
        Ok(report)
    }

    /// Parameters incident to units stamped with the current stage, plus the
    /// whole current head.
    fn stage_structure_trainable(&self, t: TaskId) -> Result<TrainableSet, LifelongError> {
        let depth = self.net.num_hidden_layers();
        let mut coords = Vec::new();
        for (l, uid) in self.net.units_stamped(t) {
            let col = self.net.layer(l).index_of(uid).expect("unit present");
            for row in 0..self.net.layer(l).incoming.rows() {
                coords.push(Coord::Weight { layer: l, row, col });
            }
            coords.push(Coord::Bias { layer: l, idx: col });
            if l + 1 < depth {
                for c in 0..self.net.layer(l + 1).incoming.cols() {
                    coords.push(Coord::Weight {
                        layer: l + 1,
                        row: col,
                        col: c,
                    });
                }
            }
        }
        coords.extend(TrainableSet::head_coords(&self.net, t)?);
        Ok(TrainableSet::new(coords, &self.net)?)
    }

    /// One full incremental stage (head fit, selection, selective retrain,
    /// conditional expansion, split pass), ending with the snapshot commit.
    pub fn den_observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        check_order(self.net.current_stage(), data.task_id)?;
        if data.feature_dim() != self.net.input_dim() {
            return Err(LifelongError::Argument(format!(
                "task {} has {} features, network expects {}",
                data.task_id,
                data.feature_dim(),
                self.net.input_dim()
            )));
        }
        if data.task_id == 1 {
            return self.den_first_task(data);
        }
        let t = data.task_id;
        let start = Instant::now();
        let capacity_before = self.net.capacity();
        let first_new_id = self.net.next_unit_id();
        self.fit_output_head(data)?;
        let selection = self.select_subnetwork()?;
        let trainable_stable = selection.trainable.stable_coords(&self.net);
        let retrain_loss = self.selective_retrain(data, &selection)?;
        let expansion = if retrain_loss > self.hp.tau {
            self.dynamic_expand(data)?
        } else {
            Vec::new()
        };
        let drift = self.split_stage(data, Some(&selection))?;
        // every id allocated during this stage, including units pruned away
        let created_units: BTreeSet<UnitId> =
            (first_new_id..self.net.next_unit_id()).map(UnitId).collect();
        let restored_units: BTreeSet<UnitId> = drift
            .entries
            .iter()
            .filter(|e| e.split)
            .map(|e| e.unit)
            .collect();
        let audit = StageAudit {
            trainable: trainable_stable,
            created_units,
            restored_units,
        };
        let split_count = drift.split_count();
        self.net.snapshot_commit();
        Ok(StageReport {
            task_id: t,
            retrain_loss,
            expansion,
            split_count,
            drift,
            capacity_before,
            capacity_after: self.net.capacity(),
            wall_ms: start.elapsed().as_millis() as u64,
            audit,
        })
    }
}

impl Learner for DenLearner {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(&mut self, data: &TaskDataset) -> Result<StageReport, LifelongError> {
        self.den_observe(data)
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
    use crate::tasks::{generate, TaskFamily, TaskFamilyConfig};
    use crate::trainer::TrainConfig;

    fn small_tasks(family: TaskFamily, count: u32, seed: u64) -> Vec<TaskDataset> {
        generate(&TaskFamilyConfig {
            family,
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
            train: TrainConfig::new(0.1, 200, 1e-6).unwrap(),
            ..Default::default()
        }
    }

    fn probe_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn first_task_l1_dominance_and_capacity_report() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 1, 5);
        let mut hp = small_hp();
        hp.mu = 1e4;
        let mut learner = DenLearner::new("den", 8, &[6, 4], hp, 1).unwrap();
        let report = learner.den_first_task(&tasks[0]).unwrap();
        for l in 0..2 {
            assert!(learner.net.layer(l).incoming.data().iter().all(|&w| w == 0.0));
        }
        let head = learner.net.head(1).unwrap();
        assert!(head.weights.values().all(|&w| w == 0.0));
        assert_eq!(report.capacity_after, learner.net.capacity());
        assert_eq!(learner.net.current_stage(), 2);
        // with mu = 0 nothing is forced to an exact zero
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 1).unwrap();
        learner.hp.mu = 0.0;
        learner.den_first_task(&tasks[0]).unwrap();
        let zeros = (0..2)
            .flat_map(|l| learner.net.layer(l).incoming.data().to_vec())
            .filter(|&w| w == 0.0)
            .count();
        assert_eq!(zeros, 0);
    }

    #[test]
    fn head_fit_is_sparse_and_leaves_body_untouched() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 2, 6);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 2).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        let body_before = learner.net.parameter_map();
        // dominant mu: bias-only head
        learner.hp.mu = 1e4;
        learner.fit_output_head(&tasks[1]).unwrap();
        let head = learner.net.head(2).unwrap();
        assert!(head.weights.values().all(|&w| w == 0.0));
        for (k, v) in learner.net.parameter_map() {
            match k {
                crate::network::StableCoord::HeadWeight { task: 2, .. }
                | crate::network::StableCoord::HeadBias { task: 2 } => {}
                _ => assert_eq!(v.to_bits(), body_before[&k].to_bits()),
            }
        }
        // informative task with small mu: some nonzero head weight
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 2).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        learner.hp.mu = 1e-4;
        learner.fit_output_head(&tasks[1]).unwrap();
        assert!(learner
            .net
            .head(2)
            .unwrap()
            .weights
            .values()
            .any(|&w| w != 0.0));
    }

    #[test]
    fn selection_walks_nonzero_chain_exactly() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 1, 7);
        let mut learner = DenLearner::new("den", 8, &[3, 2], small_hp(), 3).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        // zero the whole body, then wire input 5 -> h1[1] -> h2[0]
        for l in 0..2 {
            let (rows, cols) = (
                learner.net.layer(l).incoming.rows(),
                learner.net.layer(l).incoming.cols(),
            );
            for r in 0..rows {
                for c in 0..cols {
                    learner.net.set_weight(l, r, c, 0.0);
                }
            }
        }
        learner.net.set_weight(0, 5, 1, 0.7);
        learner.net.set_weight(1, 1, 0, -0.4);
        learner.net.snapshot_commit(); // stage 3: selection reads these as previous weights
        learner.net.add_head(3).unwrap();
        let top_units: Vec<UnitId> = learner.net.layer(1).units.iter().map(|u| u.unit_id).collect();
        learner.net.set_head_weight(3, top_units[0], 0.9);
        let sel = learner.select_subnetwork().unwrap();
        let l1_units: Vec<UnitId> = learner.net.layer(0).units.iter().map(|u| u.unit_id).collect();
        assert_eq!(sel.hidden[1], BTreeSet::from([top_units[0]]));
        assert_eq!(sel.hidden[0], BTreeSet::from([l1_units[1]]));
        assert_eq!(sel.input_features, BTreeSet::from([5]));
        // trainable: 1 input edge + 1 hidden edge + 2 biases + head (2 weights + bias)
        assert_eq!(sel.trainable.len(), 1 + 1 + 2 + 3);
    }

    #[test]
    fn selection_empty_and_dense_extremes() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 1, 8);
        let mut learner = DenLearner::new("den", 8, &[3, 2], small_hp(), 4).unwrap();
        learner.hp.mu = 0.0; // keep the body dense
        learner.den_first_task(&tasks[0]).unwrap();
        learner.net.add_head(2).unwrap();
        // all-zero head: empty selection, head-only trainable
        let sel = learner.select_subnetwork().unwrap();
        assert!(sel.hidden.iter().all(|s| s.is_empty()));
        assert!(sel.input_features.is_empty());
        assert_eq!(sel.trainable.len(), 3); // 2 head weights + bias
        // dense body and a nonzero head weight: everything selected
        let top: Vec<UnitId> = learner.net.layer(1).units.iter().map(|u| u.unit_id).collect();
        for uid in &top {
            learner.net.set_head_weight(2, *uid, 0.5);
        }
        let sel = learner.select_subnetwork().unwrap();
        assert_eq!(sel.hidden[1].len(), 2);
        assert_eq!(sel.hidden[0].len(), 3);
        assert_eq!(sel.input_features.len(), 8);
    }

    #[test]
    fn selective_retrain_freezes_everything_outside_the_selection() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 2, 9);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 5).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        learner.fit_output_head(&tasks[1]).unwrap();
        let sel = learner.select_subnetwork().unwrap();
        let before = learner.net.parameter_map();
        let allowed = sel.trainable.stable_coords(&learner.net);
        learner.selective_retrain(&tasks[1], &sel).unwrap();
        for (k, v) in learner.net.parameter_map() {
            if !allowed.contains(&k) {
                assert_eq!(v.to_bits(), before[&k].to_bits(), "{k:?} moved");
            }
        }
    }

    #[test]
    fn expansion_prunes_everything_under_dominant_gamma_bit_exactly() {
        let tasks = small_tasks(TaskFamily::Permuted, 2, 10);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 6).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        learner.fit_output_head(&tasks[1]).unwrap();
        let sel = learner.select_subnetwork().unwrap();
        learner.selective_retrain(&tasks[1], &sel).unwrap();

        let probes = probe_inputs(6, 8, 11);
        let before: Vec<(f64, f64)> = probes
            .iter()
            .map(|x| {
                (
                    learner.net.forward(x, 1).unwrap(),
                    learner.net.forward(x, 2).unwrap(),
                )
            })
            .collect();
        let params_before = learner.net.parameter_map();
        let shape_before: Vec<usize> = (0..2).map(|l| learner.net.layer(l).width()).collect();

        learner.hp.gamma = 1e6;
        let stats = learner.dynamic_expand(&tasks[1]).unwrap();
        assert!(stats.iter().all(|e| e.added == learner.hp.k && e.pruned == learner.hp.k));
        let shape_after: Vec<usize> = (0..2).map(|l| learner.net.layer(l).width()).collect();
        assert_eq!(shape_before, shape_after);
        assert_eq!(params_before, learner.net.parameter_map());
        for (x, (p1, p2)) in probes.iter().zip(&before) {
            assert_eq!(learner.net.forward(x, 1).unwrap().to_bits(), p1.to_bits());
            assert_eq!(learner.net.forward(x, 2).unwrap().to_bits(), p2.to_bits());
        }
    }

    #[test]
    fn expansion_without_sparsity_keeps_every_unit_and_freezes_old_weights() {
        let tasks = small_tasks(TaskFamily::Permuted, 2, 12);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 7).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();
        learner.fit_output_head(&tasks[1]).unwrap();
        let sel = learner.select_subnetwork().unwrap();
        learner.selective_retrain(&tasks[1], &sel).unwrap();
        let before = learner.net.parameter_map();
        learner.hp.mu = 0.0;
        learner.hp.gamma = 0.0;
        let stats = learner.dynamic_expand(&tasks[1]).unwrap();
        assert!(stats.iter().all(|e| e.pruned == 0));
        // pre-existing coordinates are bit-identical through expansion
        for (k, v) in &before {
            assert_eq!(
                v.to_bits(),
                learner.net.parameter_map()[k].to_bits(),
                "{k:?} moved during expansion"
            );
        }
    }

    #[test]
    fn split_thresholds_and_old_task_restoration() {
        let tasks = small_tasks(TaskFamily::Permuted, 3, 13);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 8).unwrap();
        learner.den_first_task(&tasks[0]).unwrap();

        // sigma = +inf: a full stage performs zero splits
        let mut inf_learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 8).unwrap();
        inf_learner.hp.sigma = f64::INFINITY;
        inf_learner.den_first_task(&tasks[0]).unwrap();
        let report = inf_learner.den_observe(&tasks[1]).unwrap();
        assert_eq!(report.split_count, 0);

        // sigma = 0: every unit whose incoming weights changed at all splits,
        // and old-task predictions return to their pre-stage values exactly
        learner.hp.sigma = 0.0;
        let probes = probe_inputs(6, 8, 14);
        let before: Vec<f64> = probes
            .iter()
            .map(|x| learner.net.forward(x, 1).unwrap())
            .collect();
        let report = learner.den_observe(&tasks[1]).unwrap();
        assert!(report.split_count > 0, "expected drift-triggered splits");
        for (x, p) in probes.iter().zip(&before) {
            assert_eq!(
                learner.net.forward(x, 1).unwrap().to_bits(),
                p.to_bits(),
                "old task drifted through a sigma=0 stage"
            );
        }
    }

    #[test]
    fn observe_enforces_order_and_reports_capacity() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 2, 15);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 9).unwrap();
        assert!(matches!(
            learner.den_observe(&tasks[1]),
            Err(LifelongError::OutOfOrder { expected: 1, got: 2 })
        ));
        let r1 = learner.den_observe(&tasks[0]).unwrap();
        assert_eq!(r1.capacity_after, learner.net.capacity());
        let r2 = learner.den_observe(&tasks[1]).unwrap();
        assert_eq!(r2.capacity_after, learner.net.capacity());
        assert_eq!(learner.tasks_seen(), 2);
    }

    #[test]
    fn near_duplicate_task_skips_expansion_under_calibrated_tau() {
        // relatedness 1.0: both tasks share one label direction
        let tasks = generate(&TaskFamilyConfig {
            family: TaskFamily::SharedStructure,
            task_count: 2,
            feature_dim: 8,
            n_train: 40,
            n_val: 8,
            n_test: 40,
            relatedness: 1.0,
            noise_std: 0.1,
            seed: 16,
        })
        .unwrap();
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 10).unwrap();
        let r1 = learner.den_observe(&tasks[0]).unwrap();
        learner.hp.tau = (r1.retrain_loss * 1.5).max(0.1);
        let r2 = learner.den_observe(&tasks[1]).unwrap();
        assert_eq!(r2.added_total(), 0, "near-duplicate task should not expand");
    }

    #[test]
    fn orthogonal_task_triggers_expansion_with_survivors() {
        let tasks = small_tasks(TaskFamily::Permuted, 2, 17);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 11).unwrap();
        learner.hp.tau = 0.05; // force the expansion branch
        learner.den_observe(&tasks[0]).unwrap();
        let r2 = learner.den_observe(&tasks[1]).unwrap();
        assert!(r2.added_total() > 0);
        assert!(r2.surviving_total() >= 1, "no expanded unit survived");
    }

    #[test]
    fn drift_is_zero_right_after_commit() {
        let tasks = small_tasks(TaskFamily::SharedStructure, 1, 18);
        let mut learner = DenLearner::new("den", 8, &[6, 4], small_hp(), 12).unwrap();
        learner.den_observe(&tasks[0]).unwrap();
        for l in 0..2 {
            for u in learner.net.layer(l).units.clone() {
                assert_eq!(learner.net.unit_drift(l, u.unit_id), Some(0.0));
            }
        }
    }
}
