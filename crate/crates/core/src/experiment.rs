//! Config-driven experiment runner: builds a synthetic task sequence, runs
//! one or more learners through the lifelong protocol, and writes
//! analysis-ready artifacts (per-stage AUROC/capacity tables, per-learner
//! summaries, dataset CSV, and network checkpoints).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt::{f64_cell, to_string_f17};
use crate::lifelong::{
    DenLearner, EwcLearner, HyperParams, L2Learner, Learner, LifelongError, ProgressiveLearner,
    StageReport, StlLearner,
};
use crate::network::{CheckpointError, DenNetwork, NetError, TaskId};
use crate::tasks::{self, TaskDataset, TaskFamilyConfig};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("bad data: {0}")]
    Data(String),
    #[error("training diverged: learner {learner}, stage {stage}")]
    Diverged { learner: String, stage: TaskId },
    #[error("learner {learner} failed at stage {stage}: {message}")]
    Learner {
        learner: String,
        stage: TaskId,
        message: String,
    },
    #[error("metric failure: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 for config/schema problems, 3 for divergence,
    /// 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Checkpoint(_) | RunError::Data(_) => 2,
            RunError::Diverged { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Den,
    L2,
    Ewc,
    Stl,
    Progressive,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Den => "den",
            LearnerKind::L2 => "l2",
            LearnerKind::Ewc => "ewc",
            LearnerKind::Stl => "stl",
            LearnerKind::Progressive => "progressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    #[serde(default)]
    pub name: Option<String>,
    /// Layer widths, input first: e.g. `[32, 64, 32]` is a 32-feature input
    /// into hidden layers of 64 and 32 units (heads sit on the last one).
    pub architecture: Vec<usize>,
    #[serde(default)]
    pub hyper: HyperParams,
}

impl LearnerConfig {
    pub fn effective_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    fn hidden(&self) -> &[usize] {
        &self.architecture[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: TaskFamilyConfig,
    pub learners: Vec<LearnerConfig>,
    pub seed: u64,
    pub output_dir: String,
    pub eval_every_stage: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        self.tasks
            .validate()
            .map_err(|e| RunError::Config(format!("tasks: {e}")))?;
        if self.learners.is_empty() {
            return Err(RunError::Config("at least one learner is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        let depth = self.learners[0].hidden().len();
        for lc in &self.learners {
            let name = lc.effective_name();
            if !names.insert(name.clone()) {
                return Err(RunError::Config(format!("duplicate learner name {name:?}")));
            }
            if lc.architecture.len() < 2 {
                return Err(RunError::Config(format!(
                    "learner {name}: architecture needs an input dim and at least one hidden layer"
                )));
            }
            if lc.architecture.iter().any(|&w| w == 0) {
                return Err(RunError::Config(format!(
                    "learner {name}: zero-width layer in architecture"
                )));
            }
            if lc.architecture[0] != self.tasks.feature_dim {
                return Err(RunError::Config(format!(
                    "learner {name}: architecture input {} != task feature_dim {}",
                    lc.architecture[0], self.tasks.feature_dim
                )));
            }
            if lc.hidden().len() != depth {
                return Err(RunError::Config(
                    "all learners must share the same hidden depth for capacity comparison".into(),
                ));
            }
            lc.hyper
                .validate()
                .map_err(|e| RunError::Config(format!("learner {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| {
            RunError::Config(format!(
                "json parse failed at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The reference configuration emitted by `den-lab init`.
pub fn default_config() -> ExperimentConfig {
    let arch = vec![32, 64, 32];
    let learners = [
        LearnerKind::Den,
        LearnerKind::L2,
        LearnerKind::Ewc,
        LearnerKind::Stl,
        LearnerKind::Progressive,
    ]
    .into_iter()
    .map(|kind| LearnerConfig {
        kind,
        name: None,
        architecture: arch.clone(),
        hyper: HyperParams::default(),
    })
    .collect();
    ExperimentConfig {
        tasks: TaskFamilyConfig::default(),
        learners,
        seed: 42,
        output_dir: "den-lab-out".into(),
        eval_every_stage: true,
    }
}

/// One evaluation record: learner, stage, evaluated task, test AUROC, and
/// the learner's capacity at that stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub learner: String,
    pub stage: TaskId,
    pub task: TaskId,
    pub auroc: f64,
    pub capacity: usize,
    pub rel_capacity: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    pub avg_auroc: f64,
    pub final_capacity: usize,
    pub rel_capacity: f64,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub summaries: BTreeMap<String, LearnerSummary>,
    pub reports: BTreeMap<String, Vec<StageReport>>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub out_override: Option<PathBuf>,
    /// Also write a checkpoint after every stage (single-network learners).
    pub stage_checkpoints: bool,
    /// Skip writing any files (used by in-process experiment sweeps).
    pub no_artifacts: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

pub fn build_learner(
    cfg: &LearnerConfig,
    input_dim: usize,
    seed: u64,
) -> Result<Box<dyn Learner>, RunError> {
    let name = cfg.effective_name();
    let hidden = cfg.hidden();
    let hp = cfg.hyper.clone();
    let mk_err = |e: LifelongError| RunError::Config(format!("learner {}: {e}", cfg.effective_name()));
    Ok(match cfg.kind {
        LearnerKind::Den => Box::new(DenLearner::new(name, input_dim, hidden, hp, seed).map_err(mk_err)?),
        LearnerKind::L2 => Box::new(L2Learner::new(name, input_dim, hidden, hp, seed).map_err(mk_err)?),
        LearnerKind::Ewc => Box::new(EwcLearner::new(name, input_dim, hidden, hp, seed).map_err(mk_err)?),
        LearnerKind::Stl => Box::new(StlLearner::new(name, input_dim, hidden, hp, seed).map_err(mk_err)?),
        LearnerKind::Progressive => {
            Box::new(ProgressiveLearner::new(name, input_dim, hidden, hp, seed).map_err(mk_err)?)
        }
    })
}

/// Dense parameter count of one freshly built network with a single head,
/// for the given architecture. The single-task baseline at stage T owns
/// exactly T of these; capacities are reported relative to that.
pub fn single_net_capacity(architecture: &[usize]) -> usize {
    let mut n = 0;
    for w in architecture.windows(2) {
        n += w[0] * w[1] + w[1];
    }
    n + architecture.last().unwrap() + 1
}

fn learner_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// Evaluation thread cap from `DEN_LAB_THREADS` (default 1).
fn eval_threads() -> usize {
    std::env::var("DEN_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Test AUROC for every task `1..=upto`, in task order. Worker threads (when
/// allowed) only run read-only forward passes; results are merged by index so
/// output does not depend on scheduling.
fn eval_all_tasks(
    learner: &dyn Learner,
    datasets: &[TaskDataset],
    upto: TaskId,
) -> Result<Vec<f64>, RunError> {
    let task_ids: Vec<TaskId> = (1..=upto).collect();
    let threads = eval_threads().min(task_ids.len().max(1));
    let eval_one = |task: TaskId| -> Result<f64, RunError> {
        let data = &datasets[task as usize - 1];
        let examples = data.examples(crate::tasks::Split::Test);
        let mut scores = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for (x, y) in examples {
            let p = learner.predict(task, x).map_err(|e| RunError::Learner {
                learner: learner.name().to_string(),
                stage: upto,
                message: e.to_string(),
            })?;
            scores.push(p);
            labels.push(y as u8);
        }
        tasks::auroc(&scores, &labels).map_err(|e| RunError::Metric(e.to_string()))
    };
    if threads <= 1 {
        return task_ids.iter().map(|&t| eval_one(t)).collect();
    }
    let chunk = task_ids.len().div_ceil(threads);
    let mut results: Vec<Result<f64, RunError>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for ids in task_ids.chunks(chunk) {
            handles.push(scope.spawn(move || ids.iter().map(|&t| eval_one(t)).collect::<Vec<_>>()));
        }
        for h in handles {
            results.extend(h.join().expect("evaluation thread panicked"));
        }
    });
    results.into_iter().collect()
}

fn observe_err(name: &str, stage: TaskId, e: LifelongError) -> RunError {
    if matches!(e, LifelongError::Train(TrainError::Diverged { .. })) {
        RunError::Diverged {
            learner: name.to_string(),
            stage,
        }
    } else {
        RunError::Learner {
            learner: name.to_string(),
            stage,
            message: e.to_string(),
        }
    }
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, RunError> {
    config.validate()?;
    let seed = opts.seed_override.unwrap_or(config.seed);
    let datasets = tasks::generate(&config.tasks).map_err(|e| RunError::Config(e.to_string()))?;
    let t_final = config.tasks.task_count;
    let out_dir = opts
        .out_override
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    if !opts.no_artifacts {
        std::fs::create_dir_all(&out_dir)?;
        tasks::write_tasks_csv_file(&out_dir.join("tasks.csv"), &datasets)
            .map_err(|e| RunError::Data(e.to_string()))?;
        if opts.stage_checkpoints {
            std::fs::create_dir_all(out_dir.join("checkpoints"))?;
        }
    }
    let mut output = RunOutput {
        output_dir: out_dir.clone(),
        ..Default::default()
    };
    for (li, lc) in config.learners.iter().enumerate() {
        let name = lc.effective_name();
        let stl_at_final = (t_final as usize) * single_net_capacity(&lc.architecture);
        let mut learner = build_learner(lc, config.tasks.feature_dim, learner_seed(seed, li))?;
        let mut reports = Vec::with_capacity(t_final as usize);
        for data in &datasets {
            let t = data.task_id;
            let report = learner
                .observe(data)
                .map_err(|e| observe_err(&name, t, e))?;
            if opts.verbose {
                eprintln!(
                    "[{name}] stage {t}: loss {:.4}, capacity {}, added {}, pruned {}, splits {}, {} ms",
                    report.retrain_loss,
                    report.capacity_after,
                    report.added_total(),
                    report.added_total() - report.surviving_total(),
                    report.split_count,
                    report.wall_ms
                );
            }
            let wall_ms = report.wall_ms;
            reports.push(report);
            if config.eval_every_stage || t == t_final {
                let aurocs = eval_all_tasks(learner.as_ref(), &datasets, t)?;
                let capacity = learner.capacity();
                for (s, auroc) in (1..=t).zip(aurocs) {
                    output.metrics.push(MetricsRow {
                        learner: name.clone(),
                        stage: t,
                        task: s,
                        auroc,
                        capacity,
                        rel_capacity: capacity as f64 / stl_at_final as f64,
                        wall_ms,
                    });
                }
            }
            if !opts.no_artifacts && opts.stage_checkpoints {
                if let Some(json) = learner.checkpoint_json() {
                    let path = out_dir.join("checkpoints").join(format!("{name}_stage_{t}.json"));
                    write_text(&path, &json)?;
                }
            }
        }
        let final_rows: Vec<&MetricsRow> = output
            .metrics
            .iter()
            .filter(|r| r.learner == name && r.stage == t_final)
            .collect();
        let avg_auroc =
            final_rows.iter().map(|r| r.auroc).sum::<f64>() / final_rows.len() as f64;
        let final_capacity = learner.capacity();
        output.summaries.insert(
            name.clone(),
            LearnerSummary {
                avg_auroc,
                final_capacity,
                rel_capacity: final_capacity as f64 / stl_at_final as f64,
            },
        );
        output.reports.insert(name.clone(), reports);
        if !opts.no_artifacts {
            if let Some(json) = learner.checkpoint_json() {
                write_text(&out_dir.join(format!("checkpoint_{name}.json")), &json)?;
            }
        }
    }
    if !opts.no_artifacts {
        write_metrics_csv(&out_dir.join("metrics.csv"), &output.metrics)?;
        let summary_json = to_string_f17(&output.summaries).expect("summary serializes");
        write_text(&out_dir.join("summary.json"), &summary_json)?;
    }
    Ok(output)
}

fn write_text(path: &Path, content: &str) -> Result<(), RunError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    if !content.ends_with('\n') {
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), RunError> {
    let mut out = String::from("learner,stage,task,auroc,capacity,rel_capacity,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.learner,
            r.stage,
            r.task,
            f64_cell(r.auroc),
            r.capacity,
            f64_cell(r.rel_capacity),
            r.wall_ms
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Human-readable checkpoint report: layer widths, unit counts by timestamp,
/// split lineage, exact-zero sparsity, and capacity.
pub fn inspect(checkpoint_path: &Path) -> Result<String, RunError> {
    let text = std::fs::read_to_string(checkpoint_path)?;
    let (net, rng) = DenNetwork::from_checkpoint_json(&text)?;
    let mut out = String::new();
    out.push_str(&format!("checkpoint: {}\n", checkpoint_path.display()));
    out.push_str(&format!(
        "current_stage: {} (tasks committed: {})\n",
        net.current_stage(),
        net.current_stage() - 1
    ));
    out.push_str(&format!("rng: {} seed {}\n", crate::numerics::RNG_ALGORITHM, rng.seed()));
    let widths: Vec<String> = (0..net.num_hidden_layers())
        .map(|l| net.layer(l).width().to_string())
        .collect();
    out.push_str(&format!(
        "layer widths: {} -> {}\n",
        net.input_dim(),
        widths.join(" -> ")
    ));
    for l in 0..net.num_hidden_layers() {
        let mut by_ts: BTreeMap<TaskId, usize> = BTreeMap::new();
        for u in &net.layer(l).units {
            *by_ts.entry(u.timestamp).or_insert(0) += 1;
        }
        let parts: Vec<String> = by_ts
            .iter()
            .map(|(ts, n)| format!("stage {ts}: {n}"))
            .collect();
        out.push_str(&format!("layer {} units by timestamp: {}\n", l + 1, parts.join(", ")));
    }
    let mut lineage = Vec::new();
    for l in 0..net.num_hidden_layers() {
        for u in &net.layer(l).units {
            if let crate::network::UnitOrigin::SplitCopyOf(parent) = u.origin {
                lineage.push(format!(
                    "  layer {}: {} split from {} at stage {}",
                    l + 1,
                    u.unit_id,
                    parent,
                    u.timestamp
                ));
            }
        }
    }
    if lineage.is_empty() {
        out.push_str("split lineage: none\n");
    } else {
        out.push_str(&format!("split lineage ({} copies):\n", lineage.len()));
        for line in lineage {
            out.push_str(&line);
            out.push('\n');
        }
    }
    let mut zeros = 0usize;
    let mut total = 0usize;
    for l in 0..net.num_hidden_layers() {
        for v in net.layer(l).incoming.data() {
            total += 1;
            if *v == 0.0 {
                zeros += 1;
            }
        }
    }
    for task in net.head_tasks() {
        for (_, w) in &net.head(task).expect("listed head").weights {
            total += 1;
            if *w == 0.0 {
                zeros += 1;
            }
        }
    }
    out.push_str(&format!(
        "weight sparsity: {zeros}/{total} exactly zero ({:.4})\n",
        zeros as f64 / total as f64
    ));
    out.push_str(&format!("heads: {:?}\n", net.head_tasks()));
    out.push_str(&format!("capacity: {}\n", net.capacity()));
    Ok(out)
}

/// AUROC of a checkpointed network on the rows of a dataset CSV belonging to
/// `task`, using that task's timestamp mask.
pub fn eval_checkpoint(
    checkpoint_path: &Path,
    data_path: &Path,
    task: TaskId,
) -> Result<f64, RunError> {
    let text = std::fs::read_to_string(checkpoint_path)?;
    let (net, _rng) = DenNetwork::from_checkpoint_json(&text)?;
    if net.head(task).is_none() {
        return Err(RunError::Data(format!(
            "checkpoint has no head for task {task} (heads: {:?})",
            net.head_tasks()
        )));
    }
    let datasets =
        tasks::read_tasks_csv_file(data_path).map_err(|e| RunError::Data(e.to_string()))?;
    let data = datasets
        .iter()
        .find(|d| d.task_id == task)
        .ok_or_else(|| RunError::Data(format!("csv has no rows for task {task}")))?;
    let mut scores = Vec::with_capacity(data.labels.len());
    for i in 0..data.features.rows() {
        let p = net
            .forward(data.features.row(i), task)
            .map_err(|e| match e {
                NetError::MissingHead(t) => RunError::Data(format!("no head for task {t}")),
                other => RunError::Data(other.to_string()),
            })?;
        scores.push(p);
    }
    tasks::auroc(&scores, &data.labels).map_err(|e| RunError::Metric(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = default_config();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_shapes() {
        let mut json = serde_json::to_value(default_config()).unwrap();
        json["learners"][0]["bogus"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&json.to_string());
        assert!(matches!(err, Err(RunError::Config(_))));

        let mut cfg = default_config();
        cfg.learners[0].architecture = vec![16, 64, 32]; // mismatched input dim
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));

        let mut cfg = default_config();
        cfg.learners[1].architecture = vec![32, 64]; // depth differs
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));

        let mut cfg = default_config();
        cfg.learners = vec![];
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
    }

    #[test]
    fn single_net_capacity_matches_fresh_network() {
        use crate::numerics::SeededRng;
        let arch = [7usize, 5, 3];
        let mut rng = SeededRng::new(1);
        let mut net = DenNetwork::new(7, &[5, 3], &mut rng).unwrap();
        net.add_head(1).unwrap();
        assert_eq!(net.capacity(), single_net_capacity(&arch));
    }

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(RunError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            RunError::Diverged {
                learner: "den".into(),
                stage: 3
            }
            .exit_code(),
            3
        );
        assert_eq!(RunError::Metric("x".into()).exit_code(), 1);
    }
}
