//! Deterministic synthetic lifelong task sequences, dataset splits, CSV
//! import/export, and the AUROC metric.
//!
//! Two families: `shared_structure` draws one latent direction pool and gives
//! every task a label direction that overlaps a common component by the
//! configured relatedness; `permuted` builds one base dataset and feeds each
//! task a seeded feature permutation of it. Both are pure functions of their
//! config, bit-identical across runs and platforms.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt::f64_cell;
use crate::network::TaskId;
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error: {0}")]
    Parse(String),
}

/// One labeled feature vector, borrowed from a dataset.
pub type Example<'a> = (&'a [f64], f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One task's labeled data, rows ordered train, then val, then test.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl TaskDataset {
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.n_train + self.n_val + self.n_test,
        }
    }

    pub fn examples(&self, split: Split) -> Vec<Example<'_>> {
        self.split_range(split)
            .map(|i| (self.features.row(i), self.labels[i] as f64))
            .collect()
    }

    fn splits_have_both_classes(&self) -> bool {
        Split::ALL.iter().all(|&s| {
            let r = self.split_range(s);
            let pos = self.labels[r.clone()].iter().filter(|&&y| y == 1).count();
            pos > 0 && pos < r.len()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SharedStructure,
    Permuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamilyConfig {
    pub family: TaskFamily,
    pub task_count: u32,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub relatedness: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        TaskFamilyConfig {
            family: TaskFamily::SharedStructure,
            task_count: 10,
            feature_dim: 32,
            n_train: 200,
            n_val: 50,
            n_test: 500,
            relatedness: 0.5,
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.task_count < 1 {
            return Err(TaskError::Argument("task_count must be at least 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(TaskError::Argument("feature_dim must be at least 2".into()));
        }
        if self.n_train < 2 || self.n_val < 2 || self.n_test < 2 {
            return Err(TaskError::Argument(
                "every split needs at least 2 examples (both classes must fit)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(TaskError::Argument(format!(
                "relatedness must lie in [0, 1], got {}",
                self.relatedness
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(TaskError::Argument("noise_std must be nonnegative".into()));
        }
        if self.family == TaskFamily::SharedStructure
            && (self.task_count as usize + 1) > self.feature_dim
        {
            return Err(TaskError::Argument(format!(
                "shared_structure needs feature_dim >= task_count + 1 ({} tasks, {} dims)",
                self.task_count, self.feature_dim
            )));
        }
        Ok(())
    }
}

pub fn generate(cfg: &TaskFamilyConfig) -> Result<Vec<TaskDataset>, TaskError> {
    cfg.validate()?;
    match cfg.family {
        TaskFamily::SharedStructure => generate_shared(cfg),
        TaskFamily::Permuted => generate_permuted(cfg),
    }
}

/// Label directions for the shared-structure family: unit vectors whose
/// pairwise inner product equals the configured relatedness.
pub fn shared_directions(cfg: &TaskFamilyConfig, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let d = cfg.feature_dim;
    let pool = orthonormal_pool(d, cfg.task_count as usize + 1, rng);
    let a = cfg.relatedness.sqrt();
    let b = (1.0 - cfg.relatedness).sqrt();
    (0..cfg.task_count as usize)
        .map(|t| {
            (0..d)
                .map(|i| a * pool[0][i] + b * pool[t + 1][i])
                .collect()
        })
        .collect()
}

fn orthonormal_pool(d: usize, count: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    assert!(count <= d, "cannot draw more orthonormal directions than dimensions");
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(count);
    while pool.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &pool {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially in the span already; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        pool.push(v);
    }
    pool
}

fn sample_task(
    task_id: TaskId,
    direction: &[f64],
    cfg: &TaskFamilyConfig,
    rng: &mut SeededRng,
) -> Result<TaskDataset, TaskError> {
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    let d = cfg.feature_dim;
    for _attempt in 0..100 {
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let margin: f64 =
                x.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>() + cfg.noise_std * rng.normal();
            labels.push(if margin > 0.0 { 1u8 } else { 0u8 });
            rows.push(x);
        }
        let ds = TaskDataset {
            task_id,
            features: Matrix::from_rows(&rows).expect("gaussian draws are finite"),
            labels,
            n_train: cfg.n_train,
            n_val: cfg.n_val,
            n_test: cfg.n_test,
        };
        if ds.splits_have_both_classes() {
            return Ok(ds);
        }
    }
    Err(TaskError::Generation(format!(
        "task {task_id}: could not draw both classes into every split after 100 attempts"
    )))
}

fn generate_shared(cfg: &TaskFamilyConfig) -> Result<Vec<TaskDataset>, TaskError> {
    let mut rng = SeededRng::new(cfg.seed);
    let dirs = shared_directions(cfg, &mut rng);
    let mut out = Vec::with_capacity(dirs.len());
    for (t, dir) in dirs.iter().enumerate() {
        out.push(sample_task(t as TaskId + 1, dir, cfg, &mut rng)?);
    }
    Ok(out)
}

/// Seeded feature permutations: the identity for task 1, a fresh shuffle for
/// every later task.
pub fn permutations(cfg: &TaskFamilyConfig, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    (0..cfg.task_count as usize)
        .map(|t| {
            let mut p: Vec<usize> = (0..cfg.feature_dim).collect();
            if t > 0 {
                rng.shuffle(&mut p);
            }
            p
        })
        .collect()
}

fn generate_permuted(cfg: &TaskFamilyConfig) -> Result<Vec<TaskDataset>, TaskError> {
    let mut rng = SeededRng::new(cfg.seed);
    let base_dir = &orthonormal_pool(cfg.feature_dim, 1, &mut rng)[0];
    let base = sample_task(1, base_dir, cfg, &mut rng)?;
    let perms = permutations(cfg, &mut rng);
    let n = base.features.rows();
    let d = cfg.feature_dim;
    let mut out = Vec::with_capacity(perms.len());
    for (t, perm) in perms.iter().enumerate() {
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let src = base.features.row(r);
            let permuted: Vec<f64> = (0..d).map(|j| src[perm[j]]).collect();
            rows.push(permuted);
        }
        out.push(TaskDataset {
            task_id: t as TaskId + 1,
            features: Matrix::from_rows(&rows).expect("permutation preserves finiteness"),
            labels: base.labels.clone(),
            n_train: cfg.n_train,
            n_val: cfg.n_val,
            n_test: cfg.n_test,
        });
    }
    Ok(out)
}

/// Area under the ROC curve by rank statistic: the probability that a random
/// positive outranks a random negative, ties credited one half.
///
/// The final value is computed as `u/(p*n)` from whichever side has the
/// smaller pair count, so `auroc(s) + auroc(-s)` is exactly 1.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, TaskError> {
    if scores.len() != labels.len() {
        return Err(TaskError::Argument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TaskError::Metric("scores contain NaN".into()));
    }
    let p = labels.iter().filter(|&&y| y == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(TaskError::Metric(
            "both classes must be present to rank them".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u_pos = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    let total = (p * n) as f64;
    let u_neg = total - u_pos;
    Ok(if u_pos <= u_neg {
        u_pos / total
    } else {
        1.0 - u_neg / total
    })
}

// --- CSV interchange: header `task_id,split,y,x0..x{d-1}` ---

pub fn write_tasks_csv<W: Write>(mut w: W, tasks: &[TaskDataset]) -> Result<(), TaskError> {
    let d = tasks.first().map_or(0, |t| t.feature_dim());
    let mut header = String::from("task_id,split,y");
    for j in 0..d {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    for task in tasks {
        for split in Split::ALL {
            for i in task.split_range(split) {
                let mut line = format!("{},{},{}", task.task_id, split.name(), task.labels[i]);
                for v in task.features.row(i) {
                    line.push(',');
                    line.push_str(&f64_cell(*v));
                }
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

pub fn write_tasks_csv_file(path: &Path, tasks: &[TaskDataset]) -> Result<(), TaskError> {
    let file = std::fs::File::create(path)?;
    write_tasks_csv(std::io::BufWriter::new(file), tasks)
}

pub fn read_tasks_csv<R: BufRead>(r: R) -> Result<Vec<TaskDataset>, TaskError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| TaskError::Parse("empty file".into()))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[0] != "task_id" || cols[1] != "split" || cols[2] != "y" {
        return Err(TaskError::Parse(format!(
            "unexpected header {header:?}, want task_id,split,y,x0.."
        )));
    }
    let d = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(TaskError::Parse(format!("feature column {j} labeled {c:?}")));
        }
    }
    // per task: rows bucketed by split, in file order
    let mut buckets: BTreeMap<TaskId, [Vec<(Vec<f64>, u8)>; 3]> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 3 {
            return Err(TaskError::Parse(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                d + 3
            )));
        }
        let task: TaskId = fields[0]
            .parse()
            .map_err(|_| TaskError::Parse(format!("line {}: bad task_id", lineno + 2)))?;
        let split = match fields[1] {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => {
                return Err(TaskError::Parse(format!(
                    "line {}: unknown split {other:?}",
                    lineno + 2
                )))
            }
        };
        let y: u8 = match fields[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(TaskError::Parse(format!(
                    "line {}: label must be 0 or 1, got {other:?}",
                    lineno + 2
                )))
            }
        };
        let mut x = Vec::with_capacity(d);
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| TaskError::Parse(format!("line {}: bad real {f:?}", lineno + 2)))?;
            x.push(v);
        }
        buckets.entry(task).or_default()[split].push((x, y));
    }
    let mut out = Vec::with_capacity(buckets.len());
    for (task_id, splits) in buckets {
        let [train, val, test] = splits;
        let (n_train, n_val, n_test) = (train.len(), val.len(), test.len());
        let mut rows = Vec::with_capacity(n_train + n_val + n_test);
        let mut labels = Vec::with_capacity(rows.capacity());
        for (x, y) in train.into_iter().chain(val).chain(test) {
            rows.push(x);
            labels.push(y);
        }
        if rows.is_empty() {
            continue;
        }
        let features = Matrix::from_rows(&rows)
            .map_err(|e| TaskError::Parse(format!("task {task_id}: {e}")))?;
        out.push(TaskDataset {
            task_id,
            features,
            labels,
            n_train,
            n_val,
            n_test,
        });
    }
    Ok(out)
}

pub fn read_tasks_csv_file(path: &Path) -> Result<Vec<TaskDataset>, TaskError> {
    let file = std::fs::File::open(path)?;
    read_tasks_csv(std::io::BufReader::new(file))
}
