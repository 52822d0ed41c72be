//! Deterministic multi-task synthetic suites and a CSV task loader.
//!
//! Each synthetic task is a Gaussian mixture with several modes per class,
//! pushed through a task-specific random warp `z + gamma * tanh(z W + b)`.
//! The pretraining task is built the same way with many more classes so that
//! it covers the input space.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Inputs `[n, in_dim]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Array2<f32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> LabeledBatch {
        let n = n.min(self.len());
        LabeledBatch {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Consecutive chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (ArrayView2<'_, f32>, &[usize])> {
        let size = size.max(1);
        self.inputs
            .axis_chunks_iter(Axis(0), size)
            .zip(self.labels.chunks(size))
    }

    pub fn concat(parts: &[&LabeledBatch]) -> Result<LabeledBatch> {
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot concatenate batches: {e}")))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for x in self.inputs.iter() {
            h.update(x.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub spec: SuiteSpec,
    pub tasks: Vec<TaskDataset>,
    pub pretrain: TaskDataset,
}

impl TaskSuite {
    pub fn task(&self, task_id: &str) -> Option<&TaskDataset> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// JSON provenance record: generator parameters plus per-split data hashes.
    pub fn provenance(&self) -> serde_json::Value {
        let split = |t: &TaskDataset| {
            serde_json::json!({
                "task_id": t.task_id,
                "n_classes": t.n_classes,
                "train": {"n": t.train.len(), "sha256": t.train.sha256()},
                "test": {"n": t.test.len(), "sha256": t.test.sha256()},
            })
        };
        serde_json::json!({
            "spec": self.spec,
            "pretrain": split(&self.pretrain),
            "tasks": self.tasks.iter().map(split).collect::<Vec<_>>(),
        })
    }
}

fn default_modes() -> usize {
    2
}
fn default_cluster_std() -> f32 {
    0.5
}
fn default_spread() -> f32 {
    1.0
}
fn default_warp() -> f32 {
    1.0
}

/// Parameters of a synthetic suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub n_tasks: usize,
    pub in_dim: usize,
    pub classes_per_task: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f32,
    #[serde(default = "default_spread")]
    pub spread: f32,
    #[serde(default = "default_warp")]
    pub warp: f32,
    /// Pretraining class count; defaults to `max(8, n_tasks * classes_per_task)`.
    #[serde(default)]
    pub pretrain_classes: Option<usize>,
    /// Pretraining train size; defaults to `n_tasks * train_n`.
    #[serde(default)]
    pub pretrain_n: Option<usize>,
}

impl SuiteSpec {
    pub fn new(
        n_tasks: usize,
        in_dim: usize,
        classes_per_task: usize,
        train_n: usize,
        test_n: usize,
        seed: u64,
    ) -> Self {
        SuiteSpec {
            n_tasks,
            in_dim,
            classes_per_task,
            train_n,
            test_n,
            seed,
            modes_per_class: default_modes(),
            cluster_std: default_cluster_std(),
            spread: default_spread(),
            warp: default_warp(),
            pretrain_classes: None,
            pretrain_n: None,
        }
    }
}

/// Fixed random generator for one task.
struct ClusterTask {
    centers: Vec<Vec<Array1<f32>>>,
    warp_w: Array2<f32>,
    warp_b: Array1<f32>,
    gamma: f32,
    std: f32,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

impl ClusterTask {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, classes: usize, spec: &SuiteSpec) -> Self {
        let centers = (0..classes)
            .map(|_| {
                (0..spec.modes_per_class.max(1))
                    .map(|_| Array1::from_shape_fn(in_dim, |_| spec.spread * normal(rng)))
                    .collect()
            })
            .collect();
        let scale = 1.0 / (in_dim as f32).sqrt();
        let warp_w = Array2::from_shape_fn((in_dim, in_dim), |_| scale * normal(rng));
        let warp_b = Array1::from_shape_fn(in_dim, |_| 0.5 * normal(rng));
        ClusterTask {
            centers,
            warp_w,
            warp_b,
            gamma: spec.warp,
            std: spec.cluster_std,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> LabeledBatch {
        let classes = self.centers.len();
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(rng);
        let d = self.warp_b.len();
        let mut z = Array2::<f32>::zeros((n, d));
        for (mut row, &label) in z.rows_mut().into_iter().zip(&labels) {
            let modes = &self.centers[label];
            let c = &modes[rng.random_range(0..modes.len())];
            for (v, &m) in row.iter_mut().zip(c) {
                *v = m + self.std * normal(rng);
            }
        }
        let mut warped = z.dot(&self.warp_w);
        warped += &self.warp_b;
        warped.mapv_inplace(|v| self.gamma * v.tanh());
        LabeledBatch {
            inputs: z + warped,
            labels,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn make_task(
    task_id: String,
    rng: &mut ChaCha8Rng,
    spec: &SuiteSpec,
    classes: usize,
    train_n: usize,
) -> TaskDataset {
    let generator = ClusterTask::new(rng, spec.in_dim, classes, spec);
    let train = generator.sample(rng, train_n);
    let test = generator.sample(rng, spec.test_n);
    TaskDataset {
        task_id,
        train,
        test,
        n_classes: classes,
    }
}

/// Generate a seed-deterministic multi-task suite plus its pretraining task.
pub fn synth_suite(spec: &SuiteSpec) -> Result<TaskSuite> {
    if spec.in_dim < 2 {
        return Err(Error::Config(format!("in_dim must be >= 2, got {}", spec.in_dim)));
    }
    if spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.train_n == 0 || spec.test_n == 0 {
        return Err(Error::Config("suite counts must be positive".into()));
    }
    let pre_classes = spec
        .pretrain_classes
        .unwrap_or((spec.n_tasks * spec.classes_per_task).max(8));
    let pre_n = spec.pretrain_n.unwrap_or(spec.n_tasks * spec.train_n);
    let min_n = spec.train_n.min(spec.test_n);
    if min_n < spec.classes_per_task || pre_n.min(spec.test_n) < pre_classes {
        return Err(Error::Config(
            "every split needs at least one sample per class".into(),
        ));
    }
    let pretrain = make_task(
        "pretrain".into(),
        &mut stream_rng(spec.seed, 0),
        spec,
        pre_classes,
        pre_n,
    );
    let tasks = (0..spec.n_tasks)
        .map(|t| {
            make_task(
                format!("task{t}"),
                &mut stream_rng(spec.seed, t as u64 + 1),
                spec,
                spec.classes_per_task,
                spec.train_n,
            )
        })
        .collect();
    Ok(TaskSuite {
        spec: spec.clone(),
        tasks,
        pretrain,
    })
}

/// Equal-size sample from each batch, shuffled together.
pub fn mixture(parts: &[&LabeledBatch], per_part: usize, seed: u64) -> Result<LabeledBatch> {
    if parts.is_empty() || per_part == 0 {
        return Err(Error::Empty("mixture needs at least one non-empty part".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(parts.len());
    for p in parts {
        if p.len() < per_part {
            return Err(Error::Empty(format!(
                "part has {} rows, {per_part} requested",
                p.len()
            )));
        }
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_part);
        idx.sort_unstable();
        picked.push(p.select(&idx));
    }
    let refs: Vec<&LabeledBatch> = picked.iter().collect();
    let all = LabeledBatch::concat(&refs)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    Ok(all.select(&order))
}

/// Load a task from a headerless CSV of `features..., label` rows.
///
/// Rows are split 80/20 by ranking a per-row hash: the `round(n / 5)` rows
/// with the smallest hashes form the test split.
pub fn load_csv_task(path: impl AsRef<Path>, n_classes: usize) -> Result<TaskDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut width: Option<usize> = None;
    let mut features: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Row {
                row,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        if w < 2 {
            return Err(Error::Row {
                row,
                message: "need at least one feature and a label".into(),
            });
        }
        let mut hasher = Sha256::new();
        hasher.update((row as u64).to_le_bytes());
        for (j, field) in rec.iter().enumerate() {
            hasher.update(field.as_bytes());
            hasher.update(b",");
            if j + 1 < w {
                let v: f32 = field.parse().map_err(|_| Error::Row {
                    row,
                    message: format!("field {} is not a float: `{field}`", j + 1),
                })?;
                features.push(v);
            } else {
                let label: usize = field.parse().map_err(|_| Error::Row {
                    row,
                    message: format!("label is not a non-negative integer: `{field}`"),
                })?;
                if label >= n_classes {
                    return Err(Error::Row {
                        row,
                        message: format!("label {label} >= n_classes {n_classes}"),
                    });
                }
                labels.push(label);
            }
        }
        let digest = hasher.finalize();
        keys.push(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    }
    let n = labels.len();
    let Some(w) = width else {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    };
    let inputs = Array2::from_shape_vec((n, w - 1), features).expect("rows are rectangular");
    let all = LabeledBatch { inputs, labels };

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by_key(|&r| (keys[r], r));
    let n_test = (n as f64 * 0.2).round() as usize;
    let mut test_rows = ranked[..n_test].to_vec();
    let mut train_rows = ranked[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();
    let task_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ok(TaskDataset {
        task_id,
        train: all.select(&train_rows),
        test: all.select(&test_rows),
        n_classes,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Row {
            row: 0,
            message: format!("{other:?}"),
        },
    }
}
