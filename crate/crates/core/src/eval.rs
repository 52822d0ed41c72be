//! Error barriers, task-vector landscapes, normalized-accuracy reports and
//! merge hyperparameter search.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{lerp, WeightSet};
use crate::datasets::LabeledBatch;
use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeMethod, MergedBundle, TaskVector};
use crate::network::{evaluate, evaluate_with, ArchitectureDescriptor, Model};
use crate::repair::{corrected_forward, TactBundle};

pub const DEFAULT_BARRIER_GRID: usize = 25;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const DEFAULT_TALL_LAMBDAS: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];

/// Largest excess of `loss(α)` over the straight line between the endpoint
/// losses, for α in `{1/n, …, (n−1)/n}`. `loss(α)` is the loss of
/// `α·θ1 + (1−α)·θ2`, so `loss(1)` and `loss(0)` are the endpoints.
pub fn barrier_with(n_grid: usize, loss: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
    if n_grid < 3 {
        return Err(Error::Config(format!("barrier grid needs n_grid >= 3, got {n_grid}")));
    }
    let l1 = loss(1.0)?;
    let l2 = loss(0.0)?;
    let excess = (1..n_grid)
        .into_par_iter()
        .map(|i| {
            let alpha = i as f64 / n_grid as f64;
            Ok(loss(alpha)? - (l2 + alpha * (l1 - l2)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(excess.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Loss barrier between two models, interpolating encoder and head jointly.
pub fn barrier(
    arch: &ArchitectureDescriptor,
    m1: &Model,
    m2: &Model,
    data: &LabeledBatch,
    n_grid: usize,
) -> Result<f64> {
    m1.encoder.check_compatible(&m2.encoder)?;
    m1.head.check_compatible(&m2.head)?;
    barrier_with(n_grid, |alpha| {
        let enc = lerp(&m1.encoder, &m2.encoder, alpha as f32)?;
        let head = lerp(&m1.head, &m2.head, alpha as f32)?;
        Ok(evaluate(arch, &enc, &head, data)?.mean_loss)
    })
}

/// Evenly spaced axis `start..=end` with `n` points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub start: f64,
    pub end: f64,
    pub n: usize,
}

impl AxisSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.start + i as f64 * step).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub a: AxisSpec,
    pub b: AxisSpec,
}

impl Default for GridSpec {
    fn default() -> Self {
        let axis = AxisSpec {
            start: -0.25,
            end: 1.25,
            n: 13,
        };
        GridSpec { a: axis, b: axis }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `"A0:A1:NA,B0:B1:NB"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid `{s}` is not of the form A0:A1:NA,B0:B1:NB"));
        let axis = |part: &str| -> Result<AxisSpec> {
            let f: Vec<&str> = part.split(':').collect();
            let [start, end, n] = f.as_slice() else {
                return Err(bad());
            };
            let spec = AxisSpec {
                start: start.trim().parse().map_err(|_| bad())?,
                end: end.trim().parse().map_err(|_| bad())?,
                n: n.trim().parse().map_err(|_| bad())?,
            };
            if spec.n == 0 || !spec.start.is_finite() || !spec.end.is_finite() {
                return Err(bad());
            }
            Ok(spec)
        };
        let (a, b) = s.split_once(',').ok_or_else(bad)?;
        Ok(GridSpec {
            a: axis(a)?,
            b: axis(b)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMetric {
    AvgNormalized,
    MinNormalized,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// `cells[i][j]` is the metric at `(a_values[i], b_values[j])`.
    pub cells: Vec<Vec<f64>>,
    pub metric: GridMetric,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,metric\n");
        for (i, a) in self.a_values.iter().enumerate() {
            for (j, b) in self.b_values.iter().enumerate() {
                writeln!(out, "{a},{b},{}", self.cells[i][j]).expect("string write");
            }
        }
        out
    }
}

/// Evaluates `cell(a, b)` over the grid in parallel; cells are assembled by index.
pub fn landscape_grid_with(
    spec: &GridSpec,
    metric: GridMetric,
    cell: impl Fn(f64, f64) -> Result<f64> + Sync,
) -> Result<GridResult> {
    let a_values = spec.a.values();
    let b_values = spec.b.values();
    let coords: Vec<(f64, f64)> = a_values
        .iter()
        .flat_map(|&a| b_values.iter().map(move |&b| (a, b)))
        .collect();
    let flat = coords
        .par_iter()
        .map(|&(a, b)| cell(a, b))
        .collect::<Result<Vec<f64>>>()?;
    let cells = flat.chunks(b_values.len()).map(<[f64]>::to_vec).collect();
    Ok(GridResult {
        a_values,
        b_values,
        cells,
        metric,
    })
}

/// A task to evaluate: its head, its data, and its expert's accuracy on that data.
#[derive(Clone, Debug)]
pub struct EvalTask {
    pub task_id: String,
    pub head: WeightSet,
    pub data: LabeledBatch,
    pub expert_acc: f64,
}

/// `origin + a·τ1 + b·τ2`, accumulated in f64.
pub fn span_point(origin: &WeightSet, t1: &TaskVector, t2: &TaskVector, a: f64, b: f64) -> Result<WeightSet> {
    let mut out = origin.clone();
    for (name, w) in out.iter_mut() {
        let (d1, d2) = match (t1.delta.get(name), t2.delta.get(name)) {
            (Some(d1), Some(d2)) if d1.data.len() == w.len() && d2.data.len() == w.len() => (d1, d2),
            _ => return Err(Error::incompatible(name, "task vectors do not match the origin")),
        };
        for ((v, &x), &y) in w.data_mut().iter_mut().zip(&d1.data).zip(&d2.data) {
            *v = (*v as f64 + a * x + b * y) as f32;
        }
    }
    Ok(out)
}

/// Landscape in the span of two task vectors around `origin`. Every task is
/// evaluated with its own head and aggregated by `metric`.
pub fn landscape_grid(
    arch: &ArchitectureDescriptor,
    origin: &WeightSet,
    t1: &TaskVector,
    t2: &TaskVector,
    tasks: &[EvalTask],
    spec: &GridSpec,
    metric: GridMetric,
) -> Result<GridResult> {
    if tasks.is_empty() {
        return Err(Error::Empty("landscape tasks".into()));
    }
    landscape_grid_with(spec, metric, |a, b| {
        let enc = span_point(origin, t1, t2, a, b)?;
        let results = tasks
            .iter()
            .map(|t| evaluate(arch, &enc, &t.head, &t.data))
            .collect::<Result<Vec<_>>>()?;
        let normalized = results
            .iter()
            .zip(tasks)
            .map(|(r, t)| r.accuracy / t.expert_acc);
        Ok(match metric {
            GridMetric::AvgNormalized => normalized.sum::<f64>() / tasks.len() as f64,
            GridMetric::MinNormalized => normalized.fold(f64::INFINITY, f64::min),
            GridMetric::Loss => results.iter().map(|r| r.mean_loss).sum::<f64>() / tasks.len() as f64,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub raw_acc: f64,
    pub expert_acc: f64,
    pub normalized_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub n_tasks: usize,
    pub per_task: IndexMap<String, TaskMetric>,
    pub avg_normalized: f64,
    pub min_normalized: f64,
}

impl MetricReport {
    /// Builds a report from per-task raw and expert accuracies.
    pub fn from_accuracies(
        method: impl Into<String>,
        entries: impl IntoIterator<Item = (String, f64, f64)>,
    ) -> Result<MetricReport> {
        let per_task: IndexMap<String, TaskMetric> = entries
            .into_iter()
            .map(|(id, raw_acc, expert_acc)| {
                (
                    id,
                    TaskMetric {
                        raw_acc,
                        expert_acc,
                        normalized_acc: raw_acc / expert_acc,
                    },
                )
            })
            .collect();
        if per_task.is_empty() {
            return Err(Error::Empty("report tasks".into()));
        }
        let norms = per_task.values().map(|m| m.normalized_acc);
        let avg_normalized = norms.clone().sum::<f64>() / per_task.len() as f64;
        let min_normalized = norms.fold(f64::INFINITY, f64::min);
        Ok(MetricReport {
            method: method.into(),
            n_tasks: per_task.len(),
            per_task,
            avg_normalized,
            min_normalized,
        })
    }
}

/// Evaluates a merged bundle on every task with the task's expert head,
/// its per-task encoder (TALL) and, when given, its TACT correction.
pub fn report(
    arch: &ArchitectureDescriptor,
    bundle: &MergedBundle,
    tasks: &[EvalTask],
    tact: Option<&IndexMap<String, TactBundle>>,
) -> Result<MetricReport> {
    let mut method = bundle.config.method.name().to_string();
    if tact.is_some() {
        method.push_str("+tact");
    }
    let rows = tasks
        .par_iter()
        .map(|t| {
            let enc = bundle.encoder_for(&t.task_id)?;
            let res = match tact {
                Some(map) => {
                    let b = map.get(&t.task_id).ok_or_else(|| {
                        Error::Config(format!("no TACT bundle for task `{}`", t.task_id))
                    })?;
                    evaluate_with(&t.data, |x| corrected_forward(arch, &enc, &t.head, b, x))?
                }
                None => evaluate(arch, &enc, &t.head, &t.data)?,
            };
            Ok((t.task_id.clone(), res.accuracy, t.expert_acc))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_accuracies(method, rows)
}

/// Default λ grid for a method and task count (largest listed row ≤ n_tasks).
pub fn default_lambda_grid(method: MergeMethod, n_tasks: usize) -> Vec<f64> {
    match method {
        MergeMethod::Average => vec![1.0],
        MergeMethod::Ties | MergeMethod::TallTies => vec![0.3, 0.5, 0.7, 1.0],
        MergeMethod::TaskArithmetic | MergeMethod::TallTa => match n_tasks {
            0..=3 => vec![0.5, 0.7, 1.0],
            4..=5 => vec![0.4, 0.6, 0.9],
            6..=7 => vec![0.3, 0.5, 0.8],
            8..=9 => vec![0.2, 0.5, 0.7],
            10..=11 => vec![0.2, 0.4, 0.6],
            _ => vec![0.1, 0.3, 0.5],
        },
    }
}

/// Candidate configurations: the λ grid, crossed with a shared λ_t grid for TALL methods.
pub fn candidate_configs(
    method: MergeMethod,
    lambdas: &[f64],
    tall_lambdas: &[f64],
    task_ids: &[String],
    ties_keep_fraction: f64,
) -> Vec<MergeConfig> {
    let base = |lambda: f64| MergeConfig {
        method,
        lambda,
        ties_keep_fraction,
        tall_lambda: IndexMap::new(),
    };
    if !method.is_tall() {
        return lambdas.iter().map(|&l| base(l)).collect();
    }
    lambdas
        .iter()
        .flat_map(|&l| {
            tall_lambdas.iter().map(move |&lt| {
                let mut cfg = base(l);
                cfg.tall_lambda = task_ids.iter().map(|t| (t.clone(), lt)).collect();
                cfg
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: MergeConfig,
    pub report: MetricReport,
    /// Validation objective of every candidate, in grid order.
    pub scores: Vec<f64>,
}

/// Exhaustive search maximizing `avg_normalized`; ties go to the earliest candidate.
pub fn hyperparam_search(
    candidates: &[MergeConfig],
    evaluate_candidate: impl Fn(&MergeConfig) -> Result<MetricReport> + Sync,
) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(Error::Empty("hyperparameter grid".into()));
    }
    let reports = candidates
        .par_iter()
        .map(&evaluate_candidate)
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = reports.iter().map(|r| r.avg_normalized).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(SearchResult {
        best: candidates[best].clone(),
        report: reports[best].clone(),
        scores,
    })
}

/// Seeded split of a test set into (validation, heldout).
pub fn validation_split(
    data: &LabeledBatch,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledBatch, LabeledBatch)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let n = data.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Empty(format!(
            "validation split of {n} samples at fraction {fraction} leaves a side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, rest) = idx.split_at_mut(n_val);
    val.sort_unstable();
    rest.sort_unstable();
    Ok((data.select(val), data.select(rest)))
}
