//! In-memory pipeline stages. Commands wrap these with file I/O.

use indexmap::IndexMap;
use mergeforge::align::PermutationMap;
use mergeforge::checkpoint::WeightSet;
use mergeforge::datasets::{synth_suite, LabeledBatch, TaskSuite};
use mergeforge::eval::{
    candidate_configs, default_lambda_grid, hyperparam_search, report, validation_split, EvalTask,
    SearchResult,
};
use mergeforge::merge::{local_merge, localize, Foundation, MergeConfig, MergedBundle};
use mergeforge::network::{
    evaluate, init_model, make_expert, train, ArchitectureDescriptor, ExpertRecord, Model,
    TrainConfig, HEAD_BIAS, HEAD_WEIGHT,
};
use mergeforge::repair::{tact_correct, TactBundle};
use mergeforge::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;

pub const FOUNDATION_IDS: [&str; 2] = ["foundation0", "foundation1"];

/// Which foundation each task's expert is fine-tuned from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoundationChoice {
    /// Task `i` uses foundation `i mod 2`.
    Alternate,
    Only(usize),
}

impl FoundationChoice {
    pub fn for_task(self, i: usize) -> usize {
        match self {
            FoundationChoice::Alternate => i % 2,
            FoundationChoice::Only(k) => k,
        }
    }
}

impl std::str::FromStr for FoundationChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alternate" => Ok(FoundationChoice::Alternate),
            "0" => Ok(FoundationChoice::Only(0)),
            "1" => Ok(FoundationChoice::Only(1)),
            _ => Err(format!("foundation selector `{s}` is not one of alternate, 0, 1")),
        }
    }
}

/// Which part of each test split an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Validation,
    Heldout,
}

pub fn suite(cfg: &RunConfig) -> Result<TaskSuite> {
    synth_suite(&cfg.suite)
}

/// Concatenates encoder and head into one weight set (the on-disk model form).
pub fn join_model(m: &Model) -> Result<WeightSet> {
    m.encoder.union(&m.head)
}

pub fn split_model(ws: &WeightSet) -> Model {
    let is_head = |n: &str| n == HEAD_WEIGHT || n == HEAD_BIAS;
    let mut encoder = ws.clone();
    encoder.retain(|n| !is_head(n));
    let mut head = ws.clone();
    head.retain(is_head);
    Model { encoder, head }
}

/// Two foundations trained from seeds `seed` and `seed + 1` on the pretrain task.
pub fn pretrain(cfg: &RunConfig, arch: &ArchitectureDescriptor, suite: &TaskSuite) -> Result<Vec<Model>> {
    (0..2u64)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            let tc = TrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            let init = init_model(arch, suite.pretrain.n_classes, seed);
            train(arch, &init, &suite.pretrain.train, &tc)
        })
        .collect()
}

pub fn finetune(
    cfg: &RunConfig,
    arch: &ArchitectureDescriptor,
    suite: &TaskSuite,
    foundations: &[WeightSet],
    choice: FoundationChoice,
) -> Result<Vec<ExpertRecord>> {
    suite
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let k = choice.for_task(i);
            let foundation = foundations
                .get(k)
                .ok_or_else(|| Error::UnknownFoundation(format!("foundation{k}")))?;
            let seed = cfg.seed.wrapping_add(1000 + i as u64);
            let tc = TrainConfig {
                seed,
                ..cfg.finetune.clone()
            };
            make_expert(arch, foundation, FOUNDATION_IDS[k], seed, task, &tc)
        })
        .collect()
}

pub fn foundation_list(foundations: &[WeightSet]) -> Vec<Foundation> {
    foundations
        .iter()
        .zip(FOUNDATION_IDS)
        .map(|(w, id)| Foundation {
            id: id.into(),
            weights: w.clone(),
        })
        .collect()
}

/// Initialization and experts in a common basin. Experts that all share one
/// foundation merge on that foundation; mixed experts need an alignment.
pub fn localize_experts(
    arch: &ArchitectureDescriptor,
    foundations: &[WeightSet],
    experts: &[ExpertRecord],
    perm: Option<&PermutationMap>,
) -> Result<(WeightSet, Vec<ExpertRecord>)> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Empty("expert list".into()))?;
    if experts.iter().all(|e| e.foundation_id == first.foundation_id) {
        let k = FOUNDATION_IDS
            .iter()
            .position(|id| *id == first.foundation_id)
            .filter(|&k| k < foundations.len())
            .ok_or_else(|| Error::UnknownFoundation(first.foundation_id.clone()))?;
        return Ok((foundations[k].clone(), experts.to_vec()));
    }
    let pm = perm.ok_or_else(|| {
        Error::Config("experts come from both foundations; an alignment is required".into())
    })?;
    localize(&foundation_list(foundations), experts, arch, pm)
}

fn split_of(cfg: &RunConfig, data: &LabeledBatch, split: Split) -> Result<LabeledBatch> {
    let (val, held) = validation_split(data, cfg.eval.validation_fraction, cfg.seed)?;
    Ok(match split {
        Split::Validation => val,
        Split::Heldout => held,
    })
}

/// Evaluation tasks carrying each expert's head and its own accuracy on `split`.
pub fn eval_tasks(
    cfg: &RunConfig,
    arch: &ArchitectureDescriptor,
    suite: &TaskSuite,
    experts: &[ExpertRecord],
    split: Split,
) -> Result<Vec<EvalTask>> {
    experts
        .par_iter()
        .map(|e| {
            let task = suite
                .task(&e.task_id)
                .ok_or_else(|| Error::Config(format!("task `{}` not in suite", e.task_id)))?;
            let data = split_of(cfg, &task.test, split)?;
            let expert_acc = evaluate(arch, &e.encoder, &e.head, &data)?.accuracy;
            Ok(EvalTask {
                task_id: e.task_id.clone(),
                head: e.head.clone(),
                data,
                expert_acc,
            })
        })
        .collect()
}

/// Data used for a task's TACT statistics: its training split, optionally truncated.
pub fn stats_data(cfg: &RunConfig, suite: &TaskSuite, task_id: &str) -> Result<LabeledBatch> {
    let task = suite
        .task(task_id)
        .ok_or_else(|| Error::Config(format!("task `{task_id}` not in suite")))?;
    Ok(match cfg.repair.stats_samples {
        Some(n) => task.train.head(n),
        None => task.train.clone(),
    })
}

pub fn tact(
    cfg: &RunConfig,
    arch: &ArchitectureDescriptor,
    suite: &TaskSuite,
    bundle: &MergedBundle,
    experts: &[ExpertRecord],
) -> Result<IndexMap<String, TactBundle>> {
    let bundles = experts
        .par_iter()
        .map(|e| {
            let merged = bundle.encoder_for(&e.task_id)?;
            let data = stats_data(cfg, suite, &e.task_id)?;
            Ok((e.task_id.clone(), tact_correct(arch, &merged, e, &data, cfg.repair.epsilon)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bundles.into_iter().collect())
}

/// Grid search for the configured merge method, scored on validation tasks.
pub fn search(
    cfg: &RunConfig,
    arch: &ArchitectureDescriptor,
    init: &WeightSet,
    experts: &[ExpertRecord],
    tasks: &[EvalTask],
) -> Result<(Vec<MergeConfig>, SearchResult)> {
    let method = cfg.merge.method;
    let lambdas = cfg
        .eval
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(method, experts.len()));
    let ids: Vec<String> = experts.iter().map(|e| e.task_id.clone()).collect();
    let candidates = candidate_configs(
        method,
        &lambdas,
        &cfg.eval.tall_lambda_grid,
        &ids,
        cfg.merge.ties_keep_fraction,
    );
    let result = hyperparam_search(&candidates, |c| {
        report(arch, &local_merge(init, experts, c)?, tasks, None)
    })?;
    Ok((candidates, result))
}
