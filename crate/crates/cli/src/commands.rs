//! Subcommands: each reads its inputs from the run directory, computes, and
//! writes its artifacts plus a manifest recording input and output hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use indexmap::IndexMap;
use mergeforge::align::{apply_permutation, weight_matching_report, PermutationMap};
use mergeforge::checkpoint::{encode_weights, load_weights, sha256_hex, weight_distance};
use mergeforge::eval::{barrier, landscape_grid, report, GridMetric, GridSpec, MetricReport};
use mergeforge::merge::{local_merge, task_vector, MergeConfig, MergedBundle};
use mergeforge::network::{ArchitectureDescriptor, ExpertRecord, Model};
use mergeforge::repair::TactBundle;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::pipeline::{self, FoundationChoice, Split, FOUNDATION_IDS};

pub const PRETRAIN_MANIFEST: &str = "manifest.json";
pub const EXPERTS_INDEX: &str = "experts.json";
pub const PERM_FILE: &str = "perm.json";
pub const ALIGN_REPORT: &str = "align_report.json";
pub const MERGED_DIR: &str = "merged";
pub const TACT_DIR: &str = "tact";
pub const REPORT_FILE: &str = "report.json";
pub const TACT_REPORT_FILE: &str = "report_tact.json";
pub const LANDSCAPE_FILE: &str = "landscape.csv";
pub const SEARCH_FILE: &str = "search.json";
pub const BEST_MERGE_FILE: &str = "best_merge.json";

/// Per-invocation switches that are not part of the run config.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub foundation: Option<FoundationChoice>,
    /// Explicit checkpoints for `align`; the run's foundations otherwise.
    pub align_inputs: Option<(PathBuf, PathBuf)>,
    /// Replaces the config's merge section (e.g. with a search result).
    pub merge_config: Option<PathBuf>,
    pub landscape: bool,
    pub grid: Option<GridSpec>,
}

/// What a command prints: a one-line summary and its JSON form.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub json: serde_json::Value,
}

/// Files written by a command. Unless committed, they are deleted on drop,
/// so a failing command leaves no partial artifacts behind.
struct Artifacts {
    root: PathBuf,
    written: Vec<PathBuf>,
    hashes: IndexMap<String, String>,
    committed: bool,
}

impl Artifacts {
    fn new(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Artifacts {
            root: root.to_path_buf(),
            written: Vec::new(),
            hashes: IndexMap::new(),
            committed: false,
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(path.clone());
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records files some other writer produced under `rel_dir`.
    fn adopt_dir(&mut self, rel_dir: &str) -> anyhow::Result<()> {
        let dir = self.root.join(rel_dir);
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()?;
        names.sort();
        for name in names {
            let path = dir.join(&name);
            self.hashes
                .insert(format!("{rel_dir}/{name}"), sha256_hex(&fs::read(&path)?));
            self.written.push(path);
        }
        Ok(())
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    command: String,
    config_sha256: String,
    inputs: IndexMap<String, String>,
    outputs: IndexMap<String, String>,
}

/// Input file hashes, read from disk.
#[derive(Default)]
struct Inputs(IndexMap<String, String>);

impl Inputs {
    fn read(&mut self, root: &Path, rel: &str) -> anyhow::Result<Vec<u8>> {
        let path = root.join(rel);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.0.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }
}

fn manifest_name(command: &str) -> String {
    match command {
        "pretrain" => PRETRAIN_MANIFEST.to_string(),
        c => format!("{c}_manifest.json"),
    }
}

/// Writes the resolved config and the manifest, then keeps the artifacts.
fn finish(command: &str, cfg: &RunConfig, inputs: Inputs, mut art: Artifacts) -> anyhow::Result<()> {
    let config_json = cfg.to_json();
    art.write(&format!("{command}_config.json"), config_json.as_bytes())?;
    let manifest = Manifest {
        command: command.into(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        inputs: inputs.0,
        outputs: art.hashes.clone(),
    };
    art.write(&manifest_name(command), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    art.commit();
    Ok(())
}

fn foundation_file(k: usize) -> String {
    format!("{}.mfwt", FOUNDATION_IDS[k])
}

fn load_foundations(root: &Path, inputs: &mut Inputs) -> anyhow::Result<Vec<Model>> {
    (0..2)
        .map(|k| {
            let rel = foundation_file(k);
            if !root.join(&rel).exists() {
                bail!("missing foundation {}: run `pretrain` first", root.join(&rel).display());
            }
            let ws = mergeforge::checkpoint::decode_weights(&inputs.read(root, &rel)?)?;
            Ok(pipeline::split_model(&ws))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertEntry {
    task_id: String,
    foundation_id: String,
    file: String,
}

fn load_experts(root: &Path, inputs: &mut Inputs) -> anyhow::Result<Vec<ExpertRecord>> {
    if !root.join(EXPERTS_INDEX).exists() {
        bail!("no experts in {}: run `finetune` first", root.display());
    }
    let index: Vec<ExpertEntry> = serde_json::from_slice(&inputs.read(root, EXPERTS_INDEX)?)?;
    index
        .into_iter()
        .map(|e| {
            let m = pipeline::split_model(&mergeforge::checkpoint::decode_weights(
                &inputs.read(root, &e.file)?,
            )?);
            Ok(ExpertRecord {
                encoder: m.encoder,
                head: m.head,
                task_id: e.task_id,
                foundation_id: e.foundation_id,
            })
        })
        .collect()
}

fn load_perm(root: &Path, inputs: &mut Inputs) -> anyhow::Result<Option<PermutationMap>> {
    if !root.join(PERM_FILE).exists() {
        return Ok(None);
    }
    let text = String::from_utf8(inputs.read(root, PERM_FILE)?)?;
    Ok(Some(PermutationMap::from_json(&text)?))
}

fn merge_section(cfg: &RunConfig, opts: &Options) -> anyhow::Result<MergeConfig> {
    match &opts.merge_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(cfg.merge.clone()),
    }
}

/// Shared loading for commands that work on localized experts.
struct Localized {
    arch: ArchitectureDescriptor,
    suite: mergeforge::datasets::TaskSuite,
    init: mergeforge::checkpoint::WeightSet,
    experts: Vec<ExpertRecord>,
}

fn load_localized(cfg: &RunConfig, root: &Path, inputs: &mut Inputs) -> anyhow::Result<Localized> {
    let arch = cfg.architecture()?;
    let suite = pipeline::suite(cfg)?;
    let foundations: Vec<_> = load_foundations(root, inputs)?
        .into_iter()
        .map(|m| m.encoder)
        .collect();
    let experts = load_experts(root, inputs)?;
    let perm = load_perm(root, inputs)?;
    let (init, experts) = pipeline::localize_experts(&arch, &foundations, &experts, perm.as_ref())?;
    Ok(Localized {
        arch,
        suite,
        init,
        experts,
    })
}

pub fn cmd_pretrain(cfg: &RunConfig, _opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let arch = cfg.architecture()?;
    let suite = pipeline::suite(cfg)?;
    let models = pipeline::pretrain(cfg, &arch, &suite)?;
    let mut art = Artifacts::new(root)?;
    art.write("arch.json", serde_json::to_string_pretty(&arch)?.as_bytes())?;
    art.write("suite.json", serde_json::to_string_pretty(&suite.provenance())?.as_bytes())?;
    for (k, m) in models.iter().enumerate() {
        art.write(&foundation_file(k), &encode_weights(&pipeline::join_model(m)?))?;
    }
    let dist = weight_distance(&models[0].encoder, &models[1].encoder)?;
    let hashes: Vec<String> = (0..2).map(|k| art.hashes[&foundation_file(k)].clone()).collect();
    finish("pretrain", cfg, Inputs::default(), art)?;
    Ok(Outcome {
        summary: format!("pretrained 2 foundations (encoder distance {dist:.4})"),
        json: json!({"foundations": hashes, "encoder_distance": dist}),
    })
}

pub fn cmd_finetune(cfg: &RunConfig, opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let arch = cfg.architecture()?;
    let suite = pipeline::suite(cfg)?;
    let mut inputs = Inputs::default();
    let foundations: Vec<_> = load_foundations(root, &mut inputs)?
        .into_iter()
        .map(|m| m.encoder)
        .collect();
    let choice = opts.foundation.unwrap_or(FoundationChoice::Alternate);
    let experts = pipeline::finetune(cfg, &arch, &suite, &foundations, choice)?;
    let mut art = Artifacts::new(root)?;
    let mut index = Vec::new();
    for (i, e) in experts.iter().enumerate() {
        let file = format!("expert_{i}.mfwt");
        art.write(&file, &encode_weights(&e.encoder.union(&e.head)?))?;
        index.push(ExpertEntry {
            task_id: e.task_id.clone(),
            foundation_id: e.foundation_id.clone(),
            file,
        });
    }
    art.write(EXPERTS_INDEX, serde_json::to_string_pretty(&index)?.as_bytes())?;
    finish("finetune", cfg, inputs, art)?;
    Ok(Outcome {
        summary: format!("fine-tuned {} experts", index.len()),
        json: serde_json::to_value(&index)?,
    })
}

#[derive(Serialize)]
struct AlignReport {
    initial_distance: f64,
    final_distance: f64,
    objective_trace: Vec<f64>,
    sweep_distances: Vec<f64>,
    /// Barriers on the pretraining test data before and after alignment,
    /// present when both inputs carry a classifier head.
    barrier_raw: Option<f64>,
    barrier_aligned: Option<f64>,
}

pub fn cmd_align(cfg: &RunConfig, opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let arch = cfg.architecture()?;
    let mut inputs = Inputs::default();
    let models = match &opts.align_inputs {
        Some((a, b)) => {
            let mut load = |p: &PathBuf| -> anyhow::Result<Model> {
                let ws = load_weights(p).with_context(|| format!("loading {}", p.display()))?;
                inputs.0.insert(p.display().to_string(), mergeforge::checkpoint::weights_hash(&ws));
                Ok(pipeline::split_model(&ws))
            };
            vec![load(a)?, load(b)?]
        }
        None => load_foundations(root, &mut inputs)?,
    };
    let rep = weight_matching_report(
        &models[0].encoder,
        &models[1].encoder,
        &arch,
        cfg.seed,
        cfg.align.max_sweeps,
    )?;
    let (barrier_raw, barrier_aligned) = if models.iter().all(|m| !m.head.is_empty()) {
        let suite = pipeline::suite(cfg)?;
        let data = &suite.pretrain.test;
        let aligned = Model {
            encoder: apply_permutation(&models[1].encoder, &arch, &rep.perm)?,
            head: apply_permutation(&models[1].head, &arch, &rep.perm)?,
        };
        let n = cfg.eval.barrier_grid;
        (
            Some(barrier(&arch, &models[0], &models[1], data, n)?),
            Some(barrier(&arch, &models[0], &aligned, data, n)?),
        )
    } else {
        (None, None)
    };
    let report = AlignReport {
        initial_distance: rep.initial_distance,
        final_distance: rep.final_distance,
        objective_trace: rep.objective_trace.clone(),
        sweep_distances: rep.sweep_distances.clone(),
        barrier_raw,
        barrier_aligned,
    };
    let mut art = Artifacts::new(root)?;
    art.write(PERM_FILE, rep.perm.to_json().as_bytes())?;
    art.write(ALIGN_REPORT, serde_json::to_string_pretty(&report)?.as_bytes())?;
    finish("align", cfg, inputs, art)?;
    Ok(Outcome {
        summary: format!(
            "aligned: distance {:.4} -> {:.4} in {} sweeps",
            report.initial_distance,
            report.final_distance,
            report.sweep_distances.len()
        ),
        json: serde_json::to_value(&report)?,
    })
}

pub fn cmd_merge(cfg: &RunConfig, opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let mut inputs = Inputs::default();
    let mut cfg = cfg.clone();
    cfg.merge = merge_section(&cfg, opts)?;
    let loc = load_localized(&cfg, root, &mut inputs)?;
    let bundle = local_merge(&loc.init, &loc.experts, &cfg.merge)?;
    let mut art = Artifacts::new(root)?;
    let dir = root.join(MERGED_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let saved = bundle.save(&dir);
    art.adopt_dir(MERGED_DIR)?;
    saved?;
    finish("merge", &cfg, inputs, art)?;
    Ok(Outcome {
        summary: format!(
            "merged {} experts with {} (lambda {})",
            bundle.task_ids.len(),
            cfg.merge.method.name(),
            cfg.merge.lambda
        ),
        json: serde_json::to_value(&cfg.merge)?,
    })
}

fn load_bundle(root: &Path, inputs: &mut Inputs) -> anyhow::Result<MergedBundle> {
    let dir = root.join(MERGED_DIR);
    if !dir.join("manifest.json").exists() {
        bail!("no merged bundle in {}: run `merge` first", root.display());
    }
    inputs.read(root, &format!("{MERGED_DIR}/manifest.json"))?;
    Ok(MergedBundle::load(&dir)?)
}

fn tact_stem(i: usize) -> String {
    format!("tact_{i}")
}

pub fn cmd_tact(cfg: &RunConfig, _opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let mut inputs = Inputs::default();
    let loc = load_localized(cfg, root, &mut inputs)?;
    let bundle = load_bundle(root, &mut inputs)?;
    let bundles = pipeline::tact(cfg, &loc.arch, &loc.suite, &bundle, &loc.experts)?;
    let mut art = Artifacts::new(root)?;
    let dir = root.join(TACT_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut saved = Ok(());
    for (i, b) in bundles.values().enumerate() {
        saved = b.save(&dir, &tact_stem(i), &loc.arch.id);
        if saved.is_err() {
            break;
        }
    }
    art.adopt_dir(TACT_DIR)?;
    saved?;
    let bytes: usize = bundles.values().map(|b| b.encode(&loc.arch.id).len()).sum();
    finish("tact", cfg, inputs, art)?;
    Ok(Outcome {
        summary: format!("computed {} TACT corrections ({bytes} bytes)", bundles.len()),
        json: json!({"tasks": bundles.keys().collect::<Vec<_>>(), "bytes": bytes}),
    })
}

/// TACT bundles in `tact/`, if they were computed for the current merge.
fn load_tact(
    root: &Path,
    bundle_manifest_hash: &str,
    task_ids: &[String],
    inputs: &mut Inputs,
) -> anyhow::Result<Option<IndexMap<String, TactBundle>>> {
    let manifest_path = root.join(manifest_name("tact"));
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: Manifest = serde_json::from_slice(&inputs.read(root, &manifest_name("tact"))?)?;
    let key = format!("{MERGED_DIR}/manifest.json");
    if manifest.inputs.get(&key).map(String::as_str) != Some(bundle_manifest_hash) {
        log::warn!("TACT bundles were computed for a different merge; skipping the TACT report");
        return Ok(None);
    }
    let dir = root.join(TACT_DIR);
    let mut out = IndexMap::new();
    for (i, t) in task_ids.iter().enumerate() {
        inputs.read(root, &format!("{TACT_DIR}/{}.mfwt", tact_stem(i)))?;
        let b = TactBundle::load(&dir, &tact_stem(i))?;
        if &b.task_id != t {
            bail!("TACT bundle {i} is for task `{}`, expected `{t}`", b.task_id);
        }
        out.insert(t.clone(), b);
    }
    Ok(Some(out))
}

pub fn cmd_eval(cfg: &RunConfig, opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let mut inputs = Inputs::default();
    let loc = load_localized(cfg, root, &mut inputs)?;
    let bundle = load_bundle(root, &mut inputs)?;
    let bundle_hash = inputs.0[&format!("{MERGED_DIR}/manifest.json")].clone();
    let tasks = pipeline::eval_tasks(cfg, &loc.arch, &loc.suite, &loc.experts, Split::Heldout)?;
    let mut reports: Vec<MetricReport> = vec![report(&loc.arch, &bundle, &tasks, None)?];
    if let Some(tact) = load_tact(root, &bundle_hash, &bundle.task_ids, &mut inputs)? {
        reports.push(report(&loc.arch, &bundle, &tasks, Some(&tact))?);
    }
    let mut art = Artifacts::new(root)?;
    art.write(REPORT_FILE, serde_json::to_string_pretty(&reports[0])?.as_bytes())?;
    if let Some(r) = reports.get(1) {
        art.write(TACT_REPORT_FILE, serde_json::to_string_pretty(r)?.as_bytes())?;
    }
    if opts.landscape {
        if loc.experts.len() < 2 {
            bail!("a landscape needs at least two tasks");
        }
        let t1 = task_vector(&loc.experts[0], &loc.init)?;
        let t2 = task_vector(&loc.experts[1], &loc.init)?;
        let spec = opts.grid.unwrap_or(cfg.eval.landscape);
        let grid = landscape_grid(&loc.arch, &loc.init, &t1, &t2, &tasks, &spec, GridMetric::AvgNormalized)?;
        art.write(LANDSCAPE_FILE, grid.to_csv().as_bytes())?;
    }
    finish("eval", cfg, inputs, art)?;
    let summary = reports
        .iter()
        .map(|r| format!("{}: avg {:.4} min {:.4}", r.method, r.avg_normalized, r.min_normalized))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Outcome {
        summary,
        json: serde_json::to_value(&reports)?,
    })
}

pub fn cmd_search(cfg: &RunConfig, _opts: &Options) -> anyhow::Result<Outcome> {
    let root = &cfg.out_dir;
    let mut inputs = Inputs::default();
    let loc = load_localized(cfg, root, &mut inputs)?;
    let tasks = pipeline::eval_tasks(cfg, &loc.arch, &loc.suite, &loc.experts, Split::Validation)?;
    let (candidates, result) = pipeline::search(cfg, &loc.arch, &loc.init, &loc.experts, &tasks)?;
    let mut art = Artifacts::new(root)?;
    let doc = json!({"candidates": candidates, "result": result});
    art.write(SEARCH_FILE, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    art.write(BEST_MERGE_FILE, serde_json::to_string_pretty(&result.best)?.as_bytes())?;
    finish("search", cfg, inputs, art)?;
    Ok(Outcome {
        summary: format!(
            "best {} lambda {} (validation avg {:.4}) over {} candidates",
            result.best.method.name(),
            result.best.lambda,
            result.report.avg_normalized,
            candidates.len()
        ),
        json: serde_json::to_value(&result.best)?,
    })
}
