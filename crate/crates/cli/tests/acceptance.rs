//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use indexmap::IndexMap;
use mergeforge::align::{
    apply_permutation, linear_sum_assignment, random_permutation_map, weight_matching, CostMatrix,
    PermutationMap,
};
use mergeforge::checkpoint::{
    decode_weights, encode_weights, load_weights, save_weights, weight_distance, WeightSet,
};
use mergeforge::datasets::{synth_suite, SuiteSpec};
use mergeforge::eval::{
    barrier, candidate_configs, default_lambda_grid, landscape_grid, report, EvalTask, GridMetric,
    GridSpec, MetricReport,
};
use mergeforge::merge::{
    local_merge, tall_mask, task_arithmetic, task_vector, ties_merge, DeltaTensor, MergeConfig,
    MergeMethod, MergedBundle, TaskVector, ALIGN_MAX_SWEEPS,
};
use mergeforge::network::{forward, init_model, ArchitectureDescriptor, ExpertRecord, Model};
use mergeforge::repair::{
    channel_stats, compute_stats, corrected_activations, stats_diagnostics, tact_correct_counted,
    PassCounter, TactBundle,
};
use mergeforge_cli::pipeline::{self, FoundationChoice, Split};
use mergeforge_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::{json, Value};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const LOCAL_METHODS: [MergeMethod; 4] = [
    MergeMethod::Average,
    MergeMethod::TaskArithmetic,
    MergeMethod::Ties,
    MergeMethod::TallTa,
];

struct Verdict {
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn verdict(pass: bool, detail: impl Into<String>, elapsed: Duration, budget: Option<Duration>) -> Verdict {
    let mut detail = detail.into();
    let mut pass = pass;
    if let Some(b) = budget {
        if elapsed > b {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
    }
    Verdict { pass, detail, elapsed }
}

fn failed(e: anyhow::Error, elapsed: Duration) -> Verdict {
    Verdict {
        pass: false,
        detail: format!("error: {e:#}"),
        elapsed,
    }
}

// ---------------------------------------------------------------- fixtures

/// The 4-task desk suite used by the comparative criteria.
fn world_config(seed: u64) -> RunConfig {
    serde_json::from_value(json!({
        "suite": {"n_tasks": 4, "in_dim": 16, "classes_per_task": 5, "train_n": 1000, "test_n": 500, "seed": seed},
        "arch": {"hidden": [64, 64, 64, 64], "layer_norm": true},
        "pretrain": {"steps": 2000, "warmup_steps": 100, "peak_lr": 0.1, "batch_size": 128},
        "finetune": {"steps": 1000, "warmup_steps": 60, "peak_lr": 0.05, "batch_size": 64},
        "seed": seed,
    }))
    .expect("valid config")
}

struct World {
    cfg: RunConfig,
    arch: ArchitectureDescriptor,
    suite: mergeforge::datasets::TaskSuite,
    foundations: Vec<Model>,
    /// Every expert fine-tuned from foundation 0.
    local: Vec<ExpertRecord>,
    /// Experts alternating between the two foundations.
    mixed: Vec<ExpertRecord>,
    perm: PermutationMap,
}

impl World {
    fn build(seed: u64) -> Result<World> {
        let cfg = world_config(seed);
        let arch = cfg.architecture()?;
        let suite = pipeline::suite(&cfg)?;
        let foundations = pipeline::pretrain(&cfg, &arch, &suite)?;
        let encs = encoders(&foundations);
        let local = pipeline::finetune(&cfg, &arch, &suite, &encs, FoundationChoice::Only(0))?;
        let mixed = pipeline::finetune(&cfg, &arch, &suite, &encs, FoundationChoice::Alternate)?;
        let perm = weight_matching(&encs[0], &encs[1], &arch, seed, ALIGN_MAX_SWEEPS)?;
        Ok(World {
            cfg,
            arch,
            suite,
            foundations,
            local,
            mixed,
            perm,
        })
    }

    fn with_method(&self, method: MergeMethod) -> RunConfig {
        let mut cfg = self.cfg.clone();
        cfg.merge.method = method;
        cfg
    }
}

fn encoders(models: &[Model]) -> Vec<WeightSet> {
    models.iter().map(|m| m.encoder.clone()).collect()
}

/// A validation-selected merge evaluated on held-out data with and without TACT.
struct Selected {
    bundle: MergedBundle,
    experts: Vec<ExpertRecord>,
    tact: IndexMap<String, TactBundle>,
    heldout: Vec<EvalTask>,
    vanilla: MetricReport,
    corrected: MetricReport,
}

fn select_and_correct(
    w: &World,
    method: MergeMethod,
    init: &WeightSet,
    experts: &[ExpertRecord],
) -> Result<Selected> {
    let cfg = w.with_method(method);
    let val = pipeline::eval_tasks(&cfg, &w.arch, &w.suite, experts, Split::Validation)?;
    let (_, res) = pipeline::search(&cfg, &w.arch, init, experts, &val)?;
    let bundle = local_merge(init, experts, &res.best)?;
    let heldout = pipeline::eval_tasks(&cfg, &w.arch, &w.suite, experts, Split::Heldout)?;
    let tact = pipeline::tact(&cfg, &w.arch, &w.suite, &bundle, experts)?;
    let vanilla = report(&w.arch, &bundle, &heldout, None)?;
    let corrected = report(&w.arch, &bundle, &heldout, Some(&tact))?;
    Ok(Selected {
        bundle,
        experts: experts.to_vec(),
        tact,
        heldout,
        vanilla,
        corrected,
    })
}

// ---------------------------------------------------------------- oracles

fn brute_force_max(g: &CostMatrix) -> f64 {
    let n = g.dim().0;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::NEG_INFINITY;
    permute(&mut perm, 0, &mut |p| best = best.max(g.objective(p)));
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Trim, elect, disjoint mean, written out from the definitions.
fn ties_oracle(tvs: &[Vec<f64>], keep: f64, lambda: f64) -> Vec<f64> {
    let n = tvs[0].len();
    let k = ((keep * n as f64).round() as usize).clamp(1, n);
    let trimmed: Vec<Vec<f64>> = tvs
        .iter()
        .map(|v| {
            (0..n)
                .map(|i| {
                    let beaten_by = (0..n)
                        .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                        .count();
                    if beaten_by < k {
                        v[i]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let total: f64 = trimmed.iter().map(|t| t[i]).sum();
            let agreeing: Vec<f64> = trimmed
                .iter()
                .map(|t| t[i])
                .filter(|&x| x != 0.0 && total != 0.0 && x.signum() == total.signum())
                .collect();
            if agreeing.is_empty() {
                0.0
            } else {
                lambda * agreeing.iter().sum::<f64>() / agreeing.len() as f64
            }
        })
        .collect()
}

fn single_tensor_tv(id: &str, vals: &[f64]) -> TaskVector {
    let mut delta = IndexMap::new();
    delta.insert(
        "w".to_string(),
        DeltaTensor {
            shape: vec![vals.len()],
            data: vals.to_vec(),
        },
    );
    TaskVector {
        task_id: id.into(),
        delta,
    }
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criteria

fn c1_permutation_equivalence() -> Result<(bool, String)> {
    let arch = ArchitectureDescriptor::mlp(16, &[64; 4], 10, true)?;
    let suite = synth_suite(&SuiteSpec::new(1, 16, 10, 64, 64, 3))?;
    let x = suite.tasks[0].train.inputs.view();
    let devs = (0..50u64)
        .into_par_iter()
        .map(|s| {
            let mut m = init_model(&arch, 10, s);
            // Non-trivial layer-norm parameters so their permutation is exercised.
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for (_, t) in m.encoder.iter_mut() {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.2f32..0.2);
                }
            }
            let pm = random_permutation_map(&arch, 1000 + s);
            let pe = apply_permutation(&m.encoder, &arch, &pm)?;
            let ph = apply_permutation(&m.head, &arch, &pm)?;
            let a = forward(&arch, &m.encoder, &m.head, x)?;
            let b = forward(&arch, &pe, &ph, x)?;
            Ok(max_abs(a.as_slice().unwrap(), b.as_slice().unwrap()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = devs.iter().cloned().fold(0.0, f64::max);
    Ok((worst <= 1e-5, format!("50 pairs, max logit deviation {worst:.2e} (tol 1e-5)")))
}

fn c2_lsa_exactness() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut total = 0;
    for n in 1..=6 {
        for _ in 0..200 {
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = CostMatrix::new(n, n, data)?;
            let p = linear_sum_assignment(&g)?;
            total += 1;
            if g.objective(&p) != brute_force_max(&g) {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{total} matrices (200 per n, n = 1..6), {mismatches} mismatches")))
}

fn c3_planted_recovery() -> Result<(bool, String)> {
    let results = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let w = 8 + 4 * (s as usize % 3);
            let arch = ArchitectureDescriptor::mlp(6, &[w, w + 2, w], 4, true)?;
            // Every encoder tensor, biases and norm parameters included, drawn from N(0, 1).
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut a = init_model(&arch, 4, s).encoder;
            for (_, t) in a.iter_mut() {
                for v in t.data_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
            let planted = random_permutation_map(&arch, 500 + s);
            let b = apply_permutation(&a, &arch, &planted)?;
            let p = weight_matching(&a, &b, &arch, s, ALIGN_MAX_SWEEPS)?;
            let d = weight_distance(&a, &apply_permutation(&b, &arch, &p)?)?;
            Ok((d < 1e-6 && p == planted.inverse(), d))
        })
        .collect::<Result<Vec<_>>>()?;
    let ok = results.iter().filter(|r| r.0).count();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok((ok == 20, format!("{ok}/20 seeds recovered exactly (widths 8-18), worst distance {worst:.1e}")))
}

fn c4_ties_tall_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties_worst = 0.0f64;
    let mut tall_mismatch = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(1..=4);
        // Quarter-step values so magnitude ties and sign cancellations occur.
        let vs: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..n).map(|_| rng.random_range(-4i32..=4) as f64 * 0.25).collect())
            .collect();
        let keep = rng.random_range(0.05..=1.0);
        let lambda = rng.random_range(0.1..2.0);
        let tvs: Vec<TaskVector> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| single_tensor_tv(&format!("t{i}"), v))
            .collect();
        let mut zero = WeightSet::new("oracle");
        zero.insert("w", mergeforge::checkpoint::Tensor::zeros(vec![n]))?;
        let got = ties_merge(&zero, &tvs, keep, lambda)?;
        let expect = ties_oracle(&vs, keep, lambda);
        for (a, b) in got.get("w").unwrap().data().iter().zip(&expect) {
            ties_worst = ties_worst.max((*a as f64 - b).abs());
        }

        let merged: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let own: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lt = if case % 10 == 0 { 0.0 } else { rng.random_range(0.0..3.0) };
        let mask = tall_mask(&single_tensor_tv("a", &own), &single_tensor_tv("m", &merged), lt)?;
        let expect: Vec<bool> = own
            .iter()
            .zip(&merged)
            .map(|(t, m)| t.abs() >= (m - t).abs() * lt)
            .collect();
        if mask.bits["w"].1 != expect {
            tall_mismatch += 1;
        }
    }
    Ok((
        ties_worst <= 1e-7 && tall_mismatch == 0,
        format!("1000 cases: TIES max error {ties_worst:.1e} (tol 1e-7), TALL mask mismatches {tall_mismatch}"),
    ))
}

fn c5_moment_matching(worlds: &[World], selected: &[Vec<Selected>]) -> Result<(bool, String)> {
    let mut worst_moment = 0.0f64;
    let mut worst_at = String::new();
    let (mut channels, mut outside, mut outside_small_running) = (0usize, 0usize, 0usize);
    let mut ratio_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut checked = 0;
    for (w, per_method) in worlds.iter().zip(selected) {
        for sel in per_method {
            for e in &sel.experts {
                let data = pipeline::stats_data(&w.cfg, &w.suite, &e.task_id)?;
                let x = data.inputs.view();
                let merged = sel.bundle.encoder_for(&e.task_id)?;
                let b = &sel.tact[&e.task_id];
                let target = compute_stats(&w.arch, &e.encoder, &[x])?;
                let acts = corrected_activations(&w.arch, &merged, b, x)?;
                for (a, (name, t)) in acts.iter().zip(&target.modules) {
                    let s = channel_stats(a.view());
                    let r = &b.running.modules[name];
                    for c in 0..s.width() {
                        let dev = (s.mean[c] - t.mean[c]).abs().max((s.std[c] - t.std[c]).abs());
                        channels += 1;
                        if dev > 1e-3 {
                            outside += 1;
                            if r.std[c] * r.std[c] < 100.0 * b.epsilon {
                                outside_small_running += 1;
                            }
                        }
                        if dev > worst_moment {
                            worst_moment = dev;
                            worst_at = format!(
                                "{} {}/{name}[{c}]: target ({:.4}, {:.4}) corrected ({:.4}, {:.4}) running std {:.2e}",
                                sel.bundle.config.method.name(),
                                e.task_id,
                                t.mean[c],
                                t.std[c],
                                s.mean[c],
                                s.std[c],
                                r.std[c]
                            );
                        }
                    }
                }
                for d in stats_diagnostics(&w.arch, &merged, &e.encoder, Some(b), x)? {
                    ratio_range.0 = ratio_range.0.min(d.variance_ratio);
                    ratio_range.1 = ratio_range.1.max(d.variance_ratio);
                }
                checked += 1;
            }
        }
    }
    let pass = worst_moment <= 1e-3 && ratio_range.0 >= 0.9 && ratio_range.1 <= 1.1;
    Ok((
        pass,
        format!(
            "{checked} (merge, task) pairs: worst mean/std deviation {worst_moment:.2e} (tol 1e-3), \
             {outside}/{channels} channels outside tolerance ({outside_small_running} with running σ² < 100ε), \
             variance ratio in [{:.4}, {:.4}]; worst at {worst_at}",
            ratio_range.0, ratio_range.1
        ),
    ))
}

fn c6_reconstruction(worlds: &[World], selected: &[Vec<Selected>]) -> Result<(bool, String)> {
    let w = &worlds[0];
    let f0 = &w.foundations[0].encoder;
    let mut bitwise = 0;
    let mut total = 0;
    let (init, localized) =
        pipeline::localize_experts(&w.arch, &encoders(&w.foundations), &w.mixed, Some(&w.perm))?;
    for (init, experts) in [(f0, &w.local), (&init, &localized)] {
        for e in experts.iter() {
            total += 1;
            if task_arithmetic(init, &[task_vector(e, init)?], 1.0)?.bit_eq(&e.encoder) {
                bitwise += 1;
            }
        }
    }
    let mut equal_reports = 0;
    let mut compared = 0;
    for (base, tall) in [
        (MergeMethod::TaskArithmetic, MergeMethod::TallTa),
        (MergeMethod::Ties, MergeMethod::TallTies),
    ] {
        for (wi, world) in worlds.iter().enumerate() {
            let sel = selected[wi]
                .iter()
                .find(|s| s.bundle.config.method == base)
                .map(|s| &s.bundle)
                .ok_or_else(|| anyhow!("no selected {base:?} merge"));
            let base_bundle = match sel {
                Ok(b) => b.clone(),
                Err(_) => {
                    let cfg = MergeConfig {
                        method: base,
                        lambda: default_lambda_grid(base, 4)[1],
                        ..Default::default()
                    };
                    local_merge(&world.foundations[0].encoder, &world.local, &cfg)?
                }
            };
            let mut cfg = base_bundle.config.clone();
            cfg.method = tall;
            cfg.tall_lambda = world.local.iter().map(|e| (e.task_id.clone(), 0.0)).collect();
            let tall_bundle = local_merge(&world.foundations[0].encoder, &world.local, &cfg)?;
            let held = &selected[wi][0].heldout;
            let a = report(&world.arch, &base_bundle, held, None)?;
            let b = report(&world.arch, &tall_bundle, held, None)?;
            compared += 1;
            if a.per_task == b.per_task
                && a.avg_normalized == b.avg_normalized
                && a.min_normalized == b.min_normalized
            {
                equal_reports += 1;
            }
        }
    }
    Ok((
        bitwise == total && equal_reports == compared,
        format!(
            "single-task arithmetic bitwise on {bitwise}/{total} experts; \
             TALL(λ_t = 0) report identical on {equal_reports}/{compared} merges"
        ),
    ))
}

fn c7_barrier(worlds: &[World]) -> Result<(bool, String)> {
    let rows = worlds
        .par_iter()
        .map(|w| {
            let data = &w.suite.pretrain.test;
            let (m0, m1) = (&w.foundations[0], &w.foundations[1]);
            let aligned = Model {
                encoder: apply_permutation(&m1.encoder, &w.arch, &w.perm)?,
                head: apply_permutation(&m1.head, &w.arch, &w.perm)?,
            };
            let raw = barrier(&w.arch, m0, m1, data, 25)?;
            let after = barrier(&w.arch, m0, &aligned, data, 25)?;
            let selfb = barrier(&w.arch, m0, m0, data, 25)?;
            Ok((raw, after, selfb))
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = rows.iter().filter(|r| r.0 > r.1).count();
    let zero = rows.iter().all(|r| r.2 == 0.0);
    let pairs: Vec<String> = rows.iter().map(|r| format!("{:.3}->{:.3}", r.0, r.1)).collect();
    Ok((
        wins >= 4 && zero,
        format!(
            "aligned barrier lower on {wins}/5 seeds [{}]; barrier(θ, θ) = 0 exactly: {zero}",
            pairs.join(", ")
        ),
    ))
}

fn c8_directional_tact(selected: &[Vec<Selected>]) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut pass = true;
    for (mi, method) in LOCAL_METHODS.iter().enumerate() {
        let margins: Vec<f64> = selected
            .iter()
            .map(|per| per[mi].corrected.avg_normalized - per[mi].vanilla.avg_normalized)
            .collect();
        let wins = margins.iter().filter(|&&m| m >= 0.0).count();
        pass &= wins >= 4;
        let mean_v: f64 = selected.iter().map(|p| p[mi].vanilla.avg_normalized).sum::<f64>() / 5.0;
        let mean_c: f64 = selected.iter().map(|p| p[mi].corrected.avg_normalized).sum::<f64>() / 5.0;
        parts.push(format!("{} {wins}/5 ({mean_v:.3}->{mean_c:.3})", method.name()));
    }
    Ok((pass, format!("TACT ≥ vanilla per method: {}", parts.join(", "))))
}

fn c9_nonlocal(worlds: &[World], landscape_dir: &Path) -> Result<(bool, String)> {
    let rows = worlds
        .par_iter()
        .map(|w| {
            let (init, localized) = pipeline::localize_experts(
                &w.arch,
                &encoders(&w.foundations),
                &w.mixed,
                Some(&w.perm),
            )?;
            let s = select_and_correct(w, MergeMethod::TaskArithmetic, &init, &localized)?;
            Ok((s.vanilla.avg_normalized, s.corrected.avg_normalized))
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = rows.iter().filter(|r| r.1 > r.0).count();

    let w = &worlds[0];
    let (init, localized) =
        pipeline::localize_experts(&w.arch, &encoders(&w.foundations), &w.mixed, Some(&w.perm))?;
    let tasks = pipeline::eval_tasks(&w.cfg, &w.arch, &w.suite, &localized, Split::Heldout)?;
    let t1 = task_vector(&localized[0], &init)?;
    let t2 = task_vector(&localized[1], &init)?;
    let grid = landscape_grid(&w.arch, &init, &t1, &t2, &tasks, &GridSpec::default(), GridMetric::AvgNormalized)?;
    let path = landscape_dir.join("landscape.csv");
    fs::write(&path, grid.to_csv())?;
    let lines = fs::read_to_string(&path)?.lines().count();
    ensure!(lines == 1 + 13 * 13, "landscape CSV has {lines} lines");

    let pairs: Vec<String> = rows.iter().map(|r| format!("{:.3}->{:.3}", r.0, r.1)).collect();
    Ok((
        wins >= 4,
        format!(
            "aligned TA + TACT beats aligned TA on {wins}/5 seeds [{}]; 13x13 landscape CSV written",
            pairs.join(", ")
        ),
    ))
}

fn c10_cost(worlds: &[World], selected: &[Vec<Selected>]) -> Result<(bool, String)> {
    let w = &worlds[0];
    let sel = &selected[0][1];
    let counter = PassCounter::new();
    for e in &sel.experts {
        let data = pipeline::stats_data(&w.cfg, &w.suite, &e.task_id)?;
        let merged = sel.bundle.encoder_for(&e.task_id)?;
        tact_correct_counted(&w.arch, &merged, e, &data, w.cfg.repair.epsilon, &counter)?;
    }
    let t = sel.experts.len();

    // Size ratio at the default desk architecture.
    let arch = ArchitectureDescriptor::default_desk(32, 10)?;
    let suite = synth_suite(&SuiteSpec::new(1, 32, 10, 256, 64, 7))?;
    let merged = init_model(&arch, 10, 0);
    let expert = init_model(&arch, 10, 1);
    let rec = ExpertRecord {
        encoder: expert.encoder,
        head: expert.head,
        task_id: "task0".into(),
        foundation_id: "foundation0".into(),
    };
    let b = tact_correct_counted(&arch, &merged.encoder, &rec, &suite.tasks[0].train, 1e-5, &PassCounter::new())?;
    let bundle_bytes = b.encode(&arch.id).len();
    let enc_bytes = encode_weights(&merged.encoder).len();
    let ratio = bundle_bytes as f64 / enc_bytes as f64;
    Ok((
        counter.get() == 2 * t && ratio < 0.01,
        format!(
            "{} passes for T = {t} (expected {}); bundle {bundle_bytes} B vs encoder {enc_bytes} B = {:.3}%",
            counter.get(),
            2 * t,
            100.0 * ratio
        ),
    ))
}

fn cli(config: &Path, args: &[&str], threads: Option<&str>) -> Result<String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mergeforge"));
    cmd.arg("--config").arg(config).args(args);
    match threads {
        Some(t) => cmd.env("MERGEFORGE_THREADS", t),
        None => cmd.env_remove("MERGEFORGE_THREADS"),
    };
    let out = cmd.output()?;
    ensure!(
        out.status.success(),
        "mergeforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn small_cli_config(out: &Path, method: &str) -> Value {
    json!({
        "suite": {"n_tasks": 4, "in_dim": 12, "classes_per_task": 4, "train_n": 300, "test_n": 200, "seed": 11},
        "arch": {"hidden": [24, 24, 24], "layer_norm": true},
        "pretrain": {"steps": 400, "warmup_steps": 30, "peak_lr": 0.1, "batch_size": 64},
        "finetune": {"steps": 300, "warmup_steps": 20, "peak_lr": 0.05, "batch_size": 32},
        "merge": {"method": method, "lambda": 0.4},
        "eval": {"landscape": {"a": {"start": -0.25, "end": 1.25, "n": 5}, "b": {"start": -0.25, "end": 1.25, "n": 5}}},
        "seed": 3,
        "out_dir": out,
    })
}

fn write_json(path: &Path, v: &Value) -> Result<PathBuf> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(path.to_path_buf())
}

fn c11_search(tmp: &Path) -> Result<(bool, String)> {
    let run_dir = tmp.join("search_run");
    let base = write_json(&tmp.join("search_base.json"), &small_cli_config(&run_dir, "task_arithmetic"))?;
    cli(&base, &["pretrain"], None)?;
    cli(&base, &["finetune", "--foundation", "0"], None)?;

    let literal_grids: [(MergeMethod, &[f64]); 3] = [
        (MergeMethod::TaskArithmetic, &[0.4, 0.6, 0.9]),
        (MergeMethod::Ties, &[0.3, 0.5, 0.7, 1.0]),
        (MergeMethod::TallTa, &[0.4, 0.6, 0.9]),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (method, grid) in literal_grids {
        let cfg_path = write_json(
            &tmp.join(format!("search_{}.json", method.name())),
            &small_cli_config(&run_dir, method.name()),
        )?;
        let best: MergeConfig = serde_json::from_str(&cli(&cfg_path, &["--json", "search"], None)?)?;
        let again: MergeConfig = serde_json::from_str(&cli(&cfg_path, &["--json", "search"], None)?)?;
        let doc: Value = serde_json::from_slice(&fs::read(run_dir.join("search.json"))?)?;
        let candidates: Vec<MergeConfig> = serde_json::from_value(doc["candidates"].clone())?;
        let recorded: Vec<f64> = serde_json::from_value(doc["result"]["scores"].clone())?;

        // Independent re-evaluation from the artifacts on disk.
        let cfg = RunConfig::load(&cfg_path)?;
        let arch = cfg.architecture()?;
        let suite = pipeline::suite(&cfg)?;
        let init = pipeline::split_model(&load_weights(run_dir.join("foundation0.mfwt"))?).encoder;
        let index: Vec<Value> = serde_json::from_slice(&fs::read(run_dir.join("experts.json"))?)?;
        let experts = index
            .iter()
            .map(|e| {
                let m = pipeline::split_model(&load_weights(run_dir.join(e["file"].as_str().unwrap()))?);
                Ok(ExpertRecord {
                    encoder: m.encoder,
                    head: m.head,
                    task_id: e["task_id"].as_str().unwrap().into(),
                    foundation_id: e["foundation_id"].as_str().unwrap().into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let val = pipeline::eval_tasks(&cfg, &arch, &suite, &experts, Split::Validation)?;
        let ids: Vec<String> = experts.iter().map(|e| e.task_id.clone()).collect();
        let expected = candidate_configs(method, grid, &cfg.eval.tall_lambda_grid, &ids, cfg.merge.ties_keep_fraction);
        let scores = expected
            .iter()
            .map(|c| Ok(report(&arch, &local_merge(&init, &experts, c)?, &val, None)?.avg_normalized))
            .collect::<Result<Vec<f64>>>()?;
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == top).unwrap();
        let checks = [
            ("grid", default_lambda_grid(method, 4) == grid),
            ("candidates", candidates == expected),
            ("scores", recorded == scores),
            ("argmax", best == expected[first]),
            ("repeat", again == best),
        ];
        let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        pass &= bad.is_empty();
        notes.push(format!(
            "{} best λ={} of {} candidates{}",
            method.name(),
            best.lambda,
            expected.len(),
            if bad.is_empty() { String::new() } else { format!(" MISMATCH in {}", bad.join(", ")) }
        ));
    }
    Ok((pass, notes.join("; ")))
}

fn snapshot(dir: &Path) -> Result<IndexMap<String, Vec<u8>>> {
    let mut out = IndexMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.display().to_string(), fs::read(&p)?);
            }
        }
    }
    out.sort_keys();
    Ok(out)
}

fn c12_round_trip(tmp: &Path) -> Result<(bool, String)> {
    let m = init_model(&ArchitectureDescriptor::mlp(16, &[64; 4], 10, true)?, 10, 9);
    let ws = m.encoder.union(&m.head)?;
    let p = tmp.join("rt.mfwt");
    save_weights(&ws, &p)?;
    let bytes = fs::read(&p)?;
    let back = load_weights(&p)?;
    let p2 = tmp.join("rt2.mfwt");
    save_weights(&back, &p2)?;
    let round_trip = back.bit_eq(&ws) && fs::read(&p2)? == bytes && decode_weights(&bytes)?.bit_eq(&ws);

    let run_dir = tmp.join("det_run");
    let cfg_path = write_json(&tmp.join("det.json"), &small_cli_config(&run_dir, "tall_ta"))?;
    let mut cfg: Value = serde_json::from_slice(&fs::read(&cfg_path)?)?;
    cfg["merge"]["tall_lambda"] = json!({"task0": 0.4, "task1": 0.4, "task2": 0.4, "task3": 0.4});
    write_json(&cfg_path, &cfg)?;
    let steps: [&[&str]; 7] = [
        &["pretrain"],
        &["finetune"],
        &["align"],
        &["merge"],
        &["tact"],
        &["eval", "--landscape"],
        &["search"],
    ];
    let mut runs = Vec::new();
    for threads in [None, Some("2")] {
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir)?;
        }
        let mut stdout = Vec::new();
        for s in steps {
            let mut args = vec!["--json"];
            args.extend_from_slice(s);
            stdout.push(cli(&cfg_path, &args, threads)?);
        }
        runs.push((snapshot(&run_dir)?, stdout));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<&String> = a.0.keys().filter(|k| b.0.get(*k) != a.0.get(*k)).collect();
    let same = a.0.len() == b.0.len() && differing.is_empty() && a.1 == b.1;
    Ok((
        round_trip && same,
        format!(
            "checkpoint save/load/save byte-identical: {round_trip}; 7 commands re-run (default vs 2 threads): \
             {} artifacts, {} differ",
            a.0.len(),
            differing.len()
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn judge(r: Result<(bool, String)>, elapsed: Duration, budget: Option<Duration>) -> Verdict {
    match r {
        Ok((pass, detail)) => verdict(pass, detail, elapsed, budget),
        Err(e) => failed(e, elapsed),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut verdicts: Vec<(u32, &str, Verdict)> = Vec::new();
    let tmp = tempfile::tempdir().expect("temp dir");

    let (r, t) = timed(c1_permutation_equivalence);
    verdicts.push((1, "permutation functional equivalence", judge(r, t, Some(secs(10)))));
    let (r, t) = timed(c2_lsa_exactness);
    verdicts.push((2, "assignment solver exactness", judge(r, t, Some(secs(5)))));
    let (r, t) = timed(c3_planted_recovery);
    verdicts.push((3, "planted permutation recovery", judge(r, t, Some(secs(30)))));
    let (r, t) = timed(c4_ties_tall_oracles);
    verdicts.push((4, "TIES / TALL oracle equivalence", judge(r, t, Some(secs(5)))));

    // Shared desk worlds: foundations, experts and alignment for five seeds.
    let (worlds, world_time) = timed(|| SEEDS.par_iter().map(|&s| World::build(s)).collect::<Result<Vec<_>>>());
    let (selected, select_time) = timed(|| {
        let worlds = worlds.as_ref().map_err(|e| anyhow!("{e:#}"))?;
        worlds
            .par_iter()
            .map(|w| {
                LOCAL_METHODS
                    .iter()
                    .map(|&m| select_and_correct(w, m, &w.foundations[0].encoder, &w.local))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    });
    let setup = world_time + select_time;
    let shared = match (&worlds, &selected) {
        (Ok(w), Ok(s)) => Ok((w, s)),
        (Err(e), _) | (_, Err(e)) => Err(anyhow!("fixture construction failed: {e:#}")),
    };
    let with_shared = |f: &dyn Fn(&[World], &[Vec<Selected>]) -> Result<(bool, String)>| {
        let t = Instant::now();
        let r = match &shared {
            Ok((w, s)) => f(w, s),
            Err(e) => Err(anyhow!("{e:#}")),
        };
        (r, t.elapsed())
    };

    let (r5, t5) = with_shared(&|w, s| c5_moment_matching(w, s));
    let (r6, t6) = with_shared(&|w, s| c6_reconstruction(w, s));
    let (r7, t7) = with_shared(&|w, _| c7_barrier(w));
    let (r8, t8) = with_shared(&|_, s| c8_directional_tact(s));
    let (r9, t9) = with_shared(&|w, _| c9_nonlocal(w, tmp.path()));
    let (r10, t10) = with_shared(&|w, s| c10_cost(w, s));
    // Shared fixture time counts toward every criterion that uses it.
    verdicts.push((5, "TACT moment matching", judge(r5, t5 + setup, Some(secs(60)))));
    verdicts.push((6, "reconstruction identities", judge(r6, t6 + setup, None)));
    verdicts.push((7, "barrier phenomenology", judge(r7, t7 + world_time, Some(secs(300)))));
    verdicts.push((8, "directional TACT claim (local)", judge(r8, t8 + setup, Some(secs(900)))));
    verdicts.push((9, "non-local pipeline", judge(r9, t9 + world_time, None)));
    verdicts.push((10, "cost accounting", judge(r10, t10 + setup, None)));

    let (r, t) = timed(|| c11_search(tmp.path()).context("search criterion"));
    verdicts.push((11, "hyperparameter search", judge(r, t, None)));
    let (r, t) = timed(|| c12_round_trip(tmp.path()).context("determinism criterion"));
    verdicts.push((12, "round trip and determinism", judge(r, t, None)));

    let mut failures = 0;
    for (n, name, v) in &verdicts {
        if !v.pass {
            failures += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            v.elapsed.as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", verdicts.len() - failures, verdicts.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
