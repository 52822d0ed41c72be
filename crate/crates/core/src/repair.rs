//! Activation statistics and statistics-based corrections of merged models:
//! task-specific activation correction (TACT), interpolation repair, and
//! per-layer diagnostics.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    decode_container, encode_container, read_bytes, write_bytes, Entry, Payload, WeightSet,
};
use crate::datasets::LabeledBatch;
use crate::error::{Error, Result};
use crate::network::{ArchitectureDescriptor, Encoder, ExpertRecord, Head};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Rows processed per forward chunk while streaming statistics.
const CHUNK: usize = 1024;

/// Per-channel mean and population standard deviation of one module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Moments at every capture point, keyed by module name in layer order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub modules: IndexMap<String, ChannelStats>,
}

/// Streaming per-channel moments, merged across chunks in f64.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(width: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    fn add(&mut self, a: ArrayView2<f32>) {
        let nb = a.nrows() as f64;
        if nb == 0.0 {
            return;
        }
        for (c, col) in a.axis_iter(Axis(1)).enumerate() {
            let mb = col.iter().map(|&v| v as f64).sum::<f64>() / nb;
            let m2b: f64 = col.iter().map(|&v| (v as f64 - mb).powi(2)).sum();
            let delta = mb - self.mean[c];
            let n = self.n + nb;
            self.mean[c] += delta * nb / n;
            self.m2[c] += m2b + delta * delta * self.n * nb / n;
        }
        self.n += nb;
    }

    fn finish(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mean.clone(),
            std: self.m2.iter().map(|m| (m / self.n).max(0.0).sqrt()).collect(),
        }
    }
}

/// Counts full passes over a dataset.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicUsize);

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn tick(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// Pooled statistics at every capture point over all samples of all batches.
pub fn compute_stats(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    batches: &[ArrayView2<f32>],
) -> Result<ActivationStats> {
    let enc = Encoder::bind(arch, encoder)?;
    if batches.iter().all(|b| b.nrows() == 0) {
        return Err(Error::Empty("statistics data".into()));
    }
    let mut acc: Vec<Moments> = (0..enc.num_modules())
        .map(|k| Moments::new(enc.module_width(k)))
        .collect();
    for batch in batches {
        for start in (0..batch.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(batch.nrows());
            enc.run_with(batch.slice(ndarray::s![start..end, ..]), |k, a| {
                acc[k].add(a.view());
                Ok(())
            })?;
        }
    }
    Ok(ActivationStats {
        modules: (0..enc.num_modules())
            .map(|k| (enc.module_name(k), acc[k].finish()))
            .collect(),
    })
}

/// Per-module affine correction with target moments and the merged model's
/// running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TactBundle {
    pub task_id: String,
    pub target: ActivationStats,
    pub running: ActivationStats,
    pub epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    task_id: String,
    epsilon: f64,
    modules: Vec<String>,
}

impl TactBundle {
    /// Correction that leaves every activation unchanged.
    pub fn identity(arch: &ArchitectureDescriptor) -> Self {
        let stats = ActivationStats {
            modules: arch
                .blocks()
                .iter()
                .map(|b| {
                    (
                        b.name(),
                        ChannelStats {
                            mean: vec![0.0; b.out_dim],
                            std: vec![1.0; b.out_dim],
                        },
                    )
                })
                .collect(),
        };
        TactBundle {
            task_id: String::new(),
            target: stats.clone(),
            running: stats,
            epsilon: 0.0,
        }
    }

    /// Per-channel `(scale, shift)` such that `y = a·scale + shift`.
    fn affine(&self, module: &str, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (t, r) = match (self.target.modules.get(module), self.running.modules.get(module)) {
            (Some(t), Some(r)) => (t, r),
            _ => return Err(Error::Shape(format!("correction has no entry for `{module}`"))),
        };
        if t.width() != width || r.width() != width {
            return Err(Error::Shape(format!(
                "correction for `{module}` has width {}/{}, module has {width}",
                t.width(),
                r.width()
            )));
        }
        let scale: Vec<f64> = (0..width)
            .map(|c| t.std[c] / (r.std[c] * r.std[c] + self.epsilon).sqrt())
            .collect();
        let shift = (0..width).map(|c| t.mean[c] - scale[c] * r.mean[c]).collect();
        Ok((scale, shift))
    }

    fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (name, t) in &self.target.modules {
            let r = &self.running.modules[name];
            for (suffix, v) in [
                ("target_mean", &t.mean),
                ("target_std", &t.std),
                ("running_mean", &r.mean),
                ("running_std", &r.std),
            ] {
                out.push(Entry {
                    name: format!("{name}.{suffix}"),
                    shape: vec![v.len()],
                    payload: Payload::F32(v.iter().map(|&x| x as f32).collect()),
                });
            }
        }
        out
    }

    /// Container bytes holding the four vectors of every module.
    pub fn encode(&self, arch_id: &str) -> Vec<u8> {
        encode_container(arch_id, &self.entries())
    }

    fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&BundleManifest {
            task_id: self.task_id.clone(),
            epsilon: self.epsilon,
            modules: self.target.modules.keys().cloned().collect(),
        })
        .expect("plain struct")
    }

    /// Writes `{stem}.mfwt` and `{stem}.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, arch_id: &str) -> Result<()> {
        write_bytes(&dir.join(format!("{stem}.mfwt")), &self.encode(arch_id))?;
        write_bytes(&dir.join(format!("{stem}.json")), self.manifest_json().as_bytes())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<TactBundle> {
        let manifest: BundleManifest =
            serde_json::from_slice(&read_bytes(&dir.join(format!("{stem}.json")))?)?;
        let (_, entries) = decode_container(&read_bytes(&dir.join(format!("{stem}.mfwt")))?, &["f32"])?;
        let mut vectors: IndexMap<String, Vec<f64>> = entries
            .into_iter()
            .map(|e| match e.payload {
                Payload::F32(v) => (e.name, v.into_iter().map(f64::from).collect()),
                Payload::Bits(_) => unreachable!("only f32 accepted"),
            })
            .collect();
        let mut take = |name: &str| {
            vectors
                .swap_remove(name)
                .ok_or_else(|| Error::Config(format!("bundle is missing `{name}`")))
        };
        let (mut target, mut running) = (ActivationStats::default(), ActivationStats::default());
        for m in &manifest.modules {
            target.modules.insert(
                m.clone(),
                ChannelStats {
                    mean: take(&format!("{m}.target_mean"))?,
                    std: take(&format!("{m}.target_std"))?,
                },
            );
            running.modules.insert(
                m.clone(),
                ChannelStats {
                    mean: take(&format!("{m}.running_mean"))?,
                    std: take(&format!("{m}.running_std"))?,
                },
            );
        }
        Ok(TactBundle {
            task_id: manifest.task_id,
            target,
            running,
            epsilon: manifest.epsilon,
        })
    }
}

fn apply_affine(a: &mut Array2<f32>, scale: &[f64], shift: &[f64]) {
    for mut row in a.rows_mut() {
        for ((v, &s), &b) in row.iter_mut().zip(scale).zip(shift) {
            *v = (*v as f64 * s + b) as f32;
        }
    }
}

/// Encoder with the correction applied after every capture point.
struct Corrected<'a> {
    enc: Encoder<'a>,
    affine: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> Corrected<'a> {
    fn new(arch: &ArchitectureDescriptor, encoder: &'a WeightSet, bundle: &TactBundle) -> Result<Self> {
        let enc = Encoder::bind(arch, encoder)?;
        let affine = (0..enc.num_modules())
            .map(|k| bundle.affine(&enc.module_name(k), enc.module_width(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corrected { enc, affine })
    }

    fn run_with(
        &self,
        x: ArrayView2<f32>,
        mut hook: impl FnMut(usize, &Array2<f32>),
    ) -> Result<Array2<f32>> {
        self.enc.run_with(x, |k, a| {
            let (scale, shift) = &self.affine[k];
            apply_affine(a, scale, shift);
            hook(k, a);
            Ok(())
        })
    }
}

/// Logits of the merged model with the bundle's per-module correction applied.
pub fn corrected_forward(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    head: &WeightSet,
    bundle: &TactBundle,
    x: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    let corrected = Corrected::new(arch, encoder, bundle)?;
    let head = Head::bind(arch, head)?;
    let h = corrected.run_with(x, |_, _| {})?;
    Ok(head.logits(h.view()))
}

/// Corrected activation of every module, taken after the correction and before
/// the nonlinearity.
pub fn corrected_activations(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    bundle: &TactBundle,
    x: ArrayView2<f32>,
) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::new();
    Corrected::new(arch, encoder, bundle)?.run_with(x, |_, a| out.push(a.clone()))?;
    Ok(out)
}

/// Moments of one activation matrix.
pub fn channel_stats(a: ArrayView2<f32>) -> ChannelStats {
    let mut m = Moments::new(a.ncols());
    m.add(a);
    m.finish()
}

/// Running statistics of `encoder` over `data`, estimated module by module so
/// that module `k` sees the corrections of modules `0..k` already applied.
/// Reads the data once.
fn sequential_running(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    target: &ActivationStats,
    epsilon: f64,
    data: ArrayView2<f32>,
) -> Result<ActivationStats> {
    let enc = Encoder::bind(arch, encoder)?;
    enc.check_input(&data)?;
    let mut h = data.to_owned();
    let mut running = ActivationStats::default();
    for k in 0..enc.num_modules() {
        let name = enc.module_name(k);
        let mut a = enc.module_pre(k, h.view());
        let mut m = Moments::new(a.ncols());
        m.add(a.view());
        let r = m.finish();
        let partial = TactBundle {
            task_id: String::new(),
            target: ActivationStats {
                modules: [(name.clone(), target_for(target, &name)?.clone())].into_iter().collect(),
            },
            running: ActivationStats {
                modules: [(name.clone(), r.clone())].into_iter().collect(),
            },
            epsilon,
        };
        let (scale, shift) = partial.affine(&name, a.ncols())?;
        apply_affine(&mut a, &scale, &shift);
        running.modules.insert(name, r);
        h = enc.module_post(k, a);
    }
    Ok(running)
}

fn target_for<'s>(target: &'s ActivationStats, name: &str) -> Result<&'s ChannelStats> {
    target
        .modules
        .get(name)
        .ok_or_else(|| Error::Shape(format!("target statistics miss module `{name}`")))
}

/// TACT for one task: expert statistics on the task's training data become the
/// target, and the merged model's running statistics are estimated on the
/// same data with upstream corrections active. Performs two dataset passes.
pub fn tact_correct_counted(
    arch: &ArchitectureDescriptor,
    merged: &WeightSet,
    expert: &ExpertRecord,
    data: &LabeledBatch,
    epsilon: f64,
    counter: &PassCounter,
) -> Result<TactBundle> {
    if data.is_empty() {
        return Err(Error::Empty("TACT statistics data".into()));
    }
    merged.check_compatible(&expert.encoder)?;
    let target = compute_stats(arch, &expert.encoder, &[data.inputs.view()])?;
    counter.tick();
    let running = sequential_running(arch, merged, &target, epsilon, data.inputs.view())?;
    counter.tick();
    Ok(TactBundle {
        task_id: expert.task_id.clone(),
        target,
        running,
        epsilon,
    })
}

pub fn tact_correct(
    arch: &ArchitectureDescriptor,
    merged: &WeightSet,
    expert: &ExpertRecord,
    data: &LabeledBatch,
    epsilon: f64,
) -> Result<TactBundle> {
    tact_correct_counted(arch, merged, expert, data, epsilon, &PassCounter::new())
}

/// Interpolation repair: target moments are the `(1 − α, α)` combination of
/// the endpoints' moments, running moments come from the interpolated model.
pub fn repair_global(
    arch: &ArchitectureDescriptor,
    interpolated: &WeightSet,
    endpoints: (&WeightSet, &WeightSet),
    alpha: f64,
    data: &LabeledBatch,
    epsilon: f64,
) -> Result<TactBundle> {
    if data.is_empty() {
        return Err(Error::Empty("repair data".into()));
    }
    let s1 = compute_stats(arch, endpoints.0, &[data.inputs.view()])?;
    let s2 = compute_stats(arch, endpoints.1, &[data.inputs.view()])?;
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| (1.0 - alpha) * x + alpha * y).collect()
    };
    let target = ActivationStats {
        modules: s1
            .modules
            .iter()
            .map(|(name, a)| {
                let b = &s2.modules[name];
                (
                    name.clone(),
                    ChannelStats {
                        mean: mix(&a.mean, &b.mean),
                        std: mix(&a.std, &b.std),
                    },
                )
            })
            .collect(),
    };
    let running = sequential_running(arch, interpolated, &target, epsilon, data.inputs.view())?;
    Ok(TactBundle {
        task_id: "repair".into(),
        target,
        running,
        epsilon,
    })
}

/// Per-layer comparison of a merged model's activations with an expert's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub module: String,
    /// Mean over samples of the ℓ2 norm of the activation difference.
    pub l2_distance: f64,
    /// Mean channel variance of the merged model over that of the expert;
    /// `+∞` when the expert's variance is zero.
    pub variance_ratio: f64,
}

pub fn stats_diagnostics(
    arch: &ArchitectureDescriptor,
    merged: &WeightSet,
    expert: &WeightSet,
    bundle: Option<&TactBundle>,
    x: ArrayView2<f32>,
) -> Result<Vec<LayerDiagnostic>> {
    merged.check_compatible(expert)?;
    let expert_acts = crate::network::capture_activations(arch, expert, x)?;
    let mut merged_acts = Vec::with_capacity(expert_acts.len());
    match bundle {
        Some(b) => {
            Corrected::new(arch, merged, b)?.run_with(x, |_, a| merged_acts.push(a.clone()))?;
        }
        None => merged_acts = crate::network::capture_activations(arch, merged, x)?,
    }
    let names = arch.module_names();
    Ok(names
        .into_iter()
        .zip(merged_acts.iter().zip(&expert_acts))
        .map(|(module, (m, e))| {
            let n = m.nrows().max(1) as f64;
            let l2_distance = m
                .rows()
                .into_iter()
                .zip(e.rows())
                .map(|(r, s)| {
                    r.iter()
                        .zip(s)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / n;
            let mean_var = |a: &Array2<f32>| {
                let mut mo = Moments::new(a.ncols());
                mo.add(a.view());
                let s = mo.finish();
                s.std.iter().map(|v| v * v).sum::<f64>() / s.width().max(1) as f64
            };
            let (vm, ve) = (mean_var(m), mean_var(e));
            let variance_ratio = if ve == 0.0 { f64::INFINITY } else { vm / ve };
            LayerDiagnostic {
                module,
                l2_distance,
                variance_ratio,
            }
        })
        .collect())
}
