//! Merging operators: weight averaging, task arithmetic, TIES, TALL masks, and
//! non-local merging across two foundations.
//!
//! Task vectors are held in f64 and every operator accumulates in f64 before
//! rounding to f32 once, so `init + τ` reproduces the expert bitwise and results
//! do not depend on the order of the expert list beyond f64 rounding.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::align::{apply_permutation, weight_matching, PermutationMap};
use crate::checkpoint::{
    decode_container, encode_container, read_bytes, save_weights, load_weights, sha256_hex,
    weights_hash, write_bytes, Entry, Payload, Tensor, WeightSet,
};
use crate::error::{Error, Result};
use crate::network::{ArchitectureDescriptor, ExpertRecord};

/// Sweep cap used by `nonlocal_merge` when aligning the foundations.
pub const ALIGN_MAX_SWEEPS: usize = 100;

/// One tensor of an f64 delta.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `τ_t = θ_t − θ_init` over encoder tensors, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub delta: IndexMap<String, DeltaTensor>,
}

impl TaskVector {
    pub fn norm(&self) -> f64 {
        self.delta
            .values()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.delta.values().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened view in tensor order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.delta.values().flat_map(|t| t.data.iter().copied())
    }

    /// Rounded to f32, for storage or inspection.
    pub fn to_weights(&self, arch_id: &str) -> WeightSet {
        let mut ws = WeightSet::new(arch_id);
        for (name, t) in &self.delta {
            let data = t.data.iter().map(|&v| v as f32).collect();
            ws.insert(name.clone(), Tensor::new(t.shape.clone(), data).expect("valid shape"))
                .expect("unique names");
        }
        ws
    }

    /// Build from flat values laid out like `template`.
    fn with_values(template: &TaskVector, task_id: &str, values: Vec<f64>) -> TaskVector {
        let mut it = values.into_iter();
        let delta = template
            .delta
            .iter()
            .map(|(name, t)| {
                let data = it.by_ref().take(t.data.len()).collect();
                (
                    name.clone(),
                    DeltaTensor {
                        shape: t.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        TaskVector {
            task_id: task_id.to_string(),
            delta,
        }
    }

    fn check_against(&self, init: &WeightSet) -> Result<()> {
        for (name, t) in init.iter() {
            match self.delta.get(name) {
                None => return Err(Error::incompatible(name, "missing from task vector")),
                Some(d) if d.shape != t.shape() => {
                    return Err(Error::incompatible(
                        name,
                        format!("shape {:?} vs {:?}", d.shape, t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.delta.keys().find(|k| !init.contains(k)) {
            return Err(Error::incompatible(extra, "missing from initialization"));
        }
        Ok(())
    }
}

fn check_all(init: &WeightSet, tvs: &[TaskVector]) -> Result<()> {
    if tvs.is_empty() {
        return Err(Error::Empty("task vector list".into()));
    }
    tvs.iter().try_for_each(|tv| tv.check_against(init))
}

/// Difference between an expert's encoder and the initialization; the head is excluded.
pub fn task_vector(expert: &ExpertRecord, init: &WeightSet) -> Result<TaskVector> {
    expert.encoder.check_compatible(init)?;
    let delta = init
        .iter()
        .map(|(name, i)| {
            let e = expert.encoder.get(name).expect("checked compatible");
            let data = e
                .data()
                .iter()
                .zip(i.data())
                .map(|(&x, &y)| x as f64 - y as f64)
                .collect();
            (
                name.to_string(),
                DeltaTensor {
                    shape: i.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    Ok(TaskVector {
        task_id: expert.task_id.clone(),
        delta,
    })
}

/// `init + delta`, rounded to f32 once per coordinate.
fn add_delta(init: &WeightSet, delta: &TaskVector) -> WeightSet {
    let mut out = init.clone();
    for (name, t) in out.iter_mut() {
        let d = &delta.delta[name];
        for (w, &dv) in t.data_mut().iter_mut().zip(&d.data) {
            *w = (*w as f64 + dv) as f32;
        }
    }
    out
}

/// Elementwise mean of compatible weight sets.
pub fn weight_average(sets: &[WeightSet]) -> Result<WeightSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Empty("weight set list".into()))?;
    for s in &sets[1..] {
        first.check_compatible(s)?;
    }
    let n = sets.len() as f64;
    let mut out = first.clone();
    for (name, t) in out.iter_mut() {
        let mut acc = vec![0.0f64; t.len()];
        for s in sets {
            for (a, &v) in acc.iter_mut().zip(s.get(name).expect("compatible").data()) {
                *a += v as f64;
            }
        }
        for (w, a) in t.data_mut().iter_mut().zip(acc) {
            *w = (a / n) as f32;
        }
    }
    Ok(out)
}

fn ta_delta(tvs: &[TaskVector], lambda: f64) -> TaskVector {
    let n = tvs[0].len();
    let mut acc = vec![0.0f64; n];
    for tv in tvs {
        for (a, v) in acc.iter_mut().zip(tv.values()) {
            *a += v;
        }
    }
    let values = acc.into_iter().map(|v| lambda * v).collect();
    TaskVector::with_values(&tvs[0], "merged", values)
}

/// Keep the `k` largest-magnitude entries (lower index wins ties), zero the rest.
fn trim(values: &[f64], keep_fraction: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((keep_fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return values.to_vec();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_mag = |&a: &usize, &b: &usize| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    idx.select_nth_unstable_by(k - 1, by_mag);
    let mut out = vec![0.0; n];
    for &i in &idx[..k] {
        out[i] = values[i];
    }
    out
}

fn ties_delta(tvs: &[TaskVector], keep_fraction: f64, lambda: f64) -> TaskVector {
    let trimmed: Vec<Vec<f64>> = tvs
        .iter()
        .map(|tv| trim(&tv.values().collect::<Vec<_>>(), keep_fraction))
        .collect();
    let n = trimmed[0].len();
    let mut merged = vec![0.0f64; n];
    for (i, m) in merged.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        if total == 0.0 {
            continue;
        }
        let (mut sum, mut count) = (0.0f64, 0usize);
        for t in &trimmed {
            let v = t[i];
            if v != 0.0 && (v > 0.0) == (total > 0.0) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *m = lambda * sum / count as f64;
        }
    }
    TaskVector::with_values(&tvs[0], "merged", merged)
}

/// `init + λ · Σ_t τ_t`.
pub fn task_arithmetic(init: &WeightSet, tvs: &[TaskVector], lambda: f64) -> Result<WeightSet> {
    check_all(init, tvs)?;
    Ok(add_delta(init, &ta_delta(tvs, lambda)))
}

/// TIES: trim each task vector to its top `keep_fraction` entries by magnitude
/// (globally over the vector), elect a sign per coordinate from the sum of the
/// trimmed values, and average only the entries that carry that sign.
pub fn ties_merge(
    init: &WeightSet,
    tvs: &[TaskVector],
    keep_fraction: f64,
    lambda: f64,
) -> Result<WeightSet> {
    check_keep(keep_fraction)?;
    check_all(init, tvs)?;
    Ok(add_delta(init, &ties_delta(tvs, keep_fraction, lambda)))
}

fn check_keep(keep_fraction: f64) -> Result<()> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keep fraction {keep_fraction} not in (0, 1]")))
    }
}

/// Per-tensor 0/1 indicator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: IndexMap<String, (Vec<usize>, Vec<bool>)>,
}

impl BinaryMask {
    pub fn ones_like(tv: &TaskVector) -> Self {
        BinaryMask {
            bits: tv
                .delta
                .iter()
                .map(|(k, t)| (k.clone(), (t.shape.clone(), vec![true; t.data.len()])))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.values().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of ones.
    pub fn density(&self) -> f64 {
        let ones = self.bits.values().flat_map(|(_, b)| b).filter(|&&b| b).count();
        ones as f64 / self.len().max(1) as f64
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        let mut out = self.clone();
        for (name, (shape, bits)) in out.bits.iter_mut() {
            let (oshape, obits) = other
                .bits
                .get(name)
                .ok_or_else(|| Error::incompatible(name, "missing from mask"))?;
            if oshape != shape {
                return Err(Error::incompatible(name, "mask shape mismatch"));
            }
            for (b, &o) in bits.iter_mut().zip(obits) {
                *b &= o;
            }
        }
        Ok(out)
    }

    fn entries(&self) -> Vec<Entry> {
        self.bits
            .iter()
            .map(|(name, (shape, bits))| Entry {
                name: name.clone(),
                shape: shape.clone(),
                payload: Payload::Bits(bits.clone()),
            })
            .collect()
    }

    pub fn encode(&self, arch_id: &str) -> Vec<u8> {
        encode_container(arch_id, &self.entries())
    }

    pub fn decode(bytes: &[u8]) -> Result<BinaryMask> {
        let (_, entries) = decode_container(bytes, &["bit"])?;
        let bits = entries
            .into_iter()
            .map(|e| match e.payload {
                Payload::Bits(b) => (e.name, (e.shape, b)),
                Payload::F32(_) => unreachable!("only bit accepted"),
            })
            .collect();
        Ok(BinaryMask { bits })
    }
}

/// `m_t = 1{|τ_t| ≥ |τ_MTL − τ_t| · λ_t}`.
pub fn tall_mask(tv: &TaskVector, merged_tv: &TaskVector, lambda_t: f64) -> Result<BinaryMask> {
    let mut bits = IndexMap::new();
    for (name, t) in &tv.delta {
        let m = merged_tv
            .delta
            .get(name)
            .ok_or_else(|| Error::incompatible(name, "missing from merged task vector"))?;
        if m.shape != t.shape {
            return Err(Error::incompatible(name, "shape mismatch with merged task vector"));
        }
        let b = t
            .data
            .iter()
            .zip(&m.data)
            .map(|(&x, &y)| x.abs() >= (y - x).abs() * lambda_t)
            .collect();
        bits.insert(name.clone(), (t.shape.clone(), b));
    }
    if merged_tv.delta.len() != tv.delta.len() {
        return Err(Error::incompatible("<merged>", "tensor sets differ"));
    }
    Ok(BinaryMask { bits })
}

/// `init + m ⊙ τ_merged`. Masked-in coordinates round exactly as the shared
/// merged model does, so an all-ones mask reproduces it bitwise.
pub fn tall_reconstruct(
    init: &WeightSet,
    merged_tv: &TaskVector,
    mask: &BinaryMask,
) -> Result<WeightSet> {
    merged_tv.check_against(init)?;
    let mut out = init.clone();
    for (name, t) in out.iter_mut() {
        let (shape, bits) = mask
            .bits
            .get(name)
            .ok_or_else(|| Error::incompatible(name, "missing from mask"))?;
        if shape.as_slice() != t.shape() {
            return Err(Error::incompatible(name, "mask shape mismatch"));
        }
        let d = &merged_tv.delta[name];
        for ((w, &dv), &keep) in t.data_mut().iter_mut().zip(&d.data).zip(bits) {
            if keep {
                *w = (*w as f64 + dv) as f32;
            }
        }
    }
    Ok(out)
}

/// Take `shared` where the mask is set and `init` elsewhere.
fn select(init: &WeightSet, shared: &WeightSet, mask: &BinaryMask) -> Result<WeightSet> {
    let mut out = init.clone();
    for (name, t) in out.iter_mut() {
        let (_, bits) = mask
            .bits
            .get(name)
            .ok_or_else(|| Error::incompatible(name, "missing from mask"))?;
        let s = shared.get(name).expect("compatible");
        for ((w, &sv), &keep) in t.data_mut().iter_mut().zip(s.data()).zip(bits) {
            if keep {
                *w = sv;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    #[default]
    TaskArithmetic,
    Ties,
    TallTa,
    TallTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::TallTa,
        MergeMethod::TallTies,
    ];

    pub fn is_tall(self) -> bool {
        matches!(self, MergeMethod::TallTa | MergeMethod::TallTies)
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::TallTa => "tall_ta",
            MergeMethod::TallTies => "tall_ties",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub lambda: f64,
    pub ties_keep_fraction: f64,
    /// λ_t per task id, used by the TALL methods.
    pub tall_lambda: IndexMap<String, f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            lambda: 1.0,
            ties_keep_fraction: 0.2,
            tall_lambda: IndexMap::new(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method != MergeMethod::Average && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive for {}, got {}",
                self.method.name(),
                self.lambda
            )));
        }
        check_keep(self.ties_keep_fraction)
    }

    fn tall_lambda_for(&self, task_id: &str) -> Result<f64> {
        self.tall_lambda
            .get(task_id)
            .copied()
            .ok_or_else(|| Error::Config(format!("no tall_lambda for task `{task_id}`")))
    }
}

/// Result of a merge: the shared encoder, the initialization it was built on,
/// the experts' heads and, for TALL methods, one mask per task.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedBundle {
    pub config: MergeConfig,
    pub shared: WeightSet,
    pub init: WeightSet,
    pub task_ids: Vec<String>,
    pub heads: IndexMap<String, WeightSet>,
    pub per_task_masks: Option<IndexMap<String, BinaryMask>>,
}

impl MergedBundle {
    /// Encoder used for `task_id`: the per-task reconstruction under TALL, the
    /// shared encoder otherwise.
    pub fn encoder_for(&self, task_id: &str) -> Result<WeightSet> {
        if !self.task_ids.iter().any(|t| t == task_id) {
            return Err(Error::Config(format!("task `{task_id}` not in bundle")));
        }
        match &self.per_task_masks {
            Some(masks) => select(&self.init, &self.shared, &masks[task_id]),
            None => Ok(self.shared.clone()),
        }
    }

    pub fn head(&self, task_id: &str) -> Result<&WeightSet> {
        self.heads
            .get(task_id)
            .ok_or_else(|| Error::Config(format!("no head for task `{task_id}`")))
    }

    /// Writes `shared.mfwt`, `init.mfwt`, `head_{i}.mfwt`, `mask_{i}.mfwt` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = IndexMap::new();
        save_weights(&self.shared, dir.join("shared.mfwt"))?;
        files.insert("shared.mfwt".to_string(), weights_hash(&self.shared));
        save_weights(&self.init, dir.join("init.mfwt"))?;
        files.insert("init.mfwt".to_string(), weights_hash(&self.init));
        let mut tasks = Vec::new();
        for (i, t) in self.task_ids.iter().enumerate() {
            let head_file = format!("head_{i}.mfwt");
            let head = self.head(t)?;
            save_weights(head, dir.join(&head_file))?;
            files.insert(head_file.clone(), weights_hash(head));
            let mask_file = match &self.per_task_masks {
                Some(masks) => {
                    let name = format!("mask_{i}.mfwt");
                    let bytes = masks[t].encode(self.shared.arch_id());
                    write_bytes(&dir.join(&name), &bytes)?;
                    files.insert(name.clone(), sha256_hex(&bytes));
                    Some(name)
                }
                None => None,
            };
            tasks.push(BundleTask {
                task_id: t.clone(),
                head: head_file,
                mask: mask_file,
            });
        }
        let manifest = BundleManifest {
            config: self.config.clone(),
            shared: "shared.mfwt".into(),
            init: "init.mfwt".into(),
            tasks,
            sha256: files,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        write_bytes(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<MergedBundle> {
        let text = read_bytes(&dir.join("manifest.json"))?;
        let manifest: BundleManifest = serde_json::from_slice(&text)?;
        let shared = load_weights(dir.join(&manifest.shared))?;
        let init = load_weights(dir.join(&manifest.init))?;
        let mut heads = IndexMap::new();
        let mut masks = IndexMap::new();
        for t in &manifest.tasks {
            heads.insert(t.task_id.clone(), load_weights(dir.join(&t.head))?);
            if let Some(m) = &t.mask {
                masks.insert(t.task_id.clone(), BinaryMask::decode(&read_bytes(&dir.join(m))?)?);
            }
        }
        let has_masks = !masks.is_empty();
        if has_masks != manifest.config.method.is_tall() {
            return Err(Error::Config("masks present iff method is tall_*".into()));
        }
        Ok(MergedBundle {
            config: manifest.config,
            shared,
            init,
            task_ids: manifest.tasks.into_iter().map(|t| t.task_id).collect(),
            heads,
            per_task_masks: has_masks.then_some(masks),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleTask {
    task_id: String,
    head: String,
    mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    config: MergeConfig,
    shared: String,
    init: String,
    tasks: Vec<BundleTask>,
    sha256: IndexMap<String, String>,
}

/// Merge experts that share the initialization `init`.
pub fn local_merge(
    init: &WeightSet,
    experts: &[ExpertRecord],
    cfg: &MergeConfig,
) -> Result<MergedBundle> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(Error::Empty("expert list".into()));
    }
    let tvs = experts
        .iter()
        .map(|e| task_vector(e, init))
        .collect::<Result<Vec<_>>>()?;
    let (shared, merged_tv) = match cfg.method {
        MergeMethod::Average => {
            let encoders: Vec<WeightSet> = experts.iter().map(|e| e.encoder.clone()).collect();
            (weight_average(&encoders)?, None)
        }
        MergeMethod::TaskArithmetic | MergeMethod::TallTa => {
            (WeightSet::default(), Some(ta_delta(&tvs, cfg.lambda)))
        }
        MergeMethod::Ties | MergeMethod::TallTies => (
            WeightSet::default(),
            Some(ties_delta(&tvs, cfg.ties_keep_fraction, cfg.lambda)),
        ),
    };
    let shared = match &merged_tv {
        Some(d) => add_delta(init, d),
        None => shared,
    };
    let per_task_masks = if cfg.method.is_tall() {
        let merged_tv = merged_tv.as_ref().expect("tall methods build a merged vector");
        let mut masks = IndexMap::new();
        for tv in &tvs {
            let lt = cfg.tall_lambda_for(&tv.task_id)?;
            masks.insert(tv.task_id.clone(), tall_mask(tv, merged_tv, lt)?);
        }
        Some(masks)
    } else {
        None
    };
    Ok(MergedBundle {
        config: cfg.clone(),
        shared,
        init: init.clone(),
        task_ids: experts.iter().map(|e| e.task_id.clone()).collect(),
        heads: experts
            .iter()
            .map(|e| (e.task_id.clone(), e.head.clone()))
            .collect(),
        per_task_masks,
    })
}

/// A pretrained model experts can be fine-tuned from.
#[derive(Clone, Debug, PartialEq)]
pub struct Foundation {
    pub id: String,
    pub weights: WeightSet,
}

/// Moves experts into the basin of the first foundation: the averaged
/// initialization `(θ0 + π(P*, θ1)) / 2` and experts from the second
/// foundation permuted by `P*` (heads on their input axis).
pub fn localize(
    foundations: &[Foundation],
    experts: &[ExpertRecord],
    arch: &ArchitectureDescriptor,
    pm: &PermutationMap,
) -> Result<(WeightSet, Vec<ExpertRecord>)> {
    let [f0, f1] = foundations else {
        return Err(Error::Config(format!(
            "non-local merging needs exactly two foundations, got {}",
            foundations.len()
        )));
    };
    let counts = [f0, f1].map(|f| experts.iter().filter(|e| e.foundation_id == f.id).count());
    if let Some(e) = experts
        .iter()
        .find(|e| e.foundation_id != f0.id && e.foundation_id != f1.id)
    {
        return Err(Error::UnknownFoundation(e.foundation_id.clone()));
    }
    if counts[0] != counts[1] {
        log::warn!(
            "unequal experts per foundation: {} from `{}`, {} from `{}`",
            counts[0],
            f0.id,
            counts[1],
            f1.id
        );
    }
    let f1_aligned = apply_permutation(&f1.weights, arch, pm)?;
    let init = weight_average(&[f0.weights.clone(), f1_aligned])?;
    let localized = experts
        .iter()
        .map(|e| {
            if e.foundation_id == f1.id && f1.id != f0.id {
                Ok(ExpertRecord {
                    encoder: apply_permutation(&e.encoder, arch, pm)?,
                    head: apply_permutation(&e.head, arch, pm)?,
                    ..e.clone()
                })
            } else {
                Ok(e.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((init, localized))
}

/// Non-local merging: align the two foundations, localize the experts, then
/// merge them locally on the averaged initialization.
pub fn nonlocal_merge(
    foundations: &[Foundation],
    experts: &[ExpertRecord],
    arch: &ArchitectureDescriptor,
    cfg: &MergeConfig,
    seed: u64,
) -> Result<MergedBundle> {
    let [f0, f1] = foundations else {
        return Err(Error::Config(format!(
            "non-local merging needs exactly two foundations, got {}",
            foundations.len()
        )));
    };
    let pm = weight_matching(&f0.weights, &f1.weights, arch, seed, ALIGN_MAX_SWEEPS)?;
    let (init, localized) = localize(foundations, experts, arch, &pm)?;
    local_merge(&init, &localized, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(vals: &[f32]) -> WeightSet {
        let mut w = WeightSet::new("t");
        w.insert("w", Tensor::from_vec(vals.to_vec())).unwrap();
        w
    }

    fn expert(id: &str, vals: &[f32]) -> ExpertRecord {
        ExpertRecord {
            encoder: ws(vals),
            head: WeightSet::new("t"),
            task_id: id.into(),
            foundation_id: "f0".into(),
        }
    }

    fn tv(id: &str, vals: &[f64]) -> TaskVector {
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

    #[test]
    fn task_vector_identities() {
        let init = ws(&[0.1, -2.0, 3.5]);
        let e = expert("a", &[0.3, -1.0, 1e-8]);
        let t = task_vector(&e, &init).unwrap();
        assert!(task_arithmetic(&init, &[t.clone()], 1.0).unwrap().bit_eq(&e.encoder));
        assert!(task_arithmetic(&init, &[t.clone()], 0.0).unwrap().bit_eq(&init));
        let dist = crate::checkpoint::weight_distance(&e.encoder, &init).unwrap();
        assert!((t.norm() - dist).abs() < 1e-12);
        let zero = task_vector(&expert("z", &[0.1, -2.0, 3.5]), &init).unwrap();
        assert!(zero.values().all(|v| v == 0.0));
    }

    #[test]
    fn averaging() {
        assert!(weight_average(&[ws(&[1.5])]).unwrap().bit_eq(&ws(&[1.5])));
        assert!(weight_average(&[ws(&[0.0]), ws(&[2.0])]).unwrap().bit_eq(&ws(&[1.0])));
        assert!(matches!(weight_average(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn arithmetic_example() {
        let init = ws(&[0.0, 0.0]);
        let out = task_arithmetic(&init, &[tv("a", &[1.0, 0.0]), tv("b", &[0.0, 1.0])], 0.5).unwrap();
        assert!(out.bit_eq(&ws(&[0.5, 0.5])));
    }

    #[test]
    fn ties_example() {
        let init = ws(&[0.0, 0.0, 0.0]);
        let tvs = [tv("a", &[2.0, -1.0, 0.1]), tv("b", &[-0.2, -3.0, 0.05])];
        let out = ties_merge(&init, &tvs, 2.0 / 3.0, 1.0).unwrap();
        assert!(out.bit_eq(&ws(&[2.0, -2.0, 0.0])));
        assert!(ties_merge(&init, &tvs, 0.0, 1.0).is_err());
    }

    #[test]
    fn trim_breaks_ties_by_index() {
        assert_eq!(trim(&[1.0, -1.0, 1.0, 0.5], 0.5), vec![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(trim(&[0.0, 0.0], 0.1), vec![0.0, 0.0]);
    }

    #[test]
    fn tall_examples() {
        let t = tv("a", &[1.0, 0.1]);
        let m = tv("m", &[1.5, 1.0]);
        let mask = tall_mask(&t, &m, 1.0).unwrap();
        assert_eq!(mask.bits["w"].1, vec![true, false]);
        assert_eq!(tall_mask(&t, &m, 0.0).unwrap().density(), 1.0);
        assert_eq!(tall_mask(&t, &t, 5.0).unwrap().density(), 1.0);

        let init = ws(&[1.0, 1.0]);
        let ones = BinaryMask::ones_like(&m);
        assert!(tall_reconstruct(&init, &m, &ones).unwrap().bit_eq(&ws(&[2.5, 2.0])));
        let mut zeros = ones.clone();
        zeros.bits["w"].1 = vec![false, false];
        assert!(tall_reconstruct(&init, &m, &zeros).unwrap().bit_eq(&init));
        assert_eq!(mask.and(&mask).unwrap(), mask);
    }

    #[test]
    fn mask_round_trip() {
        let m = tall_mask(&tv("a", &[1.0, 0.1, 3.0]), &tv("m", &[1.5, 1.0, 0.0]), 1.0).unwrap();
        assert_eq!(BinaryMask::decode(&m.encode("t")).unwrap(), m);
    }

    #[test]
    fn bundle_invariants_and_persistence() {
        let init = ws(&[0.0, 0.0, 0.0]);
        let experts = [expert("a", &[1.0, 0.0, -1.0]), expert("b", &[0.0, 2.0, 1.0])];
        let mut cfg = MergeConfig {
            method: MergeMethod::TallTa,
            lambda: 0.5,
            ..Default::default()
        };
        assert!(matches!(local_merge(&init, &experts, &cfg), Err(Error::Config(_))));
        cfg.tall_lambda.insert("a".into(), 0.4);
        cfg.tall_lambda.insert("b".into(), 0.4);
        let b = local_merge(&init, &experts, &cfg).unwrap();
        assert_eq!(b.task_ids, vec!["a", "b"]);
        assert!(b.per_task_masks.is_some());
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(MergedBundle::load(dir.path()).unwrap(), b);

        cfg.method = MergeMethod::Ties;
        assert!(local_merge(&init, &experts, &cfg).unwrap().per_task_masks.is_none());
        cfg.lambda = 0.0;
        assert!(local_merge(&init, &experts, &cfg).is_err());
    }

    #[test]
    fn unknown_foundation_is_rejected() {
        let arch = ArchitectureDescriptor::mlp(2, &[2], 2, false).unwrap();
        let f = |id: &str| Foundation {
            id: id.into(),
            weights: WeightSet::new(arch.id.clone()),
        };
        let mut e = expert("a", &[0.0]);
        e.foundation_id = "elsewhere".into();
        let r = localize(&[f("f0"), f("f1")], &[e], &arch, &PermutationMap::default());
        assert!(matches!(r, Err(Error::UnknownFoundation(_))));
    }
}
