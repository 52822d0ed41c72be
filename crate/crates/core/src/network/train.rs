use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureDescriptor, HEAD_BIAS, HEAD_WEIGHT};
use super::model::{init_head, Encoder, ExpertRecord, Model, LN_EPS};
use crate::checkpoint::{Tensor, WeightSet};
use crate::datasets::{LabeledBatch, TaskDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    CosineDecay,
}

/// SGD-with-momentum settings. Defaults are the fine-tuning settings used for
/// the convolutional experts (8000 steps, 500 warmup, peak lr 0.01, wd 0.001).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 8000,
            warmup_steps: 500,
            peak_lr: 0.01,
            schedule: Schedule::CosineDecay,
            momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Foundation pretraining: lr 0.1, momentum 0.9, batch 512.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            peak_lr: 0.1,
            batch_size: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::Config("batch_size and peak_lr must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine decay reaching 0 at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps + 1).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        match self.schedule {
            Schedule::CosineDecay => self.peak_lr * 0.5 * (1.0 + (PI * progress).cos()),
        }
    }

    /// Same schedule shape over a quarter of the budget (head-only stage).
    fn quarter(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps / 4,
            warmup_steps: self.warmup_steps / 4,
            ..self.clone()
        }
    }
}

trait Trainable: Sized {
    fn zeros_like(&self) -> Self;
    fn slices_mut(&mut self) -> Vec<&mut [f32]>;
    fn slices(&self) -> Vec<&[f32]>;
    /// Mean minibatch loss and its gradient.
    fn loss_and_grad(&self, x: ArrayView2<f32>, labels: &[usize]) -> (f64, Self);
}

struct BlockParams {
    w: Array2<f32>,
    b: Array1<f32>,
    norm: Option<(Array1<f32>, Array1<f32>)>,
    relu: bool,
}

struct HeadParams {
    w: Array2<f32>,
    b: Array1<f32>,
}

struct FullParams {
    blocks: Vec<BlockParams>,
    head: HeadParams,
}

fn arr2(t: &Tensor) -> Array2<f32> {
    let s = t.shape();
    Array2::from_shape_vec((s[0], s[1]), t.data().to_vec()).expect("2-d tensor")
}

fn arr1(t: &Tensor) -> Array1<f32> {
    Array1::from(t.data().to_vec())
}

impl HeadParams {
    fn from_ws(arch: &ArchitectureDescriptor, ws: &WeightSet) -> Result<Self> {
        // Bind once to validate shapes.
        super::model::Head::bind(arch, ws)?;
        Ok(HeadParams {
            w: arr2(ws.require(HEAD_WEIGHT)?),
            b: arr1(ws.require(HEAD_BIAS)?),
        })
    }

    fn to_ws(&self, arch_id: &str) -> WeightSet {
        let mut ws = WeightSet::new(arch_id);
        let (r, c) = self.w.dim();
        ws.insert(HEAD_WEIGHT, Tensor::new(vec![r, c], self.w.iter().copied().collect()).unwrap())
            .unwrap();
        ws.insert(HEAD_BIAS, Tensor::from_vec(self.b.to_vec())).unwrap();
        ws
    }

    fn zeros_like(&self) -> Self {
        HeadParams {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    /// Softmax cross-entropy; returns (mean loss, dL/dlogits, grads).
    fn backward(&self, h: ArrayView2<f32>, labels: &[usize]) -> (f64, Array2<f32>, HeadParams) {
        let mut z = h.dot(&self.w);
        z += &self.b;
        let n = labels.len() as f32;
        let mut loss = 0.0f64;
        for (mut row, &y) in z.axis_iter_mut(Axis(0)).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let zy = (row[y] - max) as f64;
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f32 = row.sum();
            row.mapv_inplace(|v| v / sum);
            loss -= zy - (sum as f64).ln();
            row[y] -= 1.0;
            row.mapv_inplace(|v| v / n);
        }
        let grads = HeadParams {
            w: h.t().dot(&z),
            b: z.sum_axis(Axis(0)),
        };
        (loss / labels.len() as f64, z, grads)
    }
}

impl Trainable for HeadParams {
    fn zeros_like(&self) -> Self {
        HeadParams::zeros_like(self)
    }
    fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
    fn slices(&self) -> Vec<&[f32]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }
    fn loss_and_grad(&self, x: ArrayView2<f32>, labels: &[usize]) -> (f64, Self) {
        let (loss, _, g) = self.backward(x, labels);
        (loss, g)
    }
}

struct BlockCache {
    input: Array2<f32>,
    xhat: Option<Array2<f32>>,
    inv_std: Vec<f32>,
    pre_act: Array2<f32>,
}

impl FullParams {
    fn from_model(arch: &ArchitectureDescriptor, model: &Model) -> Result<Self> {
        let enc = Encoder::bind(arch, &model.encoder)?;
        let blocks = enc
            .blocks
            .iter()
            .map(|b| BlockParams {
                w: b.w.to_owned(),
                b: b.b.to_owned(),
                norm: b.norm.as_ref().map(|(g, s)| (g.to_owned(), s.to_owned())),
                relu: b.spec.relu,
            })
            .collect();
        Ok(FullParams {
            blocks,
            head: HeadParams::from_ws(arch, &model.head)?,
        })
    }

    fn to_model(&self, arch: &ArchitectureDescriptor) -> Model {
        let mut enc = WeightSet::new(arch.id.clone());
        for (spec, p) in arch.blocks().iter().zip(&self.blocks) {
            let (r, c) = p.w.dim();
            enc.insert(spec.weight(), Tensor::new(vec![r, c], p.w.iter().copied().collect()).unwrap())
                .unwrap();
            enc.insert(spec.bias(), Tensor::from_vec(p.b.to_vec())).unwrap();
            if let Some((g, s)) = &p.norm {
                enc.insert(spec.scale(), Tensor::from_vec(g.to_vec())).unwrap();
                enc.insert(spec.shift(), Tensor::from_vec(s.to_vec())).unwrap();
            }
        }
        Model {
            encoder: enc,
            head: self.head.to_ws(&arch.id),
        }
    }
}

impl Trainable for FullParams {
    fn zeros_like(&self) -> Self {
        FullParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w: Array2::zeros(b.w.dim()),
                    b: Array1::zeros(b.b.len()),
                    norm: b
                        .norm
                        .as_ref()
                        .map(|(g, _)| (Array1::zeros(g.len()), Array1::zeros(g.len()))),
                    relu: b.relu,
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.w.as_slice_mut().unwrap());
            out.push(b.b.as_slice_mut().unwrap());
            if let Some((g, s)) = &mut b.norm {
                out.push(g.as_slice_mut().unwrap());
                out.push(s.as_slice_mut().unwrap());
            }
        }
        out.extend(self.head.slices_mut());
        out
    }

    fn slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for b in &self.blocks {
            out.push(b.w.as_slice().unwrap());
            out.push(b.b.as_slice().unwrap());
            if let Some((g, s)) = &b.norm {
                out.push(g.as_slice().unwrap());
                out.push(s.as_slice().unwrap());
            }
        }
        out.extend(self.head.slices());
        out
    }

    fn loss_and_grad(&self, x: ArrayView2<f32>, labels: &[usize]) -> (f64, Self) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_owned();
        for blk in &self.blocks {
            let mut u = h.dot(&blk.w);
            u += &blk.b;
            let (xhat, inv_std, pre_act) = match &blk.norm {
                Some((g, s)) => {
                    let d = u.ncols() as f32;
                    let mut xhat = u;
                    let mut inv_std = Vec::with_capacity(xhat.nrows());
                    for mut row in xhat.rows_mut() {
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        row.mapv_inplace(|v| (v - mean) * inv);
                        inv_std.push(inv);
                    }
                    let mut a = &xhat * g;
                    a += s;
                    (Some(xhat), inv_std, a)
                }
                None => (None, Vec::new(), u),
            };
            let out = if blk.relu {
                pre_act.mapv(|v| v.max(0.0))
            } else {
                pre_act.clone()
            };
            caches.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                xhat,
                inv_std,
                pre_act,
            });
        }

        let (loss, dz, head_grad) = self.head.backward(h.view(), labels);
        let mut grad = self.zeros_like();
        grad.head = head_grad;
        let mut dh = dz.dot(&self.head.w.t());
        for (k, (blk, cache)) in self.blocks.iter().zip(&caches).enumerate().rev() {
            let mut da = dh;
            if blk.relu {
                da.zip_mut_with(&cache.pre_act, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let du = match (&blk.norm, &cache.xhat) {
                (Some((g, _)), Some(xhat)) => {
                    let gn = grad.blocks[k].norm.as_mut().expect("same structure");
                    gn.0 = (&da * xhat).sum_axis(Axis(0));
                    gn.1 = da.sum_axis(Axis(0));
                    let mut dxhat = da * g;
                    let d = dxhat.ncols() as f32;
                    for ((mut row, xrow), &inv) in dxhat
                        .rows_mut()
                        .into_iter()
                        .zip(xhat.rows())
                        .zip(&cache.inv_std)
                    {
                        let m1 = row.sum() / d;
                        let m2 = row.iter().zip(xrow).map(|(a, b)| a * b).sum::<f32>() / d;
                        for (v, &xh) in row.iter_mut().zip(xrow) {
                            *v = inv * (*v - m1 - xh * m2);
                        }
                    }
                    dxhat
                }
                _ => da,
            };
            grad.blocks[k].w = cache.input.t().dot(&du);
            grad.blocks[k].b = du.sum_axis(Axis(0));
            dh = if k > 0 { du.dot(&blk.w.t()) } else { du };
        }
        (loss, grad)
    }
}

struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Sampler { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> &[usize] {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + size];
        self.pos += size;
        out
    }
}

fn run_sgd<P: Trainable>(
    params: &mut P,
    inputs: &Array2<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(());
    }
    if labels.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    let mut velocity = params.zeros_like();
    let mut sampler = Sampler::new(labels.len(), cfg.seed);
    let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let x = inputs.select(Axis(0), idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grad) = params.loss_and_grad(x.view(), &y);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = cfg.lr_at(step) as f32;
        for ((p, v), g) in params
            .slices_mut()
            .into_iter()
            .zip(velocity.slices_mut())
            .zip(grad.slices())
        {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
    Ok(())
}

fn check_labels(data: &LabeledBatch, n_classes: usize) -> Result<()> {
    match data.labels.iter().find(|&&l| l >= n_classes) {
        Some(l) => Err(Error::Shape(format!("label {l} >= head classes {n_classes}"))),
        None => Ok(()),
    }
}

/// Train encoder and head jointly with SGD + momentum on minibatches drawn
/// from a seed-fixed shuffle.
pub fn train(
    arch: &ArchitectureDescriptor,
    init: &Model,
    data: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<Model> {
    let mut params = FullParams::from_model(arch, init)?;
    check_labels(data, params.head.b.len())?;
    if cfg.steps == 0 {
        cfg.validate()?;
        return Ok(init.clone());
    }
    run_sgd(&mut params, &data.inputs, &data.labels, cfg)?;
    let mut out = params.to_model(arch);
    out.encoder.set_arch_id(init.encoder.arch_id());
    out.head.set_arch_id(init.head.arch_id());
    Ok(out)
}

/// Train only the head on frozen-encoder features.
pub fn train_head(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    head_init: &WeightSet,
    data: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<WeightSet> {
    let mut params = HeadParams::from_ws(arch, head_init)?;
    check_labels(data, params.b.len())?;
    if cfg.steps == 0 {
        cfg.validate()?;
        return Ok(head_init.clone());
    }
    let features = Encoder::bind(arch, encoder)?.features(data.inputs.view())?;
    run_sgd(&mut params, &features, &data.labels, cfg)?;
    Ok(params.to_ws(head_init.arch_id()))
}

/// Fresh head trained on a fixed encoder's features.
pub fn linear_probe(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    task: &TaskDataset,
    cfg: &TrainConfig,
    head_seed: u64,
) -> Result<WeightSet> {
    let head = init_head(arch, task.n_classes, head_seed);
    train_head(arch, encoder, &head, &task.train, cfg)
}

/// Classifier-first fine-tuning: a head-only stage of `steps / 4` on the frozen
/// foundation, then joint training of encoder and head for `steps`.
pub fn make_expert(
    arch: &ArchitectureDescriptor,
    foundation: &WeightSet,
    foundation_id: &str,
    head_init_seed: u64,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<ExpertRecord> {
    let head = linear_probe(arch, foundation, task, &cfg.quarter(), head_init_seed)?;
    let model = train(
        arch,
        &Model {
            encoder: foundation.clone(),
            head,
        },
        &task.train,
        cfg,
    )?;
    Ok(ExpertRecord {
        encoder: model.encoder,
        head: model.head,
        task_id: task.task_id.clone(),
        foundation_id: foundation_id.to_string(),
    })
}
