use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureDescriptor, Block, HEAD_BIAS, HEAD_WEIGHT};
use crate::checkpoint::{Tensor, WeightSet};
use crate::datasets::LabeledBatch;
use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;
const EVAL_CHUNK: usize = 1024;

/// Encoder plus classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: WeightSet,
    pub head: WeightSet,
}

/// Fine-tuned task expert: the encoder and its separately kept classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRecord {
    pub encoder: WeightSet,
    pub head: WeightSet,
    pub task_id: String,
    pub foundation_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

fn view2<'a>(t: &'a Tensor, rows: usize, cols: usize, name: &str) -> Result<ArrayView2<'a, f32>> {
    if t.shape() != [rows, cols] {
        return Err(Error::Shape(format!(
            "`{name}` has shape {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(ArrayView2::from_shape((rows, cols), t.data()).expect("shape checked"))
}

fn view1<'a>(t: &'a Tensor, n: usize, name: &str) -> Result<ArrayView1<'a, f32>> {
    if t.shape() != [n] {
        return Err(Error::Shape(format!(
            "`{name}` has shape {:?}, expected [{n}]",
            t.shape()
        )));
    }
    Ok(ArrayView1::from(t.data()))
}

pub(crate) struct BoundBlock<'a> {
    pub(crate) spec: Block,
    pub(crate) w: ArrayView2<'a, f32>,
    pub(crate) b: ArrayView1<'a, f32>,
    pub(crate) norm: Option<(ArrayView1<'a, f32>, ArrayView1<'a, f32>)>,
}

/// Encoder weights bound to an architecture, shape-checked once.
pub struct Encoder<'a> {
    pub(crate) blocks: Vec<BoundBlock<'a>>,
    in_dim: usize,
}

impl<'a> Encoder<'a> {
    pub fn bind(arch: &ArchitectureDescriptor, ws: &'a WeightSet) -> Result<Self> {
        let blocks = arch
            .blocks()
            .into_iter()
            .map(|spec| {
                let w = view2(ws.require(&spec.weight())?, spec.in_dim, spec.out_dim, &spec.weight())?;
                let b = view1(ws.require(&spec.bias())?, spec.out_dim, &spec.bias())?;
                let norm = if spec.norm {
                    Some((
                        view1(ws.require(&spec.scale())?, spec.out_dim, &spec.scale())?,
                        view1(ws.require(&spec.shift())?, spec.out_dim, &spec.shift())?,
                    ))
                } else {
                    None
                };
                Ok(BoundBlock { spec, w, b, norm })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            blocks,
            in_dim: arch.in_dim(),
        })
    }

    pub fn num_modules(&self) -> usize {
        self.blocks.len()
    }

    pub fn module_width(&self, k: usize) -> usize {
        self.blocks[k].spec.out_dim
    }

    pub fn module_name(&self, k: usize) -> String {
        self.blocks[k].spec.name()
    }

    pub fn check_input(&self, x: &ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "input has {} features, architecture expects {}",
                x.ncols(),
                self.in_dim
            )));
        }
        Ok(())
    }

    /// Dense layer plus optional layer norm: the activation at the capture point.
    pub fn module_pre(&self, k: usize, x: ArrayView2<f32>) -> Array2<f32> {
        let blk = &self.blocks[k];
        let mut u = x.dot(&blk.w);
        u += &blk.b;
        if let Some((scale, shift)) = &blk.norm {
            layer_norm_inplace(&mut u, scale, shift);
        }
        u
    }

    /// Nonlinearity that follows the capture point.
    pub fn module_post(&self, k: usize, mut a: Array2<f32>) -> Array2<f32> {
        if self.blocks[k].spec.relu {
            a.mapv_inplace(|v| v.max(0.0));
        }
        a
    }

    /// Full encoder pass; `hook` sees (and may rewrite) each capture-point activation.
    pub fn run_with(
        &self,
        x: ArrayView2<f32>,
        mut hook: impl FnMut(usize, &mut Array2<f32>) -> Result<()>,
    ) -> Result<Array2<f32>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for k in 0..self.blocks.len() {
            let mut a = self.module_pre(k, h.view());
            hook(k, &mut a)?;
            h = self.module_post(k, a);
        }
        Ok(h)
    }

    /// Penultimate representation (input to the head).
    pub fn features(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.run_with(x, |_, _| Ok(()))
    }
}

fn layer_norm_inplace(u: &mut Array2<f32>, scale: &ArrayView1<f32>, shift: &ArrayView1<f32>) {
    let n = u.ncols() as f32;
    for mut row in u.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(scale).zip(shift) {
            *v = (*v - mean) * inv * g + b;
        }
    }
}

/// Classifier head bound to its weights. The class count comes from the head tensor.
pub struct Head<'a> {
    w: ArrayView2<'a, f32>,
    b: ArrayView1<'a, f32>,
}

impl<'a> Head<'a> {
    pub fn bind(arch: &ArchitectureDescriptor, ws: &'a WeightSet) -> Result<Self> {
        let wt = ws.require(HEAD_WEIGHT)?;
        let [rows, cols] = wt.shape() else {
            return Err(Error::Shape(format!("`{HEAD_WEIGHT}` must be 2-d")));
        };
        if *rows != arch.feature_dim() {
            return Err(Error::Shape(format!(
                "head expects {rows} features, encoder produces {}",
                arch.feature_dim()
            )));
        }
        let w = view2(wt, *rows, *cols, HEAD_WEIGHT)?;
        let b = view1(ws.require(HEAD_BIAS)?, *cols, HEAD_BIAS)?;
        Ok(Head { w, b })
    }

    pub fn n_classes(&self) -> usize {
        self.w.ncols()
    }

    pub fn logits(&self, features: ArrayView2<f32>) -> Array2<f32> {
        let mut z = features.dot(&self.w);
        z += &self.b;
        z
    }
}

pub fn forward(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    head: &WeightSet,
    x: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    let enc = Encoder::bind(arch, encoder)?;
    let head = Head::bind(arch, head)?;
    Ok(head.logits(enc.features(x)?.view()))
}

/// One activation tensor per parameterized module, in layer order, taken after
/// the module's layer norm and before its nonlinearity.
pub fn capture_activations(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    x: ArrayView2<f32>,
) -> Result<Vec<Array2<f32>>> {
    let enc = Encoder::bind(arch, encoder)?;
    let mut out = Vec::with_capacity(enc.num_modules());
    enc.run_with(x, |_, a| {
        out.push(a.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Logits from the last captured activation: apply its trailing nonlinearity, then the head.
pub fn logits_from_last_capture(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    head: &WeightSet,
    last: Array2<f32>,
) -> Result<Array2<f32>> {
    let enc = Encoder::bind(arch, encoder)?;
    let head = Head::bind(arch, head)?;
    let h = enc.module_post(enc.num_modules() - 1, last);
    Ok(head.logits(h.view()))
}

/// Per-sample softmax cross-entropy in f64.
pub fn cross_entropy(logits: ArrayView1<f32>, label: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label] as f64
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: ArrayView1<f32>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean loss of an arbitrary logit function over a dataset.
pub fn evaluate_with(
    data: &LabeledBatch,
    mut logits_fn: impl FnMut(ArrayView2<f32>) -> Result<Array2<f32>>,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for (x, labels) in data.chunks(EVAL_CHUNK) {
        let z = logits_fn(x)?;
        for (row, &label) in z.axis_iter(Axis(0)).zip(labels) {
            if label >= row.len() {
                return Err(Error::Shape(format!(
                    "label {label} out of range for {} classes",
                    row.len()
                )));
            }
            if argmax(row) == label {
                correct += 1;
            }
            loss += cross_entropy(row, label);
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

pub fn evaluate(
    arch: &ArchitectureDescriptor,
    encoder: &WeightSet,
    head: &WeightSet,
    data: &LabeledBatch,
) -> Result<EvalResult> {
    let enc = Encoder::bind(arch, encoder)?;
    let head = Head::bind(arch, head)?;
    evaluate_with(data, |x| Ok(head.logits(enc.features(x)?.view())))
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

/// Uniform ±sqrt(6 / (in + out)) dense weights, zero biases, unit norm scale.
pub fn init_encoder(arch: &ArchitectureDescriptor, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightSet::new(arch.id.clone());
    for b in arch.blocks() {
        ws.insert(b.weight(), glorot(&mut rng, b.in_dim, b.out_dim)).unwrap();
        ws.insert(b.bias(), Tensor::zeros(vec![b.out_dim])).unwrap();
        if b.norm {
            ws.insert(b.scale(), Tensor::filled(vec![b.out_dim], 1.0)).unwrap();
            ws.insert(b.shift(), Tensor::zeros(vec![b.out_dim])).unwrap();
        }
    }
    ws
}

pub fn init_head(arch: &ArchitectureDescriptor, n_classes: usize, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightSet::new(arch.id.clone());
    ws.insert(HEAD_WEIGHT, glorot(&mut rng, arch.feature_dim(), n_classes)).unwrap();
    ws.insert(HEAD_BIAS, Tensor::zeros(vec![n_classes])).unwrap();
    ws
}

pub fn init_model(arch: &ArchitectureDescriptor, n_classes: usize, seed: u64) -> Model {
    Model {
        encoder: init_encoder(arch, seed),
        head: init_head(arch, n_classes, seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}
