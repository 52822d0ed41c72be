use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    LayerNorm,
    Relu,
    ClassifierHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind,
            in_dim,
            out_dim,
        }
    }
}

/// One axis of one tensor that moves together with a permutation group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorAxis {
    pub tensor: String,
    pub axis: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermGroup {
    pub name: String,
    pub size: usize,
    pub axes: Vec<TensorAxis>,
}

/// A parameterized module: a dense layer, optionally followed by a layer norm
/// and a ReLU. Activations are captured after the norm, before the ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub norm: bool,
    pub relu: bool,
}

impl Block {
    pub fn name(&self) -> String {
        format!("fc{}", self.index)
    }
    pub fn weight(&self) -> String {
        format!("fc{}.weight", self.index)
    }
    pub fn bias(&self) -> String {
        format!("fc{}.bias", self.index)
    }
    pub fn scale(&self) -> String {
        format!("ln{}.scale", self.index)
    }
    pub fn shift(&self) -> String {
        format!("ln{}.shift", self.index)
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Layer sequence plus the permutation-group structure of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub id: String,
    pub layers: Vec<LayerSpec>,
    pub perm_groups: Vec<PermGroup>,
}

impl ArchitectureDescriptor {
    /// Build a descriptor from a layer list, deriving its id and the standard
    /// hidden-unit permutation groups.
    pub fn from_layers(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut arch = ArchitectureDescriptor {
            id: String::new(),
            layers,
            perm_groups: Vec::new(),
        };
        let blocks = arch.parse_blocks()?;
        arch.id = arch_id_for(&arch.layers);
        arch.perm_groups = standard_groups(&blocks);
        arch.validate()?;
        Ok(arch)
    }

    /// `in_dim -> [dense -> (layer_norm) -> relu]* -> classifier_head(n_classes)`.
    pub fn mlp(in_dim: usize, hidden: &[usize], n_classes: usize, layer_norm: bool) -> Result<Self> {
        let mut layers = Vec::new();
        let mut d = in_dim;
        for &h in hidden {
            layers.push(LayerSpec::new(LayerKind::Dense, d, h));
            if layer_norm {
                layers.push(LayerSpec::new(LayerKind::LayerNorm, h, h));
            }
            layers.push(LayerSpec::new(LayerKind::Relu, h, h));
            d = h;
        }
        layers.push(LayerSpec::new(LayerKind::ClassifierHead, d, n_classes));
        Self::from_layers(layers)
    }

    /// The default desk-scale encoder: six 512-wide hidden layers with layer norm.
    pub fn default_desk(in_dim: usize, n_classes: usize) -> Result<Self> {
        Self::mlp(in_dim, &[512; 6], n_classes, true)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    /// Default class count of the head (per-task heads may differ).
    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Width of the representation fed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.in_dim)
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.parse_blocks().expect("validated at construction")
    }

    pub fn module_names(&self) -> Vec<String> {
        self.blocks().iter().map(Block::name).collect()
    }

    /// Encoder tensor names in canonical file order.
    pub fn encoder_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push((b.weight(), vec![b.in_dim, b.out_dim]));
            out.push((b.bias(), vec![b.out_dim]));
            if b.norm {
                out.push((b.scale(), vec![b.out_dim]));
                out.push((b.shift(), vec![b.out_dim]));
            }
        }
        out
    }

    pub fn group(&self, name: &str) -> Option<&PermGroup> {
        self.perm_groups.iter().find(|g| g.name == name)
    }

    /// Group that permutes the representation consumed by the head.
    pub fn last_hidden_group(&self) -> Option<&PermGroup> {
        self.perm_groups
            .iter()
            .find(|g| g.axes.iter().any(|a| a.tensor == HEAD_WEIGHT && a.axis == 0))
    }

    fn parse_blocks(&self) -> Result<Vec<Block>> {
        let err = |m: String| Err(Error::Architecture(m));
        if self.layers.is_empty() {
            return err("no layers".into());
        }
        let mut blocks: Vec<Block> = Vec::new();
        let mut prev_out: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return err(format!("layer {i} has a zero dimension"));
            }
            if let Some(p) = prev_out {
                if p != l.in_dim {
                    return err(format!("layer {i} in_dim {} does not chain from {p}", l.in_dim));
                }
            }
            prev_out = Some(l.out_dim);
            let last = i + 1 == self.layers.len();
            match l.kind {
                LayerKind::Dense => blocks.push(Block {
                    index: blocks.len(),
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    norm: false,
                    relu: false,
                }),
                LayerKind::LayerNorm | LayerKind::Relu => {
                    if l.in_dim != l.out_dim {
                        return err(format!("layer {i} must preserve width"));
                    }
                    let Some(b) = blocks.last_mut() else {
                        return err(format!("layer {i} precedes any dense layer"));
                    };
                    match (l.kind, self.layers[i - 1].kind) {
                        (LayerKind::LayerNorm, LayerKind::Dense) => b.norm = true,
                        (LayerKind::Relu, LayerKind::Dense | LayerKind::LayerNorm) => b.relu = true,
                        _ => return err(format!("layer {i} ({:?}) is misplaced", l.kind)),
                    }
                }
                LayerKind::ClassifierHead => {
                    if !last {
                        return err("classifier_head must be the last layer".into());
                    }
                }
            }
            if last && l.kind != LayerKind::ClassifierHead {
                return err("last layer must be a classifier_head".into());
            }
        }
        if blocks.is_empty() {
            return err("at least one dense layer is required".into());
        }
        Ok(blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.parse_blocks()?;
        let mut owner: HashMap<(&str, usize), &str> = HashMap::new();
        for g in &self.perm_groups {
            for a in &g.axes {
                if owner.insert((a.tensor.as_str(), a.axis), &g.name).is_some() {
                    return Err(Error::Architecture(format!(
                        "{}:{} is claimed by more than one group",
                        a.tensor, a.axis
                    )));
                }
            }
        }
        for b in &blocks {
            let w = b.weight();
            match owner.get(&(w.as_str(), 1)) {
                Some(g) if self.group(g).is_some_and(|g| g.size == b.out_dim) => {}
                Some(g) => {
                    return Err(Error::Architecture(format!(
                        "group {g} size does not match {w} output width {}",
                        b.out_dim
                    )))
                }
                None => {
                    return Err(Error::Architecture(format!(
                        "hidden output axis of {w} has no permutation group"
                    )))
                }
            }
        }
        if owner.contains_key(&("fc0.weight", 0)) || owner.contains_key(&(HEAD_WEIGHT, 1)) {
            return Err(Error::Architecture(
                "input and output axes must not be permuted".into(),
            ));
        }
        Ok(())
    }
}

fn standard_groups(blocks: &[Block]) -> Vec<PermGroup> {
    blocks
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let axis = |tensor: String, axis| TensorAxis { tensor, axis };
            let mut axes = vec![axis(b.weight(), 1), axis(b.bias(), 0)];
            if b.norm {
                axes.push(axis(b.scale(), 0));
                axes.push(axis(b.shift(), 0));
            }
            match blocks.get(k + 1) {
                Some(next) => axes.push(axis(next.weight(), 0)),
                None => axes.push(axis(HEAD_WEIGHT.to_string(), 0)),
            }
            PermGroup {
                name: format!("h{k}"),
                size: b.out_dim,
                axes,
            }
        })
        .collect()
}

/// Architecture tag independent of the head's class count.
fn arch_id_for(layers: &[LayerSpec]) -> String {
    let mut id = format!("in{}", layers[0].in_dim);
    for l in layers {
        match l.kind {
            LayerKind::Dense => write!(id, ".d{}", l.out_dim).unwrap(),
            LayerKind::LayerNorm => id.push_str(".n"),
            LayerKind::Relu => id.push_str(".r"),
            LayerKind::ClassifierHead => id.push_str(".head"),
        }
    }
    id
}
