//! Permutation symmetries: applying hidden-unit permutations consistently and
//! finding them by weight matching.
//!
//! Permutations use gather semantics: along a coupled axis, the permuted tensor
//! satisfies `new[i] = old[perm[i]]`.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayViewD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{weight_distance, Tensor, WeightSet};
use crate::error::{Error, Result};
use crate::network::{ArchitectureDescriptor, PermGroup};

/// One permutation per permutation group, keyed by group name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PermutationMap {
    pub perms: IndexMap<String, Vec<usize>>,
}

impl PermutationMap {
    pub fn identity(arch: &ArchitectureDescriptor) -> Self {
        PermutationMap {
            perms: arch
                .perm_groups
                .iter()
                .map(|g| (g.name.clone(), (0..g.size).collect()))
                .collect(),
        }
    }

    pub fn get(&self, group: &str) -> Option<&[usize]> {
        self.perms.get(group).map(Vec::as_slice)
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .values()
            .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    pub fn inverse(&self) -> Self {
        PermutationMap {
            perms: self
                .perms
                .iter()
                .map(|(k, p)| (k.clone(), invert(p)))
                .collect(),
        }
    }

    /// Checks every entry names a group of `arch` and is a bijection of the right size.
    /// Groups absent from the map are treated as identity.
    pub fn validate(&self, arch: &ArchitectureDescriptor) -> Result<()> {
        for (name, perm) in &self.perms {
            let group = arch
                .group(name)
                .ok_or_else(|| Error::Permutation(format!("unknown permutation group `{name}`")))?;
            if perm.len() != group.size {
                return Err(Error::Permutation(format!(
                    "group `{name}` has size {}, permutation has length {}",
                    group.size,
                    perm.len()
                )));
            }
            if !is_bijection(perm) {
                return Err(Error::Permutation(format!(
                    "group `{name}` entry is not a bijection"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain map")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&j| j < p.len() && !std::mem::replace(&mut seen[j], true))
}

fn gather_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let view = ArrayViewD::from_shape(IxDyn(t.shape()), t.data()).expect("valid tensor");
    let out = view.select(Axis(axis), perm);
    Tensor::new(t.shape().to_vec(), out.iter().copied().collect()).expect("same shape")
}

fn permute_group(ws: &mut WeightSet, group: &PermGroup, perm: &[usize]) -> Result<()> {
    for ta in &group.axes {
        let Some(t) = ws.get(&ta.tensor) else {
            continue;
        };
        if t.shape().get(ta.axis) != Some(&group.size) {
            return Err(Error::Permutation(format!(
                "tensor `{}` axis {} does not have group `{}` size {}",
                ta.tensor, ta.axis, group.name, group.size
            )));
        }
        let permuted = gather_axis(t, ta.axis, perm);
        *ws.get_mut(&ta.tensor).expect("present") = permuted;
    }
    Ok(())
}

/// Reorders every tensor axis coupled to a permutation group. Tensors missing
/// from `ws` are skipped, so this applies equally to encoders, heads or both.
pub fn apply_permutation(
    ws: &WeightSet,
    arch: &ArchitectureDescriptor,
    pm: &PermutationMap,
) -> Result<WeightSet> {
    pm.validate(arch)?;
    let mut out = ws.clone();
    for group in &arch.perm_groups {
        if let Some(perm) = pm.get(&group.name) {
            permute_group(&mut out, group, perm)?;
        }
    }
    Ok(out)
}

/// Uniform random bijection per group.
pub fn random_permutation_map(arch: &ArchitectureDescriptor, seed: u64) -> PermutationMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = arch
        .perm_groups
        .iter()
        .map(|g| {
            let mut p: Vec<usize> = (0..g.size).collect();
            p.shuffle(&mut rng);
            (g.name.clone(), p)
        })
        .collect();
    PermutationMap { perms }
}

/// Dense similarity matrix for one assignment problem.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        CostMatrix::new(r, c, a.iter().copied().collect())
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `Trace(G Pᵀ)` for the assignment `row i -> column perm[i]`.
    pub fn objective(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.at(i, j)).sum()
    }
}

/// Exact maximum-weight perfect assignment (shortest augmenting paths with
/// dual potentials, O(n³)). Returns `perm` with row `i` assigned to column
/// `perm[i]`. Scans prefer lower column indices, so an all-equal matrix yields
/// the identity.
pub fn linear_sum_assignment(g: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = g.dim();
    if n != m {
        return Err(Error::Shape(format!("assignment needs a square matrix, got {n}x{m}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Minimize the negated similarity. Arrays are 1-based with a virtual column 0.
    let cost = |i: usize, j: usize| -g.at(i - 1, j - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta || (minv[j] == delta && owner[j] == 0 && owner[j1] != 0) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Outcome of a weight-matching run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub perm: PermutationMap,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Global distance after each accepted group update.
    pub objective_trace: Vec<f64>,
    /// Global distance at the end of each sweep.
    pub sweep_distances: Vec<f64>,
}

const SWEEP_TOLERANCE: f64 = 1e-9;

/// Tensor as an f64 matrix with `axis` moved to the rows.
fn unfold(t: &Tensor, axis: usize) -> Array2<f64> {
    let view = ArrayViewD::from_shape(IxDyn(t.shape()), t.data()).expect("valid tensor");
    let rows = t.shape()[axis];
    let moved = {
        let mut order: Vec<usize> = (0..t.shape().len()).collect();
        order.remove(axis);
        order.insert(0, axis);
        view.permuted_axes(IxDyn(&order))
    };
    let data: Vec<f64> = moved.iter().map(|&x| x as f64).collect();
    Array2::from_shape_vec((rows, t.len() / rows), data).expect("consistent size")
}

/// Similarity `G[i, j] = Σ <a-slice i, b-slice j>` over every tensor axis coupled to `group`.
fn group_similarity(a: &WeightSet, b: &WeightSet, group: &PermGroup) -> Result<Array2<f64>> {
    let mut g = Array2::<f64>::zeros((group.size, group.size));
    for ta in &group.axes {
        let (Some(ta_a), Some(ta_b)) = (a.get(&ta.tensor), b.get(&ta.tensor)) else {
            continue;
        };
        if ta_a.shape().get(ta.axis) != Some(&group.size) {
            return Err(Error::Permutation(format!(
                "tensor `{}` axis {} does not match group `{}`",
                ta.tensor, ta.axis, group.name
            )));
        }
        let am = unfold(ta_a, ta.axis);
        let bm = unfold(ta_b, ta.axis);
        g += &am.dot(&bm.t());
    }
    Ok(g)
}

/// Coordinate descent over permutation groups minimizing `‖a − π(P, b)‖₂`.
///
/// Each sweep visits groups in a seed-shuffled order. For each group the
/// similarity matrix is built with all other groups' current permutations
/// applied to `b`, and the assignment solution is accepted only when it
/// strictly improves the group's similarity. Sweeping stops when a sweep's
/// relative distance decrease falls below 1e-9 or after `max_sweeps`.
pub fn weight_matching_report(
    a: &WeightSet,
    b: &WeightSet,
    arch: &ArchitectureDescriptor,
    seed: u64,
    max_sweeps: usize,
) -> Result<MatchReport> {
    a.check_compatible(b)?;
    let mut pm = PermutationMap::identity(arch);
    let initial = weight_distance(a, b)?;
    let mut current = initial;
    let mut trace = Vec::new();
    let mut sweep_distances = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..arch.perm_groups.len()).collect();

    for _ in 0..max_sweeps {
        if current == 0.0 {
            break;
        }
        let before = current;
        order.shuffle(&mut rng);
        for &gi in &order {
            let group = &arch.perm_groups[gi];
            if group.size < 2 {
                continue;
            }
            // `b` with every other group's permutation applied.
            let mut others = pm.clone();
            others.perms.insert(group.name.clone(), (0..group.size).collect());
            let b_others = apply_permutation(b, arch, &others)?;
            let g = CostMatrix::from_array(&group_similarity(a, &b_others, group)?)?;
            let candidate = linear_sum_assignment(&g)?;
            let old = g.objective(&pm.perms[&group.name]);
            let new = g.objective(&candidate);
            if new > old + 1e-12 * old.abs() {
                pm.perms.insert(group.name.clone(), candidate);
                current = weight_distance(a, &apply_permutation(b, arch, &pm)?)?;
                trace.push(current);
            }
        }
        sweep_distances.push(current);
        if before - current < SWEEP_TOLERANCE * before {
            break;
        }
    }
    Ok(MatchReport {
        perm: pm,
        initial_distance: initial,
        final_distance: current,
        objective_trace: trace,
        sweep_distances,
    })
}

/// Permutation `P` such that `apply_permutation(b, P)` is close to `a`.
pub fn weight_matching(
    a: &WeightSet,
    b: &WeightSet,
    arch: &ArchitectureDescriptor,
    seed: u64,
    max_sweeps: usize,
) -> Result<PermutationMap> {
    Ok(weight_matching_report(a, b, arch, seed, max_sweeps)?.perm)
}
