//! The augmentation pool and the categorical pair sampler.
//!
//! Five operators act on graphs: node dropping, random-walk subgraph,
//! edge perturbation, attribute masking, and the identity. A
//! [`PairDistribution`] assigns a probability to every ordered pair of
//! operator kinds; the training loop samples pairs from it and the
//! lower-level optimizer updates it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Batch, Graph};
use crate::rng::{substream, Stream};

/// Number of augmentation kinds in the pool.
pub const POOL_SIZE: usize = 5;

/// The members of the augmentation pool, with their stable matrix indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationKind {
    NodeDrop = 0,
    Subgraph = 1,
    EdgePert = 2,
    AttrMask = 3,
    Identical = 4,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; POOL_SIZE] = [
        AugmentationKind::NodeDrop,
        AugmentationKind::Subgraph,
        AugmentationKind::EdgePert,
        AugmentationKind::AttrMask,
        AugmentationKind::Identical,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AugmentationKind::NodeDrop => "NodeDrop",
            AugmentationKind::Subgraph => "Subgraph",
            AugmentationKind::EdgePert => "EdgePert",
            AugmentationKind::AttrMask => "AttrMask",
            AugmentationKind::Identical => "Identical",
        };
        f.write_str(s)
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "nodedrop" => Ok(AugmentationKind::NodeDrop),
            "subgraph" => Ok(AugmentationKind::Subgraph),
            "edgepert" => Ok(AugmentationKind::EdgePert),
            "attrmask" => Ok(AugmentationKind::AttrMask),
            "identical" => Ok(AugmentationKind::Identical),
            _ => Err(Error::InvalidArgument(format!(
                "unknown augmentation kind {s:?}"
            ))),
        }
    }
}

/// Augmentation strength in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStrength(f64);

impl AugmentationStrength {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "augmentation strength {ratio} outside [0, 1)"
            )));
        }
        Ok(AugmentationStrength(ratio))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// How edge perturbation rebalances the edge set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePertMode {
    /// Remove k edges, then add k uniformly sampled non-edges.
    Rewire,
    /// Remove k edges only.
    DropOnly,
}

/// Knobs shared by all operators of one run.
#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub strength: AugmentationStrength,
    pub edge_pert_mode: EdgePertMode,
    /// Replacement row for masked nodes; `None` means all zeros.
    pub mask_vector: Option<Vec<f64>>,
}

impl AugmentOptions {
    pub fn new(strength: AugmentationStrength) -> Self {
        AugmentOptions {
            strength,
            edge_pert_mode: EdgePertMode::Rewire,
            mask_vector: None,
        }
    }
}

// Counts follow exact rational arithmetic: 0.3 * 10 must floor to 3 even
// though the f64 product is 2.999...96.
fn count_floor(ratio: f64, size: usize) -> usize {
    ((ratio * size as f64) + 1e-9).floor() as usize
}

fn count_ceil(ratio: f64, size: usize) -> usize {
    ((ratio * size as f64) - 1e-9).ceil() as usize
}

/// Remove `⌊ratio·|V|⌋` uniformly chosen nodes (never all of them) together
/// with their incident edges; survivors are re-indexed contiguously in their
/// original relative order.
pub fn node_drop(g: &Graph, strength: AugmentationStrength, rng: &mut Stream) -> Graph {
    let n = g.num_nodes();
    let k = count_floor(strength.value(), n).min(n - 1);
    if k == 0 {
        return g.clone();
    }
    let mut removed = vec![false; n];
    for ix in index::sample(rng, n, k) {
        removed[ix] = true;
    }
    induced_subgraph(g, &removed)
}

/// Keep the nodes visited by a uniform random walk from a uniform start
/// node, walking until `⌈(1−ratio)·|V|⌉` distinct nodes are collected or a
/// step budget of `10·|V|` expires; any remaining deficit is filled by
/// uniformly sampling unvisited nodes so the retained-size contract holds.
pub fn subgraph(g: &Graph, strength: AugmentationStrength, rng: &mut Stream) -> Graph {
    let n = g.num_nodes();
    let target = count_ceil(1.0 - strength.value(), n).clamp(1, n);
    let adj = g.neighbor_lists();
    let mut visited = vec![false; n];
    let mut current = rng.gen_range(0..n);
    visited[current] = true;
    let mut count = 1usize;
    let mut budget = 10 * n;
    while count < target && budget > 0 {
        budget -= 1;
        let nb = &adj[current];
        if nb.is_empty() {
            break;
        }
        current = nb[rng.gen_range(0..nb.len())] as usize;
        if !visited[current] {
            visited[current] = true;
            count += 1;
        }
    }
    if count < target {
        let unvisited: Vec<usize> = (0..n).filter(|&v| !visited[v]).collect();
        for ix in index::sample(rng, unvisited.len(), target - count) {
            visited[unvisited[ix]] = true;
        }
    }
    let dropped: Vec<bool> = visited.iter().map(|&v| !v).collect();
    induced_subgraph(g, &dropped)
}

/// Remove `⌊ratio·|E|⌋` uniformly chosen edges and, in [`EdgePertMode::Rewire`]
/// mode, add the same number of edges sampled uniformly from the non-edges
/// of the intermediate graph (rejection sampling). Nodes and features are
/// untouched. If fewer non-edges exist than removals, adds as many as
/// possible.
pub fn edge_pert(
    g: &Graph,
    strength: AugmentationStrength,
    mode: EdgePertMode,
    rng: &mut Stream,
) -> Graph {
    let m = g.num_edges();
    let k = count_floor(strength.value(), m);
    if k == 0 {
        return g.clone();
    }
    let mut removed = vec![false; m];
    for ix in index::sample(rng, m, k) {
        removed[ix] = true;
    }
    let mut edges: BTreeSet<(u32, u32)> = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed[*i])
        .map(|(_, &e)| e)
        .collect();
    if mode == EdgePertMode::Rewire {
        let n = g.num_nodes();
        let total_pairs = n * (n - 1) / 2;
        let mut added = 0usize;
        while added < k && edges.len() < total_pairs {
            let a = rng.gen_range(0..n) as u32;
            let b = rng.gen_range(0..n) as u32;
            if a == b {
                continue;
            }
            let pair = (a.min(b), a.max(b));
            if edges.insert(pair) {
                added += 1;
            }
        }
    }
    Graph::new(
        g.num_nodes(),
        edges.into_iter().collect(),
        g.features().clone(),
        g.label(),
    )
    .expect("edge perturbation preserves validity")
}

/// Replace the feature rows of `⌊ratio·|V|⌋` uniformly chosen nodes with
/// `mask_vector` (all zeros when `None`). Topology is unchanged.
pub fn attr_mask(
    g: &Graph,
    strength: AugmentationStrength,
    mask_vector: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<Graph> {
    let dim = g.feature_dim();
    if let Some(mask) = mask_vector {
        if mask.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "mask width {} != feature width {dim}",
                mask.len()
            )));
        }
    }
    let n = g.num_nodes();
    let k = count_floor(strength.value(), n);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut features = g.features().clone();
    for ix in index::sample(rng, n, k) {
        for d in 0..dim {
            features[[ix, d]] = mask_vector.map_or(0.0, |m| m[d]);
        }
    }
    Graph::new(
        n,
        g.edges().to_vec(),
        features,
        g.label(),
    )
}

fn induced_subgraph(g: &Graph, dropped: &[bool]) -> Graph {
    let n = g.num_nodes();
    let mut new_index = vec![u32::MAX; n];
    let mut kept = 0u32;
    for v in 0..n {
        if !dropped[v] {
            new_index[v] = kept;
            kept += 1;
        }
    }
    let edges: Vec<(u32, u32)> = g
        .edges()
        .iter()
        .filter(|&&(a, b)| !dropped[a as usize] && !dropped[b as usize])
        .map(|&(a, b)| (new_index[a as usize], new_index[b as usize]))
        .collect();
    let rows: Vec<usize> = (0..n).filter(|&v| !dropped[v]).collect();
    let features = g.features().select(ndarray::Axis(0), &rows);
    Graph::new(kept as usize, edges, features, g.label())
        .expect("induced subgraph preserves validity")
}

/// Apply one pool operator with default options (rewire mode, zero mask).
pub fn apply(
    kind: AugmentationKind,
    g: &Graph,
    strength: AugmentationStrength,
    rng: &mut Stream,
) -> Result<Graph> {
    apply_with(kind, g, &AugmentOptions::new(strength), rng)
}

/// Apply one pool operator. `Identical` returns an exact copy and consumes
/// no randomness, regardless of strength.
pub fn apply_with(
    kind: AugmentationKind,
    g: &Graph,
    opts: &AugmentOptions,
    rng: &mut Stream,
) -> Result<Graph> {
    match kind {
        AugmentationKind::NodeDrop => Ok(node_drop(g, opts.strength, rng)),
        AugmentationKind::Subgraph => Ok(subgraph(g, opts.strength, rng)),
        AugmentationKind::EdgePert => Ok(edge_pert(g, opts.strength, opts.edge_pert_mode, rng)),
        AugmentationKind::AttrMask => attr_mask(g, opts.strength, opts.mask_vector.as_deref(), rng),
        AugmentationKind::Identical => Ok(g.clone()),
    }
}

/// Augment every member of a batch with the same operator kind.
///
/// Each member graph gets its own substream named by `(kind, position)` and
/// derived from `seed`, so the view for a given kind is identical wherever
/// it is computed from the same seed.
pub fn augment_batch(
    batch: &Batch,
    kind: AugmentationKind,
    opts: &AugmentOptions,
    seed: u64,
) -> Result<Batch> {
    let members = batch.split();
    let mut views = Vec::with_capacity(members.len());
    for (pos, g) in members.iter().enumerate() {
        let mut rng = substream(seed, "augment", &[kind.index() as u64, pos as u64]);
        views.push(apply_with(kind, g, opts, &mut rng)?);
    }
    Batch::from_graphs(&views)
}

/// Probability distribution over ordered augmentation pairs.
///
/// Entry `(i, j)` is the probability of drawing first-view kind `i` and
/// second-view kind `j`; entries are non-negative and sum to one within
/// `1e-9`. Kind order follows [`AugmentationKind::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    probs: [[f64; POOL_SIZE]; POOL_SIZE],
}

impl PairDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// The uniform distribution (every entry `1/25`); this is the prior.
    pub fn uniform() -> Self {
        let p = 1.0 / (POOL_SIZE * POOL_SIZE) as f64;
        PairDistribution {
            probs: [[p; POOL_SIZE]; POOL_SIZE],
        }
    }

    pub fn from_probs(probs: [[f64; POOL_SIZE]; POOL_SIZE]) -> Result<Self> {
        let dist = PairDistribution { probs };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for row in &self.probs {
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::InvalidDistribution(format!(
                        "entry {p} is negative or non-finite"
                    )));
                }
                sum += p;
            }
        }
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn entry(&self, i: AugmentationKind, j: AugmentationKind) -> f64 {
        self.probs[i.index()][j.index()]
    }

    pub fn probs(&self) -> &[[f64; POOL_SIZE]; POOL_SIZE] {
        &self.probs
    }

    /// Row-major 25-vector in kind order.
    pub fn flat(&self) -> [f64; POOL_SIZE * POOL_SIZE] {
        let mut out = [0.0; POOL_SIZE * POOL_SIZE];
        for (i, row) in self.probs.iter().enumerate() {
            out[i * POOL_SIZE..(i + 1) * POOL_SIZE].copy_from_slice(row);
        }
        out
    }

    /// Rebuild from a row-major 25-vector without validating; meant for
    /// projected updates and numeric probes that sit slightly off-simplex.
    pub fn from_flat_unchecked(flat: &[f64; POOL_SIZE * POOL_SIZE]) -> Self {
        let mut probs = [[0.0; POOL_SIZE]; POOL_SIZE];
        for i in 0..POOL_SIZE {
            probs[i].copy_from_slice(&flat[i * POOL_SIZE..(i + 1) * POOL_SIZE]);
        }
        PairDistribution { probs }
    }

    /// Marginal of the first view: `p_i = Σ_j p_ij`.
    pub fn marginal_first(&self) -> [f64; POOL_SIZE] {
        let mut out = [0.0; POOL_SIZE];
        for (i, row) in self.probs.iter().enumerate() {
            out[i] = row.iter().sum();
        }
        out
    }

    /// Marginal of the second view: `p_j = Σ_i p_ij`.
    pub fn marginal_second(&self) -> [f64; POOL_SIZE] {
        let mut out = [0.0; POOL_SIZE];
        for row in &self.probs {
            for (j, &p) in row.iter().enumerate() {
                out[j] += p;
            }
        }
        out
    }

    /// 5x5 CSV, rows = first-view kind, columns = second-view kind.
    pub fn to_csv_string(&self) -> String {
        matrix_to_csv(&self.probs)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        Self::from_probs(csv_to_matrix(text)?)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Render a 5x5 matrix as headerless CSV, one row per line.
pub fn matrix_to_csv(m: &[[f64; POOL_SIZE]; POOL_SIZE]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parse a headerless 5x5 CSV matrix.
pub fn csv_to_matrix(text: &str) -> Result<[[f64; POOL_SIZE]; POOL_SIZE]> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != POOL_SIZE {
        return Err(Error::Malformed(format!(
            "expected {POOL_SIZE} CSV rows, got {}",
            rows.len()
        )));
    }
    let mut m = [[0.0; POOL_SIZE]; POOL_SIZE];
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != POOL_SIZE {
            return Err(Error::Malformed(format!(
                "expected {POOL_SIZE} CSV columns, got {}",
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            m[i][j] = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Malformed(format!("bad CSV value {cell:?}")))?;
        }
    }
    Ok(m)
}

/// Draw an ordered pair of kinds with probability `p_ij`.
pub fn sample_pair(
    dist: &PairDistribution,
    rng: &mut Stream,
) -> Result<(AugmentationKind, AugmentationKind)> {
    dist.validate()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = None;
    for i in AugmentationKind::ALL {
        for j in AugmentationKind::ALL {
            let p = dist.entry(i, j);
            if p > 0.0 {
                last_positive = Some((i, j));
                acc += p;
                if u < acc {
                    return Ok((i, j));
                }
            }
        }
    }
    // Rounding can leave acc marginally below 1; fall back to the last cell
    // that carries mass.
    last_positive.ok_or_else(|| Error::InvalidDistribution("no positive entry".into()))
}
