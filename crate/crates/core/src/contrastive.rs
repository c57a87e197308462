//! Contrastive loss and the per-pair loss matrix.
//!
//! Positive pairs are the two augmented views of the same graph; negatives
//! are the other graphs of the minibatch under the second view, with the
//! positive partner kept in the denominator. The per-pair loss matrix holds
//! a minibatch estimate of the loss for every ordered pair of augmentation
//! kinds and drives the distribution update.

use ndarray::Array2;
use rayon::prelude::*;

use crate::augment::{augment_batch, AugmentOptions, AugmentationKind, PairDistribution, POOL_SIZE};
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::nn::{
    gin_encode, loss_and_grad, project, tape_encode, tape_project, GradientBundle, ModelState,
    TrainMode,
};
use crate::ops;

/// Cosine similarity `u . v / (|u| |v|)`; errors on a zero-norm input.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with widths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// Lenient cosine similarity: a zero-norm input yields 0 with a warning.
pub fn cosine_sim_lenient(u: &[f64], v: &[f64]) -> f64 {
    match cosine_sim(u, v) {
        Ok(s) => s,
        Err(Error::ZeroNorm(which)) => {
            log::warn!("cosine of zero-norm vector (operand {which}); defining similarity as 0");
            0.0
        }
        Err(_) => 0.0,
    }
}

/// Row-aligned projected embeddings of two views of the same graphs.
#[derive(Debug, Clone)]
pub struct ViewPair {
    z1: Array2<f64>,
    z2: Array2<f64>,
}

impl ViewPair {
    pub fn new(z1: Array2<f64>, z2: Array2<f64>) -> Result<Self> {
        if z1.dim() != z2.dim() {
            return Err(Error::DimensionMismatch(format!(
                "view shapes {:?} and {:?} differ",
                z1.dim(),
                z2.dim()
            )));
        }
        if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("view embeddings".into()));
        }
        Ok(ViewPair { z1, z2 })
    }

    pub fn batch_size(&self) -> usize {
        self.z1.nrows()
    }
}

/// Contrastive loss over a view pair at temperature `tau`.
///
/// Per anchor `k`: `-sim(z1_k, z2_k)/tau + log Σ_m exp(sim(z1_k, z2_m)/tau)`,
/// averaged over anchors. `symmetric` averages in the second anchor
/// direction as well. Requires a batch of at least 2. A zero-norm embedding
/// row is inert: its similarities are 0 (the lenient cosine policy).
pub fn nt_xent(pair: &ViewPair, tau: f64, symmetric: bool) -> Result<f64> {
    if pair.batch_size() < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            pair.batch_size()
        )));
    }
    let n1 = ops::row_normalize_lenient(&pair.z1);
    let n2 = ops::row_normalize_lenient(&pair.z2);
    let sim = ops::matmul_nt(&n1, &n2);
    let loss = ops::ntxent_from_sim(&sim, tau, false);
    if !symmetric {
        return Ok(loss);
    }
    Ok(0.5 * (loss + ops::ntxent_from_sim(&sim, tau, true)))
}

/// Minibatch estimates of the contrastive loss for every ordered pair of
/// augmentation kinds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairLossMatrix {
    values: [[f64; POOL_SIZE]; POOL_SIZE],
}

impl PairLossMatrix {
    pub fn from_values(values: [[f64; POOL_SIZE]; POOL_SIZE]) -> Result<Self> {
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pair loss matrix".into()));
        }
        Ok(PairLossMatrix { values })
    }

    pub fn entry(&self, i: AugmentationKind, j: AugmentationKind) -> f64 {
        self.values[i.index()][j.index()]
    }

    pub fn values(&self) -> &[[f64; POOL_SIZE]; POOL_SIZE] {
        &self.values
    }

    /// Row-major 25-vector in kind order.
    pub fn flat(&self) -> [f64; POOL_SIZE * POOL_SIZE] {
        let mut out = [0.0; POOL_SIZE * POOL_SIZE];
        for (i, row) in self.values.iter().enumerate() {
            out[i * POOL_SIZE..(i + 1) * POOL_SIZE].copy_from_slice(row);
        }
        out
    }
}

/// Knobs shared by the loss evaluations of one run.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub tau: f64,
    pub symmetric: bool,
    pub augment: AugmentOptions,
    pub mode: TrainMode,
}

fn head_index(mode: TrainMode, head_count: usize, kind: AugmentationKind) -> Result<usize> {
    let expected = mode.head_count();
    if head_count != expected {
        return Err(Error::InvalidArgument(format!(
            "{mode} mode expects {expected} heads, state has {head_count}"
        )));
    }
    Ok(match mode {
        TrainMode::Joao => 0,
        TrainMode::JoaoV2 => kind.index(),
    })
}

/// Per-kind augmented views with cached embeddings and projections.
///
/// Each kind's view is materialized once per evaluation seed and reused by
/// all matrix entries that involve it; the per-kind substreams are derived
/// from `seed` the same way [`weighted_loss`] derives them, so the two
/// computations agree under identical seeds.
fn per_kind_projections(
    state: &ModelState,
    batch: &Batch,
    cfg: &LossConfig,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    AugmentationKind::ALL
        .iter()
        .map(|&kind| {
            let view = augment_batch(batch, kind, &cfg.augment, seed)?;
            let emb = gin_encode(&state.encoder, &view)?;
            let head = head_index(cfg.mode, state.heads.len(), kind)?;
            project(&state.heads[head], &emb)
        })
        .collect()
}

/// Evaluate the contrastive loss for all 25 ordered kind pairs on one
/// minibatch. No gradients are taken.
pub fn pair_loss_matrix(
    state: &ModelState,
    batch: &Batch,
    cfg: &LossConfig,
    seed: u64,
) -> Result<PairLossMatrix> {
    let projections = per_kind_projections(state, batch, cfg, seed)?;
    let entries: Vec<Result<f64>> = AugmentationKind::ALL
        .par_iter()
        .flat_map(|&i| AugmentationKind::ALL.par_iter().map(move |&j| (i, j)))
        .map(|(i, j)| {
            let pair = ViewPair::new(
                projections[i.index()].clone(),
                projections[j.index()].clone(),
            )?;
            nt_xent(&pair, cfg.tau, cfg.symmetric)
        })
        .collect();
    let mut values = [[0.0; POOL_SIZE]; POOL_SIZE];
    for (flat_idx, entry) in entries.into_iter().enumerate() {
        values[flat_idx / POOL_SIZE][flat_idx % POOL_SIZE] = entry?;
    }
    PairLossMatrix::from_values(values)
}

/// The training loss for one sampled pair, connected to the gradient tape.
///
/// Computes the same quantity as the corresponding [`pair_loss_matrix`]
/// entry (identical per-kind view substreams) and returns its gradients for
/// the upper-level parameter step.
pub fn weighted_loss(
    state: &ModelState,
    batch: &Batch,
    pair: (AugmentationKind, AugmentationKind),
    cfg: &LossConfig,
    seed: u64,
) -> Result<(f64, GradientBundle)> {
    let (i, j) = pair;
    let view1 = augment_batch(batch, i, &cfg.augment, seed)?;
    let view2 = augment_batch(batch, j, &cfg.augment, seed)?;
    let head1 = head_index(cfg.mode, state.heads.len(), i)?;
    let head2 = head_index(cfg.mode, state.heads.len(), j)?;
    loss_and_grad(state, |tape, binding| {
        let emb1 = tape_encode(tape, binding, &view1)?;
        let emb2 = tape_encode(tape, binding, &view2)?;
        let z1 = tape_project(tape, binding, head1, emb1)?;
        let z2 = tape_project(tape, binding, head2, emb2)?;
        tape.nt_xent(z1, z2, cfg.tau, cfg.symmetric)
    })
}

/// Expected loss under a pair distribution: `Σ_ij p_ij L_ij`.
pub fn expected_loss(dist: &PairDistribution, losses: &PairLossMatrix) -> f64 {
    let mut total = 0.0;
    for i in AugmentationKind::ALL {
        for j in AugmentationKind::ALL {
            total += dist.entry(i, j) * losses.entry(i, j);
        }
    }
    total
}
