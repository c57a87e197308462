//! Forward numeric kernels shared by the plain and taped paths.
//!
//! Aggregations over neighbor sets and graph segments fold their addends in
//! ascending value order. Summing a value multiset in a canonical order
//! makes graph embeddings bit-identical under node relabeling, which the
//! batching and evaluation layers rely on.

use ndarray::{Array1, Array2};

use crate::graph::BatchTopology;

/// Fold `values` in ascending order; deterministic for a given multiset.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// `x @ w + b`, accumulated in a fixed k-order per output element.
pub(crate) fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, d_in) = x.dim();
    let (w_in, d_out) = w.dim();
    debug_assert_eq!(d_in, w_in);
    debug_assert_eq!(b.len(), d_out);
    let mut out = Array2::zeros((n, d_out));
    for i in 0..n {
        let mut row = vec![0.0f64; d_out];
        for k in 0..d_in {
            let v = x[[i, k]];
            if v == 0.0 {
                continue;
            }
            for (j, acc) in row.iter_mut().enumerate() {
                *acc += v * w[[k, j]];
            }
        }
        for j in 0..d_out {
            out[[i, j]] = row[j] + b[j];
        }
    }
    out
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// `(1 + eps) * h[v] + Σ_{u ~ v} h[u]` per node, neighbor sums folded in
/// value order.
pub(crate) fn neighbor_sum(h: &Array2<f64>, topo: &BatchTopology, eps: f64) -> Array2<f64> {
    let (n, d) = h.dim();
    debug_assert_eq!(n, topo.neighbors.len());
    let mut out = Array2::zeros((n, d));
    let mut scratch: Vec<f64> = Vec::new();
    for v in 0..n {
        let nb = &topo.neighbors[v];
        for dim in 0..d {
            scratch.clear();
            scratch.extend(nb.iter().map(|&u| h[[u as usize, dim]]));
            out[[v, dim]] = (1.0 + eps) * h[[v, dim]] + sorted_sum(&mut scratch);
        }
    }
    out
}

/// Sum-pool node rows into per-graph rows, folded in value order.
pub(crate) fn segment_sum(h: &Array2<f64>, topo: &BatchTopology) -> Array2<f64> {
    let (n, d) = h.dim();
    debug_assert_eq!(n, topo.graph_of.len());
    let mut out = Array2::zeros((topo.num_graphs, d));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); topo.num_graphs];
    for v in 0..n {
        members[topo.graph_of[v] as usize].push(v);
    }
    let mut scratch: Vec<f64> = Vec::new();
    for (g, nodes) in members.iter().enumerate() {
        for dim in 0..d {
            scratch.clear();
            scratch.extend(nodes.iter().map(|&v| h[[v, dim]]));
            out[[g, dim]] = sorted_sum(&mut scratch);
        }
    }
    out
}

/// Lenient row normalization for the loss path: a zero-norm row (a graph
/// whose rectified embedding died) stays zero and is treated as a constant,
/// so its similarities are 0 and no gradient flows through it.
pub(crate) fn row_normalize_lenient(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut dead = 0usize;
    for i in 0..n {
        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dead += 1;
            continue;
        }
        for j in 0..d {
            out[[i, j]] = x[[i, j]] / norm;
        }
    }
    if dead > 0 {
        log::debug!("{dead} zero-norm embedding row(s) treated as inert");
    }
    out
}

/// Row norms of `x`; used by the normalize backward pass.
pub(crate) fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(
        x.rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()),
    )
}

/// `a @ b^T` for row-aligned embedding matrices.
pub(crate) fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, d) = a.dim();
    let (m, d2) = b.dim();
    debug_assert_eq!(d, d2);
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[[i, k]] * b[[j, k]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Contrastive loss over a similarity matrix of cosine scores.
///
/// Anchors are rows (or columns when `transposed`); each anchor `k`
/// contributes `-s_kk/tau + log Σ_m exp(s_km/tau)` and the result is the
/// anchor mean. The positive partner stays in the denominator.
pub(crate) fn ntxent_from_sim(s: &Array2<f64>, tau: f64, transposed: bool) -> f64 {
    let b = s.nrows();
    debug_assert_eq!(b, s.ncols());
    let mut total = 0.0;
    for k in 0..b {
        let row: Vec<f64> = (0..b)
            .map(|m| if transposed { s[[m, k]] } else { s[[k, m]] } / tau)
            .collect();
        total += -row[k] + log_sum_exp(&row);
    }
    total / b as f64
}

/// Gradient of [`ntxent_from_sim`] with respect to the similarity matrix.
pub(crate) fn ntxent_from_sim_grad(s: &Array2<f64>, tau: f64, transposed: bool) -> Array2<f64> {
    let b = s.nrows();
    let mut grad = Array2::zeros((b, b));
    for k in 0..b {
        let row: Vec<f64> = (0..b)
            .map(|m| if transposed { s[[m, k]] } else { s[[k, m]] } / tau)
            .collect();
        let lse = log_sum_exp(&row);
        for m in 0..b {
            let softmax = (row[m] - lse).exp();
            let g = (softmax - if m == k { 1.0 } else { 0.0 }) / (tau * b as f64);
            if transposed {
                grad[[m, k]] += g;
            } else {
                grad[[k, m]] += g;
            }
        }
    }
    grad
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
