//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dense `f64` matrices (scalars are 1x1). Operations push nodes
//! that reference earlier nodes, so creation order is already a topological
//! order and the backward sweep is a single reverse pass. The op set is
//! exactly what the encoder, projection heads and contrastive loss need.

use std::rc::Rc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::BatchTopology;
use crate::ops;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a @ w` plus a broadcast 1xM bias row.
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    NeighborSum {
        input: NodeId,
        topo: Rc<BatchTopology>,
        eps: f64,
    },
    SegmentSum {
        input: NodeId,
        topo: Rc<BatchTopology>,
    },
    RowNormalize(NodeId),
    /// `a @ b^T`.
    MatMulNT(NodeId, NodeId),
    SumSquares(NodeId),
    NtXent {
        sim: NodeId,
        tau: f64,
        transposed: bool,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation and differentiates scalars through it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    /// `input @ weight + bias`, with `bias` a 1xM leaf broadcast over rows.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        let bias_row = Array1::from_iter(b.row(0).iter().copied());
        let value = ops::linear(&self.nodes[input.0].value, &self.nodes[weight.0].value, &bias_row);
        self.push(value, Op::Affine { input, weight, bias })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = ops::relu(&self.nodes[a.0].value);
        self.push(value, Op::Relu(a))
    }

    pub fn neighbor_sum(&mut self, input: NodeId, topo: Rc<BatchTopology>, eps: f64) -> NodeId {
        let value = ops::neighbor_sum(&self.nodes[input.0].value, &topo, eps);
        self.push(value, Op::NeighborSum { input, topo, eps })
    }

    pub fn segment_sum(&mut self, input: NodeId, topo: Rc<BatchTopology>) -> NodeId {
        let value = ops::segment_sum(&self.nodes[input.0].value, &topo);
        self.push(value, Op::SegmentSum { input, topo })
    }

    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let value = ops::row_normalize_lenient(&self.nodes[a.0].value);
        self.push(value, Op::RowNormalize(a))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = ops::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.iter().map(|v| v * v).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumSquares(a))
    }

    /// Contrastive loss node over a precomputed similarity matrix.
    pub fn nt_xent_from_sim(&mut self, sim: NodeId, tau: f64, transposed: bool) -> Result<NodeId> {
        let s = &self.nodes[sim.0].value;
        if s.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive loss needs a batch of at least 2, got {}",
                s.nrows()
            )));
        }
        let value = ops::ntxent_from_sim(s, tau, transposed);
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::NtXent { sim, tau, transposed },
        ))
    }

    /// Normalize both views, take cosine similarities, and score them with
    /// the contrastive loss; `symmetric` averages the two anchor directions.
    pub fn nt_xent(&mut self, z1: NodeId, z2: NodeId, tau: f64, symmetric: bool) -> Result<NodeId> {
        let n1 = self.row_normalize(z1);
        let n2 = self.row_normalize(z2);
        let sim = self.matmul_nt(n1, n2);
        let fwd = self.nt_xent_from_sim(sim, tau, false)?;
        if !symmetric {
            return Ok(fwd);
        }
        let rev = self.nt_xent_from_sim(sim, tau, true)?;
        let sum = self.add(fwd, rev);
        Ok(self.scale(sum, 0.5))
    }

    /// Accumulated gradients of `loss` (a 1x1 node) for every node.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Array2<f64>>>> {
        let value = self.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::Affine { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    // dX = g @ W^T
                    let (n, d_out) = g.dim();
                    let d_in = w.nrows();
                    let mut dx = Array2::zeros((n, d_in));
                    for i in 0..n {
                        for k in 0..d_in {
                            let mut acc = 0.0;
                            for j in 0..d_out {
                                acc += g[[i, j]] * w[[k, j]];
                            }
                            dx[[i, k]] = acc;
                        }
                    }
                    // dW = X^T @ g
                    let mut dw = Array2::zeros((d_in, d_out));
                    for i in 0..n {
                        for k in 0..d_in {
                            let xv = x[[i, k]];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..d_out {
                                dw[[k, j]] += xv * g[[i, j]];
                            }
                        }
                    }
                    // db = column sums of g
                    let mut db = Array2::zeros((1, d_out));
                    for i in 0..n {
                        for j in 0..d_out {
                            db[[0, j]] += g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut dx = g;
                    dx.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, dx);
                }
                Op::NeighborSum { input, topo, eps } => {
                    // The aggregation matrix (1+eps)I + A is symmetric, so
                    // the backward pass is the same aggregation of g.
                    let (n, d) = g.dim();
                    let mut dx = Array2::zeros((n, d));
                    for v in 0..n {
                        for dim in 0..d {
                            let mut acc = (1.0 + eps) * g[[v, dim]];
                            for &u in &topo.neighbors[v] {
                                acc += g[[u as usize, dim]];
                            }
                            dx[[v, dim]] = acc;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::SegmentSum { input, topo } => {
                    let n = topo.graph_of.len();
                    let d = g.ncols();
                    let mut dx = Array2::zeros((n, d));
                    for v in 0..n {
                        let row = topo.graph_of[v] as usize;
                        for dim in 0..d {
                            dx[[v, dim]] = g[[row, dim]];
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::RowNormalize(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let norms = ops::row_norms(x);
                    let (n, d) = x.dim();
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        if norms[i] == 0.0 {
                            continue; // inert row, no gradient
                        }
                        let dot: f64 = (0..d).map(|j| y[[i, j]] * g[[i, j]]).sum();
                        for j in 0..d {
                            dx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MatMulNT(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (n, m) = g.dim();
                    let d = av.ncols();
                    let mut da = Array2::zeros((n, d));
                    let mut db = Array2::zeros((m, d));
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[[i, j]];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                da[[i, k]] += gv * bv[[j, k]];
                                db[[j, k]] += gv * av[[i, k]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SumSquares(a) => {
                    let gs = g[[0, 0]];
                    let dx = self.nodes[a.0].value.mapv(|v| 2.0 * v * gs);
                    accumulate(&mut grads, *a, dx);
                }
                Op::NtXent { sim, tau, transposed } => {
                    let gs = g[[0, 0]];
                    let mut ds =
                        ops::ntxent_from_sim_grad(&self.nodes[sim.0].value, *tau, *transposed);
                    ds.mapv_inplace(|v| v * gs);
                    accumulate(&mut grads, *sim, ds);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}
