//! Graph, dataset and batch data model.
//!
//! A [`Graph`] is an undirected simple graph with per-node feature rows and
//! an optional class label. Edges are stored once per unordered pair,
//! canonicalized as `(lo, hi)` and sorted, so structurally equal graphs
//! compare equal regardless of input order.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Undirected simple graph with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(u32, u32)>,
    features: Array2<f64>,
    label: Option<i64>,
}

impl Graph {
    /// Build a graph, validating the structural invariants: endpoints in
    /// range, no self-loops, no duplicate unordered edges, one feature row
    /// per node. Edges are canonicalized and sorted.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(u32, u32)>,
        features: Array2<f64>,
        label: Option<i64>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidGraph("graph has zero nodes".into()));
        }
        if features.nrows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature rows {} != num nodes {}",
                features.nrows(),
                num_nodes
            )));
        }
        let mut canon: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a as usize >= num_nodes || b as usize >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph("duplicate undirected edge".into()));
        }
        Ok(Graph {
            num_nodes,
            edges: canon,
            features,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonicalized undirected edges, each pair listed once as `(lo, hi)`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label(&self) -> Option<i64> {
        self.label
    }

    /// Neighbor lists (sorted, ascending) for every node.
    pub fn neighbor_lists(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

/// A named collection of graphs sharing one feature width.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    graphs: Vec<Graph>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let name = name.into();
        let feature_dim = match graphs.first() {
            Some(g) => g.feature_dim(),
            None => return Err(Error::InvalidArgument("dataset is empty".into())),
        };
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != feature_dim) {
            return Err(Error::DimensionMismatch(format!(
                "dataset {name}: feature width {} != {}",
                g.feature_dim(),
                feature_dim
            )));
        }
        Ok(Dataset {
            name,
            graphs,
            feature_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn graph(&self, i: usize) -> &Graph {
        &self.graphs[i]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Labels in dataset order; `None` where a graph has no label.
    pub fn labels(&self) -> Vec<Option<i64>> {
        self.graphs.iter().map(|g| g.label()).collect()
    }
}

/// Node-level structure of a batch, shared by the forward passes.
#[derive(Debug)]
pub struct BatchTopology {
    /// Sorted neighbor ids per node of the merged graph.
    pub neighbors: Vec<Vec<u32>>,
    /// Owning-graph index per node; non-decreasing.
    pub graph_of: Vec<u32>,
    pub num_graphs: usize,
}

/// Disjoint union of several graphs.
///
/// Nodes of member `k` occupy the contiguous index range
/// `offsets[k]..offsets[k + 1]` of the merged graph, in their original
/// relative order, so splitting on the indicator recovers each member.
#[derive(Debug, Clone)]
pub struct Batch {
    merged: Graph,
    graph_of: Vec<u32>,
    offsets: Vec<usize>,
    topology: Rc<BatchTopology>,
}

impl Batch {
    /// Disjoint union of owned graphs. Errors on an empty list or mixed
    /// feature widths.
    pub fn from_graphs(graphs: &[Graph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidArgument("cannot batch zero graphs".into()));
        }
        let dim = graphs[0].feature_dim();
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "batch member feature width {} != {}",
                g.feature_dim(),
                dim
            )));
        }
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        let mut graph_of = Vec::with_capacity(total_nodes);
        let mut edges = Vec::new();
        let mut features = Array2::zeros((total_nodes, dim));
        let mut base = 0usize;
        for (k, g) in graphs.iter().enumerate() {
            offsets.push(base);
            for &(a, b) in g.edges() {
                edges.push((a + base as u32, b + base as u32));
            }
            features
                .slice_mut(ndarray::s![base..base + g.num_nodes(), ..])
                .assign(g.features());
            graph_of.extend(std::iter::repeat_n(k as u32, g.num_nodes()));
            base += g.num_nodes();
        }
        offsets.push(base);
        let merged = Graph::new(total_nodes, edges, features, None)?;
        let topology = Rc::new(BatchTopology {
            neighbors: merged.neighbor_lists(),
            graph_of: graph_of.clone(),
            num_graphs: graphs.len(),
        });
        Ok(Batch {
            merged,
            graph_of,
            offsets,
            topology,
        })
    }

    pub fn merged(&self) -> &Graph {
        &self.merged
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.merged.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.merged.feature_dim()
    }

    /// Owning-graph index per node.
    pub fn graph_indicator(&self) -> &[u32] {
        &self.graph_of
    }

    /// Node offset of each member graph, with a trailing total-count entry.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn topology(&self) -> Rc<BatchTopology> {
        Rc::clone(&self.topology)
    }

    /// Recover the member graphs (labels are not retained by a batch).
    pub fn split(&self) -> Vec<Graph> {
        let mut out = Vec::with_capacity(self.num_graphs());
        for k in 0..self.num_graphs() {
            let lo = self.offsets[k];
            let hi = self.offsets[k + 1];
            let edges = self
                .merged
                .edges()
                .iter()
                .filter(|&&(a, _)| (a as usize) >= lo && (a as usize) < hi)
                .map(|&(a, b)| (a - lo as u32, b - lo as u32))
                .collect();
            let features = self
                .merged
                .features()
                .slice(ndarray::s![lo..hi, ..])
                .to_owned();
            let g = Graph::new(hi - lo, edges, features, None)
                .expect("batch members are valid by construction");
            out.push(g);
        }
        out
    }
}

/// Batch the graphs selected by `indices`, in index order.
pub fn make_batch(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch index list".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::InvalidArgument(format!(
            "graph index {bad} out of range for dataset of {}",
            ds.len()
        )));
    }
    let graphs: Vec<Graph> = indices.iter().map(|&i| ds.graph(i).clone()).collect();
    Batch::from_graphs(&graphs)
}

/// Stack feature matrices of individual graphs; helper for tests and eval.
pub fn stack_features(graphs: &[&Graph]) -> Array2<f64> {
    let views: Vec<_> = graphs.iter().map(|g| g.features().view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform widths")
}
