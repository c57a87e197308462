//! Synthetic graph generators for smoke tests and demos.

use ndarray::Array2;

use crate::error::Result;
use crate::graph::{Dataset, Graph};
use crate::rng::substream;
use rand::Rng;

/// Cycle on `n >= 3` nodes with constant all-ones features of width `d`.
pub fn cycle_graph(n: usize, d: usize) -> Graph {
    assert!(n >= 3, "cycle needs at least 3 nodes");
    let mut edges: Vec<(u32, u32)> = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
    edges.push((0, n as u32 - 1));
    Graph::new(n, edges, Array2::ones((n, d)), Some(0)).expect("valid cycle")
}

/// Star with one hub and `n - 1` leaves, constant all-ones features.
pub fn star_graph(n: usize, d: usize) -> Graph {
    assert!(n >= 2, "star needs at least 2 nodes");
    let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (0, i)).collect();
    Graph::new(n, edges, Array2::ones((n, d)), Some(1)).expect("valid star")
}

/// Balanced two-class dataset: `per_class` cycles (label 0) versus
/// `per_class` stars (label 1), sizes drawn uniformly from `sizes`.
pub fn cycles_vs_stars(
    per_class: usize,
    sizes: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = substream(seed, "cycles-vs-stars", &[]);
    let mut graphs = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let n = rng.gen_range(*sizes.start()..=*sizes.end());
        if i % 2 == 0 {
            graphs.push(cycle_graph(n.max(3), 1));
        } else {
            graphs.push(star_graph(n.max(2), 1));
        }
    }
    Dataset::new("cycles-vs-stars", graphs)
}
