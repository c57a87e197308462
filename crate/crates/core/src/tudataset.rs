//! TUDataset flat-file ingestion and dataset statistics.
//!
//! The flat-file convention: `<name>_A.txt` lists comma-separated 1-indexed
//! directed edge pairs (each undirected edge normally appears in both
//! directions); `<name>_graph_indicator.txt` maps each node line to a
//! 1-indexed graph id. Optional files: `<name>_node_labels.txt`,
//! `<name>_node_attributes.txt`, `<name>_graph_labels.txt`. Whitespace
//! around commas is tolerated.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};

/// Per-dataset summary statistics.
///
/// `avg_degree` is total undirected edge count over total node count, with
/// each undirected edge counted once.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Stats {
    pub graph_count: usize,
    pub avg_nodes: f64,
    pub avg_degree: f64,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn parse_int(s: &str, what: &str, path: &Path) -> Result<i64> {
    s.trim().parse::<i64>().map_err(|_| {
        Error::Malformed(format!("{}: bad {what} value {s:?}", path.display()))
    })
}

/// Parse the TUDataset flat files for `name` under `directory`.
///
/// Node ids in the files are 1-indexed and global; they are remapped to
/// 0-indexed per-graph ids in indicator order. Duplicate directed edge lines
/// collapse to one undirected edge. Features come from the attribute file
/// when present, otherwise node labels are one-hot encoded (width = max
/// label + 1 over the whole dataset); with neither file every node gets the
/// constant feature `[1]`.
pub fn parse_tudataset(directory: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = directory.as_ref();
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{name}_{suffix}.txt")) };

    let indicator_path = file("graph_indicator");
    let edges_path = file("A");
    for required in [&edges_path, &indicator_path] {
        if !required.is_file() {
            return Err(Error::MissingFile(required.clone()));
        }
    }

    // Node -> graph assignment. Graph ids must cover 1..=max with no gaps.
    let indicator_lines = read_lines(&indicator_path)?;
    let num_nodes = indicator_lines.len();
    if num_nodes == 0 {
        return Err(Error::Malformed(format!(
            "{}: no nodes",
            indicator_path.display()
        )));
    }
    let mut graph_of = Vec::with_capacity(num_nodes);
    let mut num_graphs = 0usize;
    for line in &indicator_lines {
        let id = parse_int(line, "graph id", &indicator_path)?;
        if id < 1 {
            return Err(Error::Malformed(format!(
                "{}: graph id {id} out of range",
                indicator_path.display()
            )));
        }
        let id = id as usize;
        num_graphs = num_graphs.max(id);
        graph_of.push(id - 1);
    }

    // Per-graph node counts and local ids in global order.
    let mut node_counts = vec![0usize; num_graphs];
    let mut local_id = Vec::with_capacity(num_nodes);
    for &g in &graph_of {
        local_id.push(node_counts[g] as u32);
        node_counts[g] += 1;
    }
    if let Some(empty) = node_counts.iter().position(|&c| c == 0) {
        return Err(Error::Malformed(format!(
            "graph {} has zero nodes",
            empty + 1
        )));
    }

    // Edges, deduplicated per graph as unordered pairs.
    let mut edge_sets: Vec<std::collections::BTreeSet<(u32, u32)>> =
        vec![Default::default(); num_graphs];
    for line in read_lines(&edges_path)? {
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Malformed(format!(
                    "{}: expected `u, v`, got {line:?}",
                    edges_path.display()
                )))
            }
        };
        let a = parse_int(a, "node id", &edges_path)?;
        let b = parse_int(b, "node id", &edges_path)?;
        if a < 1 || b < 1 || a as usize > num_nodes || b as usize > num_nodes {
            return Err(Error::Malformed(format!(
                "{}: edge ({a}, {b}) out of range",
                edges_path.display()
            )));
        }
        let (a, b) = (a as usize - 1, b as usize - 1);
        if graph_of[a] != graph_of[b] {
            return Err(Error::Malformed(format!(
                "{}: edge ({}, {}) crosses graphs",
                edges_path.display(),
                a + 1,
                b + 1
            )));
        }
        let (la, lb) = (local_id[a], local_id[b]);
        if la == lb {
            return Err(Error::Malformed(format!(
                "{}: self-loop at node {}",
                edges_path.display(),
                a + 1
            )));
        }
        edge_sets[graph_of[a]].insert((la.min(lb), la.max(lb)));
    }

    // Features: attributes beat one-hot labels beat the constant [1].
    let attributes_path = file("node_attributes");
    let node_labels_path = file("node_labels");
    let features: Vec<Vec<f64>> = if attributes_path.is_file() {
        let lines = read_lines(&attributes_path)?;
        if lines.len() != num_nodes {
            return Err(Error::Malformed(format!(
                "{}: {} rows for {} nodes",
                attributes_path.display(),
                lines.len(),
                num_nodes
            )));
        }
        let mut rows = Vec::with_capacity(num_nodes);
        let mut width = None;
        for line in &lines {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::Malformed(format!(
                            "{}: bad attribute value {v:?}",
                            attributes_path.display()
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Malformed(format!(
                        "{}: ragged attribute rows ({} vs {w})",
                        attributes_path.display(),
                        row.len()
                    )))
                }
                _ => {}
            }
            rows.push(row);
        }
        rows
    } else if node_labels_path.is_file() {
        let lines = read_lines(&node_labels_path)?;
        if lines.len() != num_nodes {
            return Err(Error::Malformed(format!(
                "{}: {} rows for {} nodes",
                node_labels_path.display(),
                lines.len(),
                num_nodes
            )));
        }
        let labels: Vec<i64> = lines
            .iter()
            .map(|l| parse_int(l, "node label", &node_labels_path))
            .collect::<Result<_>>()?;
        if let Some(&bad) = labels.iter().find(|&&l| l < 0) {
            return Err(Error::Malformed(format!(
                "{}: negative node label {bad}",
                node_labels_path.display()
            )));
        }
        let width = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        labels
            .into_iter()
            .map(|l| {
                let mut row = vec![0.0; width];
                row[l as usize] = 1.0;
                row
            })
            .collect()
    } else {
        vec![vec![1.0]; num_nodes]
    };

    // Optional graph labels.
    let graph_labels_path = file("graph_labels");
    let graph_labels: Option<Vec<i64>> = if graph_labels_path.is_file() {
        let lines = read_lines(&graph_labels_path)?;
        if lines.len() != num_graphs {
            return Err(Error::Malformed(format!(
                "{}: {} labels for {} graphs",
                graph_labels_path.display(),
                lines.len(),
                num_graphs
            )));
        }
        Some(
            lines
                .iter()
                .map(|l| parse_int(l, "graph label", &graph_labels_path))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    // Assemble per-graph feature matrices in global node order.
    let width = features[0].len();
    let mut graph_features: Vec<Vec<f64>> = node_counts
        .iter()
        .map(|&c| Vec::with_capacity(c * width))
        .collect();
    for (node, row) in features.iter().enumerate() {
        graph_features[graph_of[node]].extend_from_slice(row);
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, feats) in graph_features.into_iter().enumerate() {
        let matrix = Array2::from_shape_vec((node_counts[g], width), feats)
            .expect("row count matches node count");
        let edges: Vec<(u32, u32)> = edge_sets[g].iter().copied().collect();
        let label = graph_labels.as_ref().map(|ls| ls[g]);
        graphs.push(Graph::new(node_counts[g], edges, matrix, label).map_err(
            |e| Error::Malformed(format!("graph {}: {e}", g + 1)),
        )?);
    }
    Dataset::new(name, graphs)
}

/// Graph count, mean node count, and mean degree over the dataset.
pub fn dataset_stats(ds: &Dataset) -> Stats {
    let graph_count = ds.len();
    let total_nodes: usize = ds.graphs().iter().map(|g| g.num_nodes()).sum();
    let total_edges: usize = ds.graphs().iter().map(|g| g.num_edges()).sum();
    Stats {
        graph_count,
        avg_nodes: total_nodes as f64 / graph_count as f64,
        avg_degree: total_edges as f64 / total_nodes as f64,
    }
}
