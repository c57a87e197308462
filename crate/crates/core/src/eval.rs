//! Downstream evaluation: embedding export, cross-validated linear probe,
//! and the selection-heatmap export.
//!
//! The probe is an L2-regularized linear classifier with hinge loss (a
//! linear SVM), trained one-vs-rest by deterministic full-batch gradient
//! descent on features standardized with train-fold statistics. The
//! regularization constant C is chosen per outer fold from {0.01, 0.1, 1,
//! 10} by inner 3-fold selection.

use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{matrix_to_csv, POOL_SIZE};
use crate::error::{Error, Result};
use crate::graph::{make_batch, Dataset};
use crate::joao::TrainHistory;
use crate::nn::{gin_encode, ModelState};
use crate::rng::substream;
use rand::seq::SliceRandom;

const C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
const GD_ITERATIONS: usize = 300;
const EMBED_CHUNK: usize = 256;

/// Graph embeddings aligned with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    embeddings: Array2<f64>,
    labels: Vec<Option<i64>>,
}

impl EmbeddingTable {
    pub fn new(embeddings: Array2<f64>, labels: Vec<Option<i64>>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} embedding rows for {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[Option<i64>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encode every graph of the dataset (no augmentation, pre-projection-head).
pub fn embed_dataset(state: &ModelState, ds: &Dataset) -> Result<EmbeddingTable> {
    let hidden = state.encoder.hidden_dim();
    let mut embeddings = Array2::zeros((ds.len(), hidden));
    let mut row = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EMBED_CHUNK) {
        let batch = make_batch(ds, chunk)?;
        let emb = gin_encode(&state.encoder, &batch)?;
        embeddings
            .slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&emb);
        row += chunk.len();
    }
    EmbeddingTable::new(embeddings, ds.labels())
}

/// Cross-validation report of the linear probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

/// Stratified fold assignment: a deterministic function of `(seed, labels)`.
fn stratified_folds(classes: &[usize], num_classes: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut fold_of = vec![Vec::new(); folds];
    for class in 0..num_classes {
        let mut members: Vec<usize> = classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut substream(seed, "folds", &[class as u64]));
        for (t, idx) in members.into_iter().enumerate() {
            fold_of[t % folds].push(idx);
        }
    }
    fold_of
}

struct Scaler {
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl Scaler {
    fn fit(x: &Array2<f64>, rows: &[usize]) -> Scaler {
        let d = x.ncols();
        let n = rows.len() as f64;
        let mut mean = Array1::zeros(d);
        for &r in rows {
            mean += &x.row(r);
        }
        mean /= n;
        let mut var = Array1::zeros(d);
        for &r in rows {
            for j in 0..d {
                let dev = x[[r, j]] - mean[j];
                var[j] += dev * dev;
            }
        }
        let std = var.mapv(|v: f64| (v / n).sqrt().max(1e-12));
        Scaler { mean, std }
    }

    fn transform(&self, x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d {
                out[[i, j]] = (x[[r, j]] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

struct LinearSvm {
    /// One weight row per class.
    weights: Array2<f64>,
    biases: Vec<f64>,
}

/// One-vs-rest hinge-loss classifier trained by full-batch subgradient
/// descent with step `1 / (lambda (t + 1))`, `lambda = 1 / c`.
fn train_linear_svm(x: &Array2<f64>, y: &[usize], num_classes: usize, c: f64) -> LinearSvm {
    let (n, d) = x.dim();
    let lambda = 1.0 / c;
    let mut weights = Array2::zeros((num_classes, d));
    let mut biases = vec![0.0; num_classes];
    for class in 0..num_classes {
        let targets: Vec<f64> = y.iter().map(|&yi| if yi == class { 1.0 } else { -1.0 }).collect();
        let mut w = vec![0.0f64; d];
        let mut b = 0.0f64;
        for t in 0..GD_ITERATIONS {
            let eta = 1.0 / (lambda * (t + 1) as f64);
            let mut push = vec![0.0f64; d];
            let mut push_b = 0.0f64;
            for i in 0..n {
                let mut score = b;
                for j in 0..d {
                    score += w[j] * x[[i, j]];
                }
                if targets[i] * score < 1.0 {
                    for j in 0..d {
                        push[j] += targets[i] * x[[i, j]];
                    }
                    push_b += targets[i];
                }
            }
            let inv_n = 1.0 / n as f64;
            for j in 0..d {
                w[j] -= eta * (lambda * w[j] - push[j] * inv_n);
            }
            b += eta * push_b * inv_n;
        }
        for j in 0..d {
            weights[[class, j]] = w[j];
        }
        biases[class] = b;
    }
    LinearSvm { weights, biases }
}

fn predict(svm: &LinearSvm, x: &Array2<f64>) -> Vec<usize> {
    let (n, d) = x.dim();
    let classes = svm.biases.len();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for class in 0..classes {
                let mut score = svm.biases[class];
                for j in 0..d {
                    score += svm.weights[[class, j]] * x[[i, j]];
                }
                if score > best_score {
                    best_score = score;
                    best = class;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

fn fit_and_score(
    x: &Array2<f64>,
    classes: &[usize],
    num_classes: usize,
    train: &[usize],
    test: &[usize],
    c: f64,
) -> f64 {
    let scaler = Scaler::fit(x, train);
    let x_train = scaler.transform(x, train);
    let x_test = scaler.transform(x, test);
    let y_train: Vec<usize> = train.iter().map(|&i| classes[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| classes[i]).collect();
    let svm = train_linear_svm(&x_train, &y_train, num_classes, c);
    accuracy(&predict(&svm, &x_test), &y_test)
}

/// Pick C from the grid by stratified inner 3-fold selection on the train
/// part; falls back to C = 1 when a class is too small to split three ways.
fn select_c(
    x: &Array2<f64>,
    classes: &[usize],
    num_classes: usize,
    train: &[usize],
    seed: u64,
    outer_fold: usize,
) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &i in train {
        counts[classes[i]] += 1;
    }
    if counts.iter().any(|&c| c < 3) {
        return 1.0;
    }
    let train_classes: Vec<usize> = train.iter().map(|&i| classes[i]).collect();
    let inner = stratified_folds(
        &train_classes,
        num_classes,
        3,
        crate::rng::subseed(seed, "inner-folds", &[outer_fold as u64]),
    );
    let mut best = (f64::NEG_INFINITY, 1.0);
    for &c in &C_GRID {
        let mut total = 0.0;
        for held in 0..3 {
            let test: Vec<usize> = inner[held].iter().map(|&t| train[t]).collect();
            let fit: Vec<usize> = (0..3)
                .filter(|&f| f != held)
                .flat_map(|f| inner[f].iter().map(|&t| train[t]))
                .collect();
            total += fit_and_score(x, classes, num_classes, &fit, &test, c);
        }
        let mean = total / 3.0;
        // Strict improvement keeps ties on the smaller C.
        if mean > best.0 + 1e-12 {
            best = (mean, c);
        }
    }
    best.1
}

/// Stratified k-fold linear probe. Reports mean and population standard
/// deviation of the per-fold accuracies.
pub fn linear_probe_cv(table: &EmbeddingTable, folds: usize, seed: u64) -> Result<ProbeReport> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if folds > table.len() {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds exceed dataset size {}",
            table.len()
        )));
    }
    let labels: Vec<i64> = table
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::InvalidArgument(format!("graph {i} has no label"))))
        .collect::<Result<_>>()?;
    let mut distinct: Vec<i64> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least 2 classes".into(),
        ));
    }
    let classes: Vec<usize> = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    for (class, &label) in distinct.iter().enumerate() {
        let count = classes.iter().filter(|&&c| c == class).count();
        if count < folds {
            return Err(Error::InvalidArgument(format!(
                "class {label} has {count} examples, fewer than {folds} folds"
            )));
        }
    }

    let fold_sets = stratified_folds(&classes, distinct.len(), folds, seed);
    let x = table.embeddings();
    let per_fold: Vec<f64> = (0..folds)
        .into_par_iter()
        .map(|held| {
            let test = &fold_sets[held];
            let train: Vec<usize> = (0..folds)
                .filter(|&f| f != held)
                .flat_map(|f| fold_sets[f].iter().copied())
                .collect();
            let c = select_c(x, &classes, distinct.len(), &train, seed, held);
            fit_and_score(x, &classes, distinct.len(), &train, test, c)
        })
        .collect();

    let mean = per_fold.iter().sum::<f64>() / folds as f64;
    let var = per_fold.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok(ProbeReport {
        mean,
        std: var.sqrt(),
        per_fold,
    })
}

/// Selection percentages per ordered pair over a whole training history.
pub fn selection_percentages(history: &TrainHistory) -> Result<[[f64; POOL_SIZE]; POOL_SIZE]> {
    let total = history.total_samples();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "history contains no sampled pairs".into(),
        ));
    }
    let mut out = [[0.0; POOL_SIZE]; POOL_SIZE];
    for (row, counts) in out.iter_mut().zip(history.selection_counts.iter()) {
        for (cell, &count) in row.iter_mut().zip(counts.iter()) {
            *cell = 100.0 * count as f64 / total as f64;
        }
    }
    Ok(out)
}

/// Write the 5x5 selection-percentage CSV (cells sum to 100).
pub fn export_selection_heatmap(history: &TrainHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pct = selection_percentages(history)?;
    std::fs::write(path, matrix_to_csv(&pct)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::csv_to_matrix;
    use crate::nn::ModelDims;
    use crate::synth;
    use rand::Rng;

    fn blob_table(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> EmbeddingTable {
        let mut rng = substream(seed, "blobs", &[]);
        let n = 2 * n_per_class;
        let mut x = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            for j in 0..dim {
                let center = if class == 0 { 0.0 } else { separation };
                x[[i, j]] = center + rng.gen_range(-1.0..1.0);
            }
            labels.push(Some(class as i64));
        }
        EmbeddingTable::new(x, labels).unwrap()
    }

    #[test]
    fn separable_blobs_are_classified() {
        let table = blob_table(40, 4, 10.0, 1);
        let report = linear_probe_cv(&table, 5, 7).unwrap();
        assert!(report.mean >= 0.99, "mean accuracy {}", report.mean);
        assert_eq!(report.per_fold.len(), 5);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut means = Vec::new();
        for seed in 0..10u64 {
            let mut rng = substream(seed, "chance", &[]);
            let n = 60;
            let mut x = Array2::zeros((n, 4));
            for v in x.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let labels: Vec<Option<i64>> =
                (0..n).map(|_| Some(rng.gen_range(0..2i64))).collect();
            let table = match EmbeddingTable::new(x, labels) {
                Ok(t) => t,
                Err(_) => continue,
            };
            match linear_probe_cv(&table, 3, seed) {
                Ok(r) => means.push(r.mean),
                Err(_) => continue, // a class drew fewer than `folds` members
            }
        }
        assert!(means.len() >= 5);
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let sigma = (0.25f64 / 60.0).sqrt();
        assert!(
            (mean - 0.5).abs() <= 3.0 * sigma,
            "chance-level mean {mean} drifted"
        );
    }

    #[test]
    fn fold_errors_are_reported() {
        let table = blob_table(4, 2, 5.0, 2);
        assert!(linear_probe_cv(&table, 1, 0).is_err());
        assert!(linear_probe_cv(&table, 9, 0).is_err());
        match linear_probe_cv(&table, 5, 0) {
            Err(Error::InvalidArgument(m)) => assert!(m.contains("class"), "{m}"),
            other => panic!("expected class-size error, got {other:?}"),
        }
    }

    #[test]
    fn folds_are_deterministic_functions_of_seed_and_labels() {
        let classes = vec![0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1];
        let a = stratified_folds(&classes, 2, 3, 99);
        let b = stratified_folds(&classes, 2, 3, 99);
        assert_eq!(a, b);
        let c = stratified_folds(&classes, 2, 3, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn accuracy_is_invariant_to_column_permutation() {
        let table = blob_table(20, 5, 8.0, 3);
        let report = linear_probe_cv(&table, 4, 5).unwrap();
        let x = table.embeddings();
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for (to, &from) in perm.iter().enumerate() {
                permuted[[i, to]] = x[[i, from]];
            }
        }
        let permuted_table = EmbeddingTable::new(permuted, table.labels().to_vec()).unwrap();
        let permuted_report = linear_probe_cv(&permuted_table, 4, 5).unwrap();
        assert_eq!(report.per_fold, permuted_report.per_fold);
    }

    #[test]
    fn embed_dataset_rows_align_and_repeat() {
        let ds = synth::cycles_vs_stars(6, 5..=8, 4).unwrap();
        let dims = ModelDims {
            feature_dim: 1,
            hidden_dim: 4,
            num_layers: 2,
            proj_dim: 4,
            head_count: 1,
        };
        let state = ModelState::init(&dims, &mut substream(5, "emb", &[])).unwrap();
        let a = embed_dataset(&state, &ds).unwrap();
        let b = embed_dataset(&state, &ds).unwrap();
        assert_eq!(a.embeddings(), b.embeddings());
        assert_eq!(a.len(), ds.len());

        // Isomorphic graphs map to identical rows: dataset repeats shapes.
        let g_first = ds.graph(0);
        for (i, g) in ds.graphs().iter().enumerate() {
            if g.num_nodes() == g_first.num_nodes() && g.label() == g_first.label() {
                for d in 0..a.embeddings().ncols() {
                    assert_eq!(
                        a.embeddings()[[0, d]].to_bits(),
                        a.embeddings()[[i, d]].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn heatmap_export_roundtrip() {
        let mut history = TrainHistory::default();
        assert!(selection_percentages(&history).is_err());

        history.selection_counts[0][0] = 3;
        let pct = selection_percentages(&history).unwrap();
        assert_eq!(pct[0][0], 100.0);

        let mut rng = substream(6, "heat", &[]);
        let mut history = TrainHistory::default();
        let n = 50_000;
        for _ in 0..n {
            let i = rng.gen_range(0..POOL_SIZE);
            let j = rng.gen_range(0..POOL_SIZE);
            history.selection_counts[i][j] += 1;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        export_selection_heatmap(&history, &path).unwrap();
        let parsed = csv_to_matrix(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let total: f64 = parsed.iter().flatten().sum();
        assert!((total - 100.0).abs() <= 1e-6);
        let p = 4.0;
        let sigma = 100.0 * (0.04f64 * 0.96 / n as f64).sqrt();
        for row in &parsed {
            for &cell in row {
                assert!((cell - p).abs() <= 3.0 * sigma, "cell {cell} far from 4%");
            }
        }
    }
}
