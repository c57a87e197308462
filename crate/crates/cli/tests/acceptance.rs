//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (visible with `cargo test -- --nocapture`).
//!
//! Criterion 1 reads the bundled benchmark datasets from `data/` at the
//! workspace root (override with `JOAO_DATA_DIR`).

mod common;

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;

use joao_core::augment::{
    augment_batch, AugmentOptions, AugmentationKind, AugmentationStrength, PairDistribution,
    POOL_SIZE,
};
use joao_core::contrastive::{nt_xent, weighted_loss, LossConfig, PairLossMatrix, ViewPair};
use joao_core::eval::{embed_dataset, linear_probe_cv, selection_percentages};
use joao_core::graph::{make_batch, Batch, Dataset, Graph};
use joao_core::joao::{
    agd_train_silent, lower_step, project_simplex, psi, psi_grad, JoaoConfig, TrainHistory,
};
use joao_core::nn::{gin_encode, project, sgd_step, ModelDims, ModelState, TrainMode};
use joao_core::rng::{subseed, substream};
use joao_core::synth;
use joao_core::tudataset::{dataset_stats, parse_tudataset};
use rand::Rng;

const CELLS: usize = POOL_SIZE * POOL_SIZE;

fn criterion<F: FnOnce()>(number: usize, name: &str, body: F) {
    let result = catch_unwind(AssertUnwindSafe(body));
    match result {
        Ok(()) => println!("criterion {number:02} ({name}): PASS"),
        Err(cause) => {
            println!("criterion {number:02} ({name}): FAIL");
            resume_unwind(cause);
        }
    }
}

fn data_dir() -> PathBuf {
    match std::env::var("JOAO_DATA_DIR") {
        Ok(dir) => PathBuf::from(dir),
        Err(_) => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

#[test]
fn c01_dataset_fidelity() {
    criterion(1, "dataset fidelity", || {
        let root = data_dir();
        let nci1 = parse_tudataset(root.join("NCI1"), "NCI1").expect("NCI1 data present");
        let s = dataset_stats(&nci1);
        assert_eq!(s.graph_count, 4110, "NCI1 graph count");
        assert!((s.avg_nodes - 29.87).abs() <= 0.01, "NCI1 avg nodes {}", s.avg_nodes);
        assert!((s.avg_degree - 1.08).abs() <= 0.01, "NCI1 avg degree {}", s.avg_degree);

        let proteins =
            parse_tudataset(root.join("PROTEINS"), "PROTEINS").expect("PROTEINS data present");
        let s = dataset_stats(&proteins);
        assert_eq!(s.graph_count, 1113, "PROTEINS graph count");
        assert!((s.avg_nodes - 39.06).abs() <= 0.01, "PROTEINS avg nodes {}", s.avg_nodes);
    });
}

/// Sort-based Euclidean simplex projection; the oracle for criterion 2.
fn sort_projection(b: &[f64; CELLS]) -> [f64; CELLS] {
    let mut sorted = *b;
    sorted.sort_unstable_by(|x, y| y.total_cmp(x));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out = *b;
    for v in out.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
    out
}

#[test]
fn c02_simplex_projection() {
    criterion(2, "simplex projection vs sort oracle", || {
        let mut rng = substream(2025, "acc-simplex", &[]);
        for _ in 0..1000 {
            let mut b = [0.0; CELLS];
            for v in b.iter_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let ours = project_simplex(&b);
            let oracle = sort_projection(&b);
            for (a, o) in ours.flat().iter().zip(oracle.iter()) {
                assert!((a - o).abs() <= 1e-9, "projection {a} vs oracle {o}");
            }
            let twice = project_simplex(&ours.flat());
            for (a, o) in twice.flat().iter().zip(ours.flat().iter()) {
                assert!((a - o).abs() <= 1e-12, "not idempotent: {a} vs {o}");
            }
        }
    });
}

fn random_dist(seed: u64) -> PairDistribution {
    let mut rng = substream(seed, "acc-dist", &[]);
    let mut b = [0.0; CELLS];
    for v in b.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    project_simplex(&b)
}

fn random_losses(seed: u64) -> PairLossMatrix {
    let mut rng = substream(seed, "acc-loss", &[]);
    let mut values = [[0.0; POOL_SIZE]; POOL_SIZE];
    for row in values.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-2.0..4.0);
        }
    }
    PairLossMatrix::from_values(values).unwrap()
}

#[test]
fn c03_psi_gradient() {
    criterion(3, "psi gradient vs finite differences", || {
        let mut rng = substream(3, "acc-psi", &[]);
        for trial in 0..100u64 {
            let p = random_dist(trial);
            let losses = random_losses(1000 + trial);
            let gamma: f64 = rng.gen_range(0.0..5.0);
            let grad = psi_grad(&p, &losses, gamma);
            let flat = p.flat();
            let h = 1e-5;
            for cell in 0..CELLS {
                let mut up = flat;
                up[cell] += h;
                let mut down = flat;
                down[cell] -= h;
                let up_p = dist_from_flat(&up);
                let down_p = dist_from_flat(&down);
                let fd = (psi(&up_p, &losses, gamma) - psi(&down_p, &losses, gamma)) / (2.0 * h);
                let ad = grad[cell / POOL_SIZE][cell % POOL_SIZE];
                assert!(
                    (ad - fd).abs() <= 1e-8 * ad.abs().max(fd.abs()).max(1.0),
                    "trial {trial} cell {cell}: {ad} vs {fd}"
                );
            }
        }
    });
}

// psi is probed slightly off-simplex during differencing.
fn dist_from_flat(flat: &[f64; CELLS]) -> PairDistribution {
    PairDistribution::from_flat_unchecked(flat)
}

fn random_graph(seed: u64, max_nodes: usize, d: usize) -> Graph {
    let mut rng = substream(seed, "acc-graph", &[]);
    let n = 2 + (rng.gen::<u64>() as usize) % (max_nodes - 1);
    let mut edges = std::collections::BTreeSet::new();
    for _ in 0..2 * n {
        let a = rng.gen_range(0..n) as u32;
        let b = rng.gen_range(0..n) as u32;
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut features = ndarray::Array2::zeros((n, d));
    for v in features.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    Graph::new(n, edges.into_iter().collect(), features, None).unwrap()
}

#[test]
fn c04_encoder_gradient() {
    criterion(4, "encoder gradient vs finite differences", || {
        let dims = ModelDims {
            feature_dim: 2,
            hidden_dim: 4,
            num_layers: 2,
            proj_dim: 4,
            head_count: 1,
        };
        let cfg = LossConfig {
            tau: 0.8,
            symmetric: false,
            augment: AugmentOptions::new(AugmentationStrength::new(0.2).unwrap()),
            mode: TrainMode::Joao,
        };
        for trial in 0..20u64 {
            let state =
                ModelState::init(&dims, &mut substream(40 + trial, "acc-grad-state", &[])).unwrap();
            let g1 = random_graph(400 + trial, 6, 2);
            let g2 = random_graph(500 + trial, 6, 2);
            let batch = Batch::from_graphs(&[g1, g2]).unwrap();
            let aug_seed = subseed(7, "acc-grad-aug", &[trial]);
            let pair = (
                AugmentationKind::ALL[(trial % 5) as usize],
                AugmentationKind::ALL[((trial + 2) % 5) as usize],
            );

            let (loss, grads) = weighted_loss(&state, &batch, pair, &cfg, aug_seed).unwrap();
            assert!(loss.is_finite());

            // Independent forward for the differencing: the augmented views
            // are fixed data, only parameters move.
            let view1 = augment_batch(&batch, pair.0, &cfg.augment, aug_seed).unwrap();
            let view2 = augment_batch(&batch, pair.1, &cfg.augment, aug_seed).unwrap();
            let forward = |s: &ModelState| -> f64 {
                let z1 = project(&s.heads[0], &gin_encode(&s.encoder, &view1).unwrap()).unwrap();
                let z2 = project(&s.heads[0], &gin_encode(&s.encoder, &view2).unwrap()).unwrap();
                nt_xent(&ViewPair::new(z1, z2).unwrap(), cfg.tau, cfg.symmetric).unwrap()
            };
            assert!((forward(&state) - loss).abs() <= 1e-12);

            let flat = state.flatten();
            let ad = grads.flatten();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut probe = flat.clone();
                probe[i] = flat[i] + h;
                let mut up_state = state.clone();
                up_state.assign_flat(&probe).unwrap();
                probe[i] = flat[i] - h;
                let mut down_state = state.clone();
                down_state.assign_flat(&probe).unwrap();
                let fd = (forward(&up_state) - forward(&down_state)) / (2.0 * h);
                // Relative 1e-4 with an absolute floor covering central
                // difference roundoff (machine eps * |loss| / h ~ 1e-11).
                assert!(
                    (ad[i] - fd).abs() <= 1e-4 * ad[i].abs().max(fd.abs()) + 1e-9,
                    "trial {trial} param {i}: reverse-mode {} vs fd {fd}",
                    ad[i]
                );
            }
        }
    });
}

#[test]
fn c05_jensen_bound() {
    criterion(5, "negative-term inequality", || {
        let dims = ModelDims {
            feature_dim: 2,
            hidden_dim: 4,
            num_layers: 2,
            proj_dim: 4,
            head_count: 1,
        };
        let opts = AugmentOptions::new(AugmentationStrength::new(0.2).unwrap());
        for trial in 0..100u64 {
            let mut rng = substream(50_000 + trial, "acc-jensen", &[]);
            let b = 2 + (trial % 3) as usize; // batch of 2..4
            let graphs: Vec<Graph> =
                (0..b).map(|k| random_graph(9000 + 10 * trial + k as u64, 6, 2)).collect();
            let batch = Batch::from_graphs(&graphs).unwrap();
            let state =
                ModelState::init(&dims, &mut substream(60_000 + trial, "acc-jensen-state", &[]))
                    .unwrap();
            let seed = subseed(3, "acc-jensen-aug", &[trial]);

            // Normalized projections of every kind's view.
            let mut views = Vec::with_capacity(POOL_SIZE);
            for kind in AugmentationKind::ALL {
                let view = augment_batch(&batch, kind, &opts, seed).unwrap();
                let emb = gin_encode(&state.encoder, &view).unwrap();
                let z = project(&state.heads[0], &emb).unwrap();
                let mut normalized = z.clone();
                for mut row in normalized.rows_mut() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.mapv_inplace(|v| v / norm);
                    }
                }
                views.push(normalized);
            }

            let joint = random_dist(rng.gen());
            let p1 = joint.marginal_first();
            let p2 = joint.marginal_second();

            // exp-similarity means E_{G'} exp(sim(z_i[k], z_j[m])) per (i, j, k).
            let mean_exp = |i: usize, j: usize, k: usize| -> f64 {
                let mut acc = 0.0;
                for m in 0..b {
                    let dot: f64 = (0..views[i].ncols())
                        .map(|d| views[i][[k, d]] * views[j][[m, d]])
                        .sum();
                    acc += dot.exp();
                }
                acc / b as f64
            };

            // Second-view expectation inside the log (exact) versus outside
            // (the optimized lower bound).
            let mut exact = 0.0;
            let mut approx = 0.0;
            for (i, &pi) in p1.iter().enumerate() {
                for k in 0..b {
                    let mut inner = 0.0;
                    for (j, &pj) in p2.iter().enumerate() {
                        let m = mean_exp(i, j, k);
                        inner += pj * m;
                        approx += pi * pj * m.ln() / b as f64;
                    }
                    exact += pi * inner.ln() / b as f64;
                }
            }
            assert!(
                exact >= approx - 1e-12,
                "trial {trial}: exact {exact} < approx {approx}"
            );
        }
    });
}

#[test]
fn c06_gamma_limits() {
    criterion(6, "gamma limit behavior", || {
        // Huge gamma pins the distribution to the uniform prior.
        let losses = random_losses(61);
        let gamma = 1e6;
        let mut p = random_dist(62);
        for _ in 0..50 {
            p = lower_step(&p, &losses, gamma, 1.0 / gamma);
        }
        let max_dev = p.flat().iter().map(|v| (v - 0.04).abs()).fold(0.0, f64::max);
        assert!(max_dev <= 1e-3, "max |p - 1/25| = {max_dev}");

        // Gamma 0 with a unique maximum concentrates on the argmax vertex.
        let mut values = [[0.0; POOL_SIZE]; POOL_SIZE];
        for (i, row) in values.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.05 * (i * POOL_SIZE + j) as f64 % 0.9;
            }
        }
        values[3][1] = 2.5;
        let losses = PairLossMatrix::from_values(values).unwrap();
        let alpha = 0.1;
        let mut p = random_dist(63);
        for _ in 0..(10.0 / alpha) as usize {
            p = lower_step(&p, &losses, 0.0, alpha);
        }
        assert!(p.probs()[3][1] >= 0.999, "argmax mass {}", p.probs()[3][1]);
    });
}

#[test]
fn c07_translation_invariance() {
    criterion(7, "lower step translation invariance", || {
        let mut rng = substream(7, "acc-shift", &[]);
        for trial in 0..50u64 {
            let p = random_dist(700 + trial);
            let losses = random_losses(800 + trial);
            let gamma: f64 = rng.gen_range(0.0..3.0);
            let alpha: f64 = rng.gen_range(0.01..1.0);
            let c: f64 = rng.gen_range(-5.0..5.0);
            let mut shifted = *losses.values();
            for row in shifted.iter_mut() {
                for v in row.iter_mut() {
                    *v += c;
                }
            }
            let shifted = PairLossMatrix::from_values(shifted).unwrap();
            let a = lower_step(&p, &losses, gamma, alpha);
            let b = lower_step(&p, &shifted, gamma, alpha);
            for (x, y) in a.flat().iter().zip(b.flat().iter()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y} under shift {c}");
            }
        }
    });
}

#[test]
fn c08_multi_head_isolation() {
    criterion(8, "multi-head gradient isolation", || {
        let ds = synth::cycles_vs_stars(8, 5..=9, 80).unwrap();
        let cfg = JoaoConfig {
            mode: TrainMode::JoaoV2,
            hidden_dim: 8,
            num_layers: 2,
            proj_dim: 8,
            seed: 81,
            ..JoaoConfig::default()
        };
        let dims = ModelDims {
            feature_dim: ds.feature_dim(),
            hidden_dim: cfg.hidden_dim,
            num_layers: cfg.num_layers,
            proj_dim: cfg.proj_dim,
            head_count: cfg.mode.head_count(),
        };
        let state = ModelState::init(&dims, &mut substream(82, "acc-heads", &[])).unwrap();
        assert_eq!(state.heads.len(), 5, "one projection head per pool member");

        let batch = make_batch(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        let loss_cfg = LossConfig {
            tau: cfg.tau,
            symmetric: false,
            augment: AugmentOptions::new(AugmentationStrength::new(0.2).unwrap()),
            mode: TrainMode::JoaoV2,
        };
        for (i, j) in [(0usize, 3usize), (1, 4), (2, 0)] {
            let pair = (
                AugmentationKind::from_index(i).unwrap(),
                AugmentationKind::from_index(j).unwrap(),
            );
            let before: Vec<Vec<u64>> = state
                .heads
                .iter()
                .map(|h| {
                    h.fc1.weight.iter()
                        .chain(h.fc1.bias.iter())
                        .chain(h.fc2.weight.iter())
                        .chain(h.fc2.bias.iter())
                        .map(|v| v.to_bits())
                        .collect()
                })
                .collect();
            let mut stepped = state.clone();
            let (_, grads) =
                weighted_loss(&stepped, &batch, pair, &loss_cfg, 83 + i as u64).unwrap();
            sgd_step(&mut stepped, &grads, 0.05).unwrap();
            for (k, head) in stepped.heads.iter().enumerate() {
                let after: Vec<u64> = head.fc1.weight.iter()
                    .chain(head.fc1.bias.iter())
                    .chain(head.fc2.weight.iter())
                    .chain(head.fc2.bias.iter())
                    .map(|v| v.to_bits())
                    .collect();
                if k == i || k == j {
                    assert_ne!(after, before[k], "routed head {k} should move");
                } else {
                    assert_eq!(after, before[k], "unrouted head {k} must stay bit-identical");
                }
            }
        }
    });
}

#[test]
fn c09_end_to_end_smoke() {
    criterion(9, "end-to-end pre-train and probe", || {
        let ds = synth::cycles_vs_stars(100, 6..=15, 90).unwrap();
        assert_eq!(ds.len(), 200);
        let cfg = JoaoConfig {
            mode: TrainMode::JoaoV2,
            epochs: 30,
            seed: 91,
            ..JoaoConfig::default()
        };
        let out = agd_train_silent(&cfg, &ds).unwrap();
        let table = embed_dataset(&out.state, &ds).unwrap();
        let report = linear_probe_cv(&table, 10, 92).unwrap();
        println!("  smoke probe accuracy: {:.4} +/- {:.4}", report.mean, report.std);
        assert!(
            report.mean >= 0.80,
            "10-fold probe accuracy {} below 0.80",
            report.mean
        );
    });
}

#[test]
fn c10_cli_determinism() {
    criterion(10, "byte-identical reruns", || {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("synth");
        std::fs::create_dir(&data_dir).unwrap();
        let ds = synth::cycles_vs_stars(20, 5..=9, 100).unwrap();
        common::write_tud_fixture(&data_dir, "synth", ds.graphs());

        let run = |out: &Path| {
            let status = Command::new(env!("CARGO_BIN_EXE_joao"))
                .args([
                    "pretrain",
                    "--data",
                    data_dir.to_str().unwrap(),
                    "--name",
                    "synth",
                    "--out",
                    out.to_str().unwrap(),
                    "--mode",
                    "joaov2",
                    "--epochs",
                    "3",
                    "--batch-size",
                    "8",
                    "--hidden-dim",
                    "8",
                    "--num-layers",
                    "2",
                    "--proj-dim",
                    "8",
                    "--seed",
                    "101",
                    "--checkpoint-interval",
                    "2",
                ])
                .status()
                .unwrap();
            assert!(status.success());
        };
        let out1 = tmp.path().join("run1");
        let out2 = tmp.path().join("run2");
        run(&out1);
        run(&out2);
        for file in [
            "run_log.jsonl",
            "checkpoint.bin",
            "checkpoint_epoch_2.bin",
            "selection_heatmap.csv",
            "final_distribution.csv",
        ] {
            let a = std::fs::read(out1.join(file)).unwrap();
            let b = std::fs::read(out2.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    });
}

#[test]
fn c11_reporting_scope() {
    criterion(11, "heatmap format semantics (full-scale results not gated)", || {
        // Published full-scale accuracy numbers and dataset-scale selection
        // heatmaps are out of reach on one core; what is gated here is the
        // export's format and semantics: a 5x5 CSV of percentages summing
        // to 100.
        let mut history = TrainHistory::default();
        let mut rng = substream(110, "acc-report", &[]);
        for _ in 0..10_000 {
            let i = rng.gen_range(0..POOL_SIZE);
            let j = rng.gen_range(0..POOL_SIZE);
            history.selection_counts[i][j] += 1;
        }
        let pct = selection_percentages(&history).unwrap();
        let total: f64 = pct.iter().flatten().sum();
        assert!((total - 100.0).abs() <= 1e-6);
        assert_eq!(pct.len(), POOL_SIZE);
        assert!(pct.iter().all(|row| row.len() == POOL_SIZE));
    });
}

// Augmented coverage used by several criteria: keep the synthetic dataset
// helper honest about what it generates.
#[test]
fn synthetic_dataset_shape() {
    let ds: Dataset = synth::cycles_vs_stars(100, 6..=15, 90).unwrap();
    assert_eq!(ds.len(), 200);
    assert_eq!(ds.feature_dim(), 1);
    let cycles = ds.graphs().iter().filter(|g| g.label() == Some(0)).count();
    assert_eq!(cycles, 100);
}
