//! GIN encoder, projection heads, and gradient computation.
//!
//! The encoder stacks GIN layers: each aggregates `(1 + eps) * h_v + Σ h_u`
//! over neighbors and pushes the result through a two-layer rectified MLP;
//! the graph embedding is the sum over each graph's node vectors. A
//! projection head is two affine layers with one intermediate rectification.
//! Everything is `f64` and differentiated in reverse mode on a [`Tape`].

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::ops;
use crate::rng::Stream;

/// One affine map `x @ weight + bias`; also the carrier for its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `(fan_in, fan_out)` layout.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weight = Array2::zeros((fan_in, fan_out));
        for v in weight.iter_mut() {
            *v = rng.gen_range(-s..s);
        }
        let mut bias = Array1::zeros(fan_out);
        for v in bias.iter_mut() {
            *v = rng.gen_range(-s..s);
        }
        Affine { weight, bias }
    }

    fn zeros_like(other: &Affine) -> Self {
        Affine {
            weight: Array2::zeros(other.weight.dim()),
            bias: Array1::zeros(other.bias.len()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// One GIN layer: neighbor aggregation followed by a rectified 2-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub mlp1: Affine,
    pub mlp2: Affine,
    /// Self-loop weight in the aggregation; fixed, not learned.
    pub eps: f64,
}

/// Encoder parameters: a chain of GIN layers, `D -> H -> ... -> H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<GinLayer>,
}

impl EncoderParams {
    pub fn feature_dim(&self) -> usize {
        self.layers[0].mlp1.fan_in()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().expect("non-empty").mlp2.fan_out()
    }
}

/// Projection head: two affine layers with one intermediate rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1: Affine,
    pub fc2: Affine,
}

impl HeadParams {
    pub fn input_dim(&self) -> usize {
        self.fc1.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.fan_out()
    }
}

/// Whether a run trains one shared projection head or one per
/// augmentation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Joao,
    JoaoV2,
}

impl TrainMode {
    pub fn head_count(self) -> usize {
        match self {
            TrainMode::Joao => 1,
            TrainMode::JoaoV2 => crate::augment::POOL_SIZE,
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Joao => f.write_str("joao"),
            TrainMode::JoaoV2 => f.write_str("joaov2"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joao" => Ok(TrainMode::Joao),
            "joaov2" | "joao_v2" | "joao-v2" => Ok(TrainMode::JoaoV2),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Model architecture summary; also the checkpoint header payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub proj_dim: usize,
    pub head_count: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("proj_dim", self.proj_dim),
            ("head_count", self.head_count),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Encoder plus its projection heads (one for the shared-head mode, one per
/// augmentation kind otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub heads: Vec<HeadParams>,
}

impl ModelState {
    /// Seeded initialization: weights uniform in `[-s, s]` with
    /// `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(dims: &ModelDims, rng: &mut Stream) -> Result<Self> {
        dims.validate()?;
        let mut layers = Vec::with_capacity(dims.num_layers);
        for l in 0..dims.num_layers {
            let fan_in = if l == 0 { dims.feature_dim } else { dims.hidden_dim };
            layers.push(GinLayer {
                mlp1: Affine::init(fan_in, dims.hidden_dim, rng),
                mlp2: Affine::init(dims.hidden_dim, dims.hidden_dim, rng),
                eps: 0.0,
            });
        }
        let heads = (0..dims.head_count)
            .map(|_| HeadParams {
                fc1: Affine::init(dims.hidden_dim, dims.hidden_dim, rng),
                fc2: Affine::init(dims.hidden_dim, dims.proj_dim, rng),
            })
            .collect();
        Ok(ModelState {
            encoder: EncoderParams { layers },
            heads,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.encoder.feature_dim(),
            hidden_dim: self.encoder.hidden_dim(),
            num_layers: self.encoder.layers.len(),
            proj_dim: self.heads[0].output_dim(),
            head_count: self.heads.len(),
        }
    }

    /// Every parameter tensor in canonical order, as `(name, rows, cols)`
    /// with biases as single rows. This order fixes the checkpoint layout.
    pub fn param_specs(&self) -> Vec<(String, usize, usize)> {
        let mut specs = Vec::new();
        let affine = |name: String, a: &Affine, specs: &mut Vec<(String, usize, usize)>| {
            specs.push((format!("{name}.weight"), a.fan_in(), a.fan_out()));
            specs.push((format!("{name}.bias"), 1, a.bias.len()));
        };
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            affine(format!("encoder.layer{l}.mlp1"), &layer.mlp1, &mut specs);
            affine(format!("encoder.layer{l}.mlp2"), &layer.mlp2, &mut specs);
        }
        for (k, head) in self.heads.iter().enumerate() {
            affine(format!("head{k}.fc1"), &head.fc1, &mut specs);
            affine(format!("head{k}.fc2"), &head.fc2, &mut specs);
        }
        specs
    }

    fn for_each_affine<'a>(&'a self, mut f: impl FnMut(&'a Affine)) {
        for layer in &self.encoder.layers {
            f(&layer.mlp1);
            f(&layer.mlp2);
        }
        for head in &self.heads {
            f(&head.fc1);
            f(&head.fc2);
        }
    }

    fn for_each_affine_mut(&mut self, mut f: impl FnMut(&mut Affine)) {
        for layer in &mut self.encoder.layers {
            f(&mut layer.mlp1);
            f(&mut layer.mlp2);
        }
        for head in &mut self.heads {
            f(&mut head.fc1);
            f(&mut head.fc2);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_affine(|a| n += a.param_count());
        n
    }

    /// All parameters in canonical order (row-major weights, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_affine(|a| {
            out.extend(a.weight.iter());
            out.extend(a.bias.iter());
        });
        out
    }

    /// Overwrite all parameters from a canonical-order flat vector.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut cursor = 0usize;
        self.for_each_affine_mut(|a| {
            for v in a.weight.iter_mut() {
                *v = flat[cursor];
                cursor += 1;
            }
            for v in a.bias.iter_mut() {
                *v = flat[cursor];
                cursor += 1;
            }
        });
        Ok(())
    }
}

/// Per-parameter gradients, shape-congruent with a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub encoder: Vec<(Affine, Affine)>,
    pub heads: Vec<(Affine, Affine)>,
}

impl GradientBundle {
    pub fn zeros_like(state: &ModelState) -> Self {
        GradientBundle {
            encoder: state
                .encoder
                .layers
                .iter()
                .map(|l| (Affine::zeros_like(&l.mlp1), Affine::zeros_like(&l.mlp2)))
                .collect(),
            heads: state
                .heads
                .iter()
                .map(|h| (Affine::zeros_like(&h.fc1), Affine::zeros_like(&h.fc2)))
                .collect(),
        }
    }

    pub fn congruent_with(&self, state: &ModelState) -> bool {
        self.encoder.len() == state.encoder.layers.len()
            && self.heads.len() == state.heads.len()
            && self
                .encoder
                .iter()
                .zip(&state.encoder.layers)
                .all(|(g, l)| {
                    g.0.weight.dim() == l.mlp1.weight.dim() && g.1.weight.dim() == l.mlp2.weight.dim()
                })
            && self.heads.iter().zip(&state.heads).all(|(g, h)| {
                g.0.weight.dim() == h.fc1.weight.dim() && g.1.weight.dim() == h.fc2.weight.dim()
            })
    }

    /// Gradients in the same canonical order as [`ModelState::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, b) in self.encoder.iter().chain(self.heads.iter()) {
            for part in [a, b] {
                out.extend(part.weight.iter());
                out.extend(part.bias.iter());
            }
        }
        out
    }

    pub fn scale(&mut self, c: f64) {
        for (a, b) in self.encoder.iter_mut().chain(self.heads.iter_mut()) {
            for part in [a, b] {
                part.weight.mapv_inplace(|v| v * c);
                part.bias.mapv_inplace(|v| v * c);
            }
        }
    }
}

/// One gradient-descent update: `theta <- theta - lr * grad`, elementwise.
pub fn sgd_step(state: &mut ModelState, grads: &GradientBundle, lr: f64) -> Result<()> {
    if !grads.congruent_with(state) {
        return Err(Error::DimensionMismatch(
            "gradient bundle does not match model shape".into(),
        ));
    }
    let update = |p: &mut Affine, g: &Affine| {
        p.weight.zip_mut_with(&g.weight, |w, &gw| *w -= lr * gw);
        p.bias.zip_mut_with(&g.bias, |b, &gb| *b -= lr * gb);
    };
    for (layer, g) in state.encoder.layers.iter_mut().zip(&grads.encoder) {
        update(&mut layer.mlp1, &g.0);
        update(&mut layer.mlp2, &g.1);
    }
    for (head, g) in state.heads.iter_mut().zip(&grads.heads) {
        update(&mut head.fc1, &g.0);
        update(&mut head.fc2, &g.1);
    }
    Ok(())
}

fn check_feature_dim(expected: usize, batch: &Batch) -> Result<()> {
    if batch.feature_dim() != expected {
        return Err(Error::DimensionMismatch(format!(
            "batch feature width {} != encoder input width {expected}",
            batch.feature_dim()
        )));
    }
    Ok(())
}

/// Per-graph embeddings (`num_graphs x hidden_dim`), no gradients.
pub fn gin_encode(encoder: &EncoderParams, batch: &Batch) -> Result<Array2<f64>> {
    check_feature_dim(encoder.feature_dim(), batch)?;
    let topo = batch.topology();
    let mut h = batch.merged().features().clone();
    for layer in &encoder.layers {
        let agg = ops::neighbor_sum(&h, &topo, layer.eps);
        let z = ops::relu(&ops::linear(&agg, &layer.mlp1.weight, &layer.mlp1.bias));
        h = ops::relu(&ops::linear(&z, &layer.mlp2.weight, &layer.mlp2.bias));
    }
    Ok(ops::segment_sum(&h, &topo))
}

/// Projection of embeddings through one head, no gradients.
pub fn project(head: &HeadParams, emb: &Array2<f64>) -> Result<Array2<f64>> {
    if emb.ncols() != head.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} != head input width {}",
            emb.ncols(),
            head.input_dim()
        )));
    }
    let z = ops::relu(&ops::linear(emb, &head.fc1.weight, &head.fc1.bias));
    Ok(ops::linear(&z, &head.fc2.weight, &head.fc2.bias))
}

struct AffineNodes {
    w: NodeId,
    b: NodeId,
}

/// Tape leaves for every model parameter.
pub struct TapeBinding {
    layers: Vec<(AffineNodes, AffineNodes, f64)>,
    heads: Vec<(AffineNodes, AffineNodes)>,
    feature_dim: usize,
}

impl TapeBinding {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

/// Insert every parameter of `state` into `tape` as a leaf.
pub fn bind_model(tape: &mut Tape, state: &ModelState) -> TapeBinding {
    let bind_affine = |tape: &mut Tape, a: &Affine| AffineNodes {
        w: tape.leaf(a.weight.clone()),
        b: tape.leaf(
            a.bias
                .clone()
                .into_shape_with_order((1, a.bias.len()))
                .expect("row reshape"),
        ),
    };
    let layers = state
        .encoder
        .layers
        .iter()
        .map(|l| {
            (
                bind_affine(tape, &l.mlp1),
                bind_affine(tape, &l.mlp2),
                l.eps,
            )
        })
        .collect();
    let heads = state
        .heads
        .iter()
        .map(|h| (bind_affine(tape, &h.fc1), bind_affine(tape, &h.fc2)))
        .collect();
    TapeBinding {
        layers,
        heads,
        feature_dim: state.encoder.feature_dim(),
    }
}

/// Taped forward pass of the encoder over a batch.
pub fn tape_encode(tape: &mut Tape, binding: &TapeBinding, batch: &Batch) -> Result<NodeId> {
    check_feature_dim(binding.feature_dim, batch)?;
    let topo = batch.topology();
    let mut h = tape.leaf(batch.merged().features().clone());
    for (mlp1, mlp2, eps) in &binding.layers {
        let agg = tape.neighbor_sum(h, std::rc::Rc::clone(&topo), *eps);
        let z1 = tape.affine(agg, mlp1.w, mlp1.b);
        let r1 = tape.relu(z1);
        let z2 = tape.affine(r1, mlp2.w, mlp2.b);
        h = tape.relu(z2);
    }
    Ok(tape.segment_sum(h, topo))
}

/// Taped forward pass of projection head `head`.
pub fn tape_project(
    tape: &mut Tape,
    binding: &TapeBinding,
    head: usize,
    emb: NodeId,
) -> Result<NodeId> {
    let (fc1, fc2) = binding.heads.get(head).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "head index {head} out of range for {} heads",
            binding.heads.len()
        ))
    })?;
    let z = tape.affine(emb, fc1.w, fc1.b);
    let r = tape.relu(z);
    Ok(tape.affine(r, fc2.w, fc2.b))
}

/// Evaluate a loss built from taped forward passes and return its value
/// together with gradients for every model parameter (zero for parameters
/// the loss never touched).
pub fn loss_and_grad<F>(state: &ModelState, build: F) -> Result<(f64, GradientBundle)>
where
    F: FnOnce(&mut Tape, &TapeBinding) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let binding = bind_model(&mut tape, state);
    let loss = build(&mut tape, &binding)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let mut bundle = GradientBundle::zeros_like(state);
    let take = |grads: &[Option<Array2<f64>>], nodes: &AffineNodes, slot: &mut Affine| {
        if let Some(gw) = &grads[nodes.w.0] {
            slot.weight.assign(gw);
        }
        if let Some(gb) = &grads[nodes.b.0] {
            slot.bias.assign(&gb.row(0));
        }
    };
    for (nodes, slot) in binding.layers.iter().zip(bundle.encoder.iter_mut()) {
        take(&grads, &nodes.0, &mut slot.0);
        take(&grads, &nodes.1, &mut slot.1);
    }
    for (nodes, slot) in binding.heads.iter().zip(bundle.heads.iter_mut()) {
        take(&grads, &nodes.0, &mut slot.0);
        take(&grads, &nodes.1, &mut slot.1);
    }
    Ok((value, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn dims(feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            hidden_dim: 4,
            num_layers: 2,
            proj_dim: 3,
            head_count: 1,
        }
    }

    fn small_graph(seed: u64, n: usize, d: usize) -> Graph {
        let mut rng = substream(seed, "nn-test-graph", &[]);
        let mut edges = std::collections::BTreeSet::new();
        for _ in 0..2 * n {
            let a = rng.gen_range(0..n) as u32;
            let b = rng.gen_range(0..n) as u32;
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let mut features = Array2::zeros((n, d));
        for v in features.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        Graph::new(n, edges.into_iter().collect(), features, None).unwrap()
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let mut rng = substream(0, "zero", &[]);
        let mut state = ModelState::init(&dims(3), &mut rng).unwrap();
        let flat = vec![0.0; state.param_count()];
        state.assign_flat(&flat).unwrap();
        let g = small_graph(1, 5, 3);
        let batch = Batch::from_graphs(std::slice::from_ref(&g)).unwrap();
        let emb = gin_encode(&state.encoder, &batch).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
        let proj = project(&state.heads[0], &emb).unwrap();
        assert!(proj.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut rng = substream(3, "perm", &[]);
        let state = ModelState::init(&dims(2), &mut rng).unwrap();
        let g = small_graph(7, 8, 2);

        // Relabel nodes by a fixed permutation.
        let perm: Vec<u32> = vec![3, 0, 6, 1, 7, 2, 5, 4];
        let edges: Vec<(u32, u32)> = g
            .edges()
            .iter()
            .map(|&(a, b)| {
                let (pa, pb) = (perm[a as usize], perm[b as usize]);
                (pa.min(pb), pa.max(pb))
            })
            .collect();
        let mut features = Array2::zeros(g.features().dim());
        for v in 0..8 {
            for d in 0..2 {
                features[[perm[v] as usize, d]] = g.features()[[v, d]];
            }
        }
        let relabeled = Graph::new(8, edges, features, None).unwrap();

        let batch = Batch::from_graphs(&[g, relabeled]).unwrap();
        let emb = gin_encode(&state.encoder, &batch).unwrap();
        for d in 0..emb.ncols() {
            assert_eq!(
                emb[[0, d]].to_bits(),
                emb[[1, d]].to_bits(),
                "dim {d} differs"
            );
        }
    }

    #[test]
    fn duplicate_graphs_get_identical_rows() {
        let mut rng = substream(5, "dup", &[]);
        let state = ModelState::init(&dims(2), &mut rng).unwrap();
        let g = small_graph(9, 6, 2);
        let batch = Batch::from_graphs(&[g.clone(), g]).unwrap();
        let emb = gin_encode(&state.encoder, &batch).unwrap();
        for d in 0..emb.ncols() {
            assert_eq!(emb[[0, d]].to_bits(), emb[[1, d]].to_bits());
        }
    }

    #[test]
    fn batched_forward_equals_individual_forward() {
        let mut rng = substream(6, "concat", &[]);
        let state = ModelState::init(&dims(3), &mut rng).unwrap();
        let graphs: Vec<Graph> = (0..4).map(|i| small_graph(20 + i, 5 + i as usize, 3)).collect();
        let batch = Batch::from_graphs(&graphs).unwrap();
        let all = gin_encode(&state.encoder, &batch).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            let single = Batch::from_graphs(std::slice::from_ref(g)).unwrap();
            let one = gin_encode(&state.encoder, &single).unwrap();
            for d in 0..all.ncols() {
                assert_eq!(all[[i, d]].to_bits(), one[[0, d]].to_bits());
            }
        }
    }

    #[test]
    fn head_projects_to_output_width_and_identity_regime() {
        let mut rng = substream(8, "head", &[]);
        let state = ModelState::init(&dims(2), &mut rng).unwrap();
        let emb = array![[0.5, 0.1, 0.9, 0.2], [0.3, 0.7, 0.4, 0.6]];
        let out = project(&state.heads[0], &emb).unwrap();
        assert_eq!(out.dim(), (2, 3));

        // Identity-configured square layers pass non-negative inputs through.
        let eye = Array2::eye(4);
        let id_head = HeadParams {
            fc1: Affine { weight: eye.clone(), bias: Array1::zeros(4) },
            fc2: Affine { weight: eye, bias: Array1::zeros(4) },
        };
        let out = project(&id_head, &emb).unwrap();
        assert_eq!(out, emb);
    }

    #[test]
    fn project_rejects_width_mismatch() {
        let mut rng = substream(8, "head", &[]);
        let state = ModelState::init(&dims(2), &mut rng).unwrap();
        assert!(project(&state.heads[0], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn sgd_step_zero_lr_and_zero_grad_are_identity() {
        let mut rng = substream(11, "sgd", &[]);
        let state0 = ModelState::init(&dims(2), &mut rng).unwrap();

        let mut state = state0.clone();
        let mut grads = GradientBundle::zeros_like(&state);
        grads.encoder[0].0.weight[[0, 0]] = 3.0;
        sgd_step(&mut state, &grads, 0.0).unwrap();
        assert_eq!(state.flatten(), state0.flatten());

        let mut state = state0.clone();
        let zeros = GradientBundle::zeros_like(&state);
        sgd_step(&mut state, &zeros, 0.5).unwrap();
        assert_eq!(state.flatten(), state0.flatten());
    }

    #[test]
    fn sgd_step_matches_analytic_update() {
        // One parameter theta = 1 with grad 2*theta: step 0.1 -> 0.8.
        let mut rng = substream(12, "sgd2", &[]);
        let mut state = ModelState::init(
            &ModelDims {
                feature_dim: 1,
                hidden_dim: 1,
                num_layers: 1,
                proj_dim: 1,
                head_count: 1,
            },
            &mut rng,
        )
        .unwrap();
        let mut flat = vec![0.0; state.param_count()];
        flat[0] = 1.0;
        state.assign_flat(&flat).unwrap();
        let mut grads = GradientBundle::zeros_like(&state);
        grads.encoder[0].0.weight[[0, 0]] = 2.0;
        sgd_step(&mut state, &grads, 0.1).unwrap();
        assert_relative_eq!(state.encoder.layers[0].mlp1.weight[[0, 0]], 0.8);
    }

    #[test]
    fn loss_and_grad_zero_state_and_linearity() {
        let mut rng = substream(13, "lg", &[]);
        let mut state = ModelState::init(&dims(2), &mut rng).unwrap();
        state.assign_flat(&vec![0.0; state.param_count()]).unwrap();
        let g = small_graph(30, 4, 2);
        let batch = Batch::from_graphs(std::slice::from_ref(&g)).unwrap();

        let (loss, grads) = loss_and_grad(&state, |tape, binding| {
            let emb = tape_encode(tape, binding, &batch)?;
            Ok(tape.sum_squares(emb))
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&v| v == 0.0));

        // Scaling the loss scales every gradient entry.
        let mut rng = substream(14, "lg2", &[]);
        let state = ModelState::init(&dims(2), &mut rng).unwrap();
        let run = |factor: f64| {
            loss_and_grad(&state, |tape, binding| {
                let emb = tape_encode(tape, binding, &batch)?;
                let sq = tape.sum_squares(emb);
                Ok(tape.scale(sq, factor))
            })
            .unwrap()
        };
        let (l1, g1) = run(1.0);
        let (l2, g2) = run(2.0);
        assert_relative_eq!(l2, 2.0 * l1, max_relative = 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten().iter()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn full_pipeline_gradcheck_against_finite_differences() {
        // encode -> project -> contrastive loss on tiny instances.
        for trial in 0..4u64 {
            let mut rng = substream(100 + trial, "gradcheck", &[]);
            let state = ModelState::init(&dims(2), &mut rng).unwrap();
            let g1 = small_graph(200 + trial, 4, 2);
            let g2 = small_graph(300 + trial, 5, 2);
            let batch = Batch::from_graphs(&[g1, g2]).unwrap();

            let forward = |s: &ModelState| -> f64 {
                let emb = gin_encode(&s.encoder, &batch).unwrap();
                let z1 = project(&s.heads[0], &emb).unwrap();
                let z2 = project(&s.heads[0], &emb.mapv(|v| v * 1.3)).unwrap();
                let pair = crate::contrastive::ViewPair::new(z1, z2).unwrap();
                crate::contrastive::nt_xent(&pair, 0.8, false).unwrap()
            };

            let (loss, grads) = loss_and_grad(&state, |tape, binding| {
                let emb = tape_encode(tape, binding, &batch)?;
                let emb2 = tape.scale(emb, 1.3);
                let z1 = tape_project(tape, binding, 0, emb)?;
                let z2 = tape_project(tape, binding, 0, emb2)?;
                tape.nt_xent(z1, z2, 0.8, false)
            })
            .unwrap();
            assert_relative_eq!(loss, forward(&state), max_relative = 1e-12);

            let flat = state.flatten();
            let ad = grads.flatten();
            let h = 1e-5;
            for (i, &theta) in flat.iter().enumerate() {
                let mut up = state.clone();
                let mut probe = flat.clone();
                probe[i] = theta + h;
                up.assign_flat(&probe).unwrap();
                let mut down = state.clone();
                probe[i] = theta - h;
                down.assign_flat(&probe).unwrap();
                let fd = (forward(&up) - forward(&down)) / (2.0 * h);
                assert!(
                    (ad[i] - fd).abs() <= 1e-4 * ad[i].abs().max(fd.abs()) + 1e-9,
                    "trial {trial} param {i}: reverse-mode {} vs fd {fd}",
                    ad[i]
                );
            }
        }
    }
}
