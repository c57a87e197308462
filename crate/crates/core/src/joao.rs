//! Bi-level min-max training: alternating gradient descent over model
//! parameters (upper level, minimization) and the augmentation-pair
//! distribution (lower level, projected gradient ascent on the simplex).
//!
//! The lower-level objective is `psi(p) = Σ p_ij L_ij - (γ/2) Σ (p_ij -
//! prior)^2`, strongly concave for γ > 0; its ascent step is projected back
//! onto the probability simplex by bisecting for the shift that makes the
//! clipped entries sum to one.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    sample_pair, AugmentOptions, AugmentationKind, AugmentationStrength, EdgePertMode,
    PairDistribution, POOL_SIZE,
};
use crate::contrastive::{pair_loss_matrix, weighted_loss, LossConfig, PairLossMatrix};
use crate::error::{Error, Result};
use crate::graph::{make_batch, Dataset};
use crate::nn::{sgd_step, ModelDims, ModelState, TrainMode};
use crate::rng::{subseed, substream};
use crate::runlog::{RunEvent, TrainObserver};

const CELLS: usize = POOL_SIZE * POOL_SIZE;
const UNIFORM_PRIOR: f64 = 1.0 / CELLS as f64;

/// When the distribution update runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerCadence {
    /// One update at the end of every epoch.
    PerEpoch,
    /// One update every `n` minibatches.
    EveryMinibatches(usize),
}

/// Which minibatch feeds the loss matrix of a lower-level update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerBatchSource {
    /// Sample a fresh minibatch for the update.
    Fresh,
    /// Reuse the most recent training minibatch.
    Current,
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JoaoConfig {
    pub mode: TrainMode,
    /// Prior-distance weight γ in the lower-level objective.
    pub gamma: f64,
    /// Upper-level (parameter) learning rate.
    pub upper_lr: f64,
    /// Lower-level (distribution) learning rate.
    pub lower_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lower_cadence: LowerCadence,
    pub lower_batch: LowerBatchSource,
    /// Restrict selection to pairs of these kinds; `None` is the full pool.
    pub pool: Option<Vec<AugmentationKind>>,
    pub strength: f64,
    pub tau: f64,
    pub symmetric_loss: bool,
    pub edge_pert_mode: EdgePertMode,
    pub seed: u64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub proj_dim: usize,
}

impl Default for JoaoConfig {
    fn default() -> Self {
        JoaoConfig {
            mode: TrainMode::Joao,
            gamma: 0.1,
            upper_lr: 0.01,
            lower_lr: 0.1,
            epochs: 20,
            batch_size: 32,
            lower_cadence: LowerCadence::PerEpoch,
            lower_batch: LowerBatchSource::Fresh,
            pool: None,
            strength: 0.2,
            tau: 1.0,
            symmetric_loss: false,
            edge_pert_mode: EdgePertMode::Rewire,
            seed: 0,
            hidden_dim: 32,
            num_layers: 3,
            proj_dim: 32,
        }
    }
}

impl JoaoConfig {
    /// Collect every validation problem; empty means the config is usable.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            problems.push(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !self.upper_lr.is_finite() || self.upper_lr <= 0.0 {
            problems.push(format!("upper_lr must be > 0, got {}", self.upper_lr));
        }
        if !self.lower_lr.is_finite() || self.lower_lr <= 0.0 {
            problems.push(format!("lower_lr must be > 0, got {}", self.lower_lr));
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            problems.push(format!(
                "batch_size must be >= 2 (contrastive loss needs negatives), got {}",
                self.batch_size
            ));
        }
        if let LowerCadence::EveryMinibatches(n) = self.lower_cadence {
            if n == 0 {
                problems.push("lower cadence must be >= 1 minibatch".into());
            }
        }
        if let Some(pool) = &self.pool {
            if pool.is_empty() {
                problems.push("pool mask must name at least one kind".into());
            }
        }
        if !(0.0..1.0).contains(&self.strength) {
            problems.push(format!("strength must lie in [0, 1), got {}", self.strength));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            problems.push(format!("tau must be > 0, got {}", self.tau));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            tau: self.tau,
            symmetric: self.symmetric_loss,
            augment: AugmentOptions {
                strength: AugmentationStrength::new(self.strength)?,
                edge_pert_mode: self.edge_pert_mode,
                mask_vector: None,
            },
            mode: self.mode,
        })
    }

    fn model_dims(&self, feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            proj_dim: self.proj_dim,
            head_count: self.mode.head_count(),
        }
    }
}

/// Allowed cells of the pair matrix under a pool restriction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    allowed: [[bool; POOL_SIZE]; POOL_SIZE],
}

impl PoolMask {
    pub fn full() -> Self {
        PoolMask {
            allowed: [[true; POOL_SIZE]; POOL_SIZE],
        }
    }

    /// Allow exactly the pairs whose both kinds are in `kinds`.
    pub fn from_kinds(kinds: &[AugmentationKind]) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("empty pool mask".into()));
        }
        let mut member = [false; POOL_SIZE];
        for &k in kinds {
            member[k.index()] = true;
        }
        let mut allowed = [[false; POOL_SIZE]; POOL_SIZE];
        for i in 0..POOL_SIZE {
            for j in 0..POOL_SIZE {
                allowed[i][j] = member[i] && member[j];
            }
        }
        Ok(PoolMask { allowed })
    }

    pub fn is_allowed(&self, i: AugmentationKind, j: AugmentationKind) -> bool {
        self.allowed[i.index()][j.index()]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().flatten().filter(|&&a| a).count()
    }

    /// Uniform distribution over the allowed cells.
    pub fn uniform_distribution(&self) -> PairDistribution {
        let p = 1.0 / self.allowed_count() as f64;
        let mut flat = [0.0; CELLS];
        for (cell, allowed) in flat.iter_mut().zip(self.allowed.iter().flatten()) {
            if *allowed {
                *cell = p;
            }
        }
        PairDistribution::from_flat_unchecked(&flat)
    }
}

/// Squared Euclidean distance from the uniform prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceToPrior(f64);

impl DistanceToPrior {
    pub fn of(p: &PairDistribution) -> Self {
        let d = p
            .flat()
            .iter()
            .map(|&v| (v - UNIFORM_PRIOR) * (v - UNIFORM_PRIOR))
            .sum();
        DistanceToPrior(d)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Lower-level objective: expected loss under `p` minus the weighted squared
/// distance to the uniform prior.
pub fn psi(p: &PairDistribution, losses: &PairLossMatrix, gamma: f64) -> f64 {
    crate::contrastive::expected_loss(p, losses) - 0.5 * gamma * DistanceToPrior::of(p).value()
}

/// Gradient of [`psi`] in `p`: entry `(i, j)` is `L_ij - γ (p_ij - 1/25)`.
pub fn psi_grad(
    p: &PairDistribution,
    losses: &PairLossMatrix,
    gamma: f64,
) -> [[f64; POOL_SIZE]; POOL_SIZE] {
    let mut out = [[0.0; POOL_SIZE]; POOL_SIZE];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = losses.values()[i][j] - gamma * (p.probs()[i][j] - UNIFORM_PRIOR);
        }
    }
    out
}

/// In-place Euclidean projection of `values` onto the probability simplex:
/// find the root mu of `Σ (v - mu)_+ = 1` by bisection, then clip.
fn project_onto_simplex(values: &mut [f64]) {
    debug_assert!(!values.is_empty());
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lo = min - 1.0;
    let mut hi = max;
    // h(mu) = Σ (v - mu)_+ - 1 is non-increasing; h(lo) >= n - 1 >= 0 and
    // h(hi) = -1 < 0.
    for _ in 0..200 {
        if hi - lo <= 1e-13 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let sum: f64 = values.iter().map(|&v| (v - mid).max(0.0)).sum();
        if sum > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    for v in values.iter_mut() {
        *v = (*v - mu).max(0.0);
    }
}

/// Euclidean projection of a 25-vector onto the probability simplex.
pub fn project_simplex(b: &[f64; CELLS]) -> PairDistribution {
    let mut values = *b;
    project_onto_simplex(&mut values);
    PairDistribution::from_flat_unchecked(&values)
}

/// One projected gradient-ascent step on `psi`, restricted to the allowed
/// cells of `mask` (forbidden cells stay at zero mass; the prior over the
/// allowed cells is uniform on them).
pub fn lower_step_masked(
    p: &PairDistribution,
    losses: &PairLossMatrix,
    gamma: f64,
    lower_lr: f64,
    mask: &PoolMask,
) -> PairDistribution {
    let allowed = mask.allowed_count();
    let prior = 1.0 / allowed as f64;
    let p_flat = p.flat();
    let l_flat = losses.flat();
    let mut active = Vec::with_capacity(allowed);
    let mut positions = Vec::with_capacity(allowed);
    for (cell, ok) in mask.allowed.iter().flatten().enumerate() {
        if *ok {
            let grad = l_flat[cell] - gamma * (p_flat[cell] - prior);
            active.push(p_flat[cell] + lower_lr * grad);
            positions.push(cell);
        }
    }
    project_onto_simplex(&mut active);
    let mut out = [0.0; CELLS];
    for (&cell, &v) in positions.iter().zip(active.iter()) {
        out[cell] = v;
    }
    PairDistribution::from_flat_unchecked(&out)
}

/// One projected gradient-ascent step on `psi` over the full pool:
/// `project(p + α'' ∇psi(p))`.
pub fn lower_step(
    p: &PairDistribution,
    losses: &PairLossMatrix,
    gamma: f64,
    lower_lr: f64,
) -> PairDistribution {
    lower_step_masked(p, losses, gamma, lower_lr, &PoolMask::full())
}

/// The projection heads the two views of a sampled pair route through:
/// indices `(i, j)` in the multi-head mode, the single shared head twice
/// otherwise. Errors when the state's head count does not match the mode.
pub fn route_heads(
    mode: TrainMode,
    pair: (AugmentationKind, AugmentationKind),
    state: &ModelState,
) -> Result<(usize, usize)> {
    let expected = mode.head_count();
    if state.heads.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{mode} mode expects {expected} heads, state has {}",
            state.heads.len()
        )));
    }
    Ok(match mode {
        TrainMode::Joao => (0, 0),
        TrainMode::JoaoV2 => (pair.0.index(), pair.1.index()),
    })
}

/// Distribution snapshot taken after one lower-level update.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSnapshot {
    /// 1-based lower-step counter.
    pub step: usize,
    pub dist: PairDistribution,
}

/// What a training run records.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Mean contrastive loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub snapshots: Vec<DistributionSnapshot>,
    /// How often each ordered pair was sampled, in kind order.
    pub selection_counts: [[u64; POOL_SIZE]; POOL_SIZE],
}

impl TrainHistory {
    pub fn total_samples(&self) -> u64 {
        self.selection_counts.iter().flatten().sum()
    }
}

/// Result of a training run.
pub struct TrainOutput {
    pub state: ModelState,
    pub distribution: PairDistribution,
    pub history: TrainHistory,
}

/// Alternating gradient descent.
///
/// Starts from the uniform distribution (restricted to the pool mask) and a
/// seeded parameter initialization. Every epoch walks seeded-shuffled
/// minibatches: each samples a pair from the current distribution, takes one
/// parameter step on its loss, and, at the configured cadence, a loss matrix
/// is evaluated and the distribution takes one projected ascent step.
/// Minibatches smaller than 2 graphs are skipped.
pub fn agd_train(
    cfg: &JoaoConfig,
    ds: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.validate()
        .map_err(|problems| Error::InvalidArgument(problems.join("; ")))?;
    if ds.len() < 2 {
        return Err(Error::InvalidArgument(
            "training needs a dataset of at least 2 graphs".into(),
        ));
    }
    let mask = match &cfg.pool {
        Some(kinds) => PoolMask::from_kinds(kinds)?,
        None => PoolMask::full(),
    };
    let loss_cfg = cfg.loss_config()?;
    let mut state = ModelState::init(
        &cfg.model_dims(ds.feature_dim()),
        &mut substream(cfg.seed, "init", &[]),
    )?;
    let mut dist = mask.uniform_distribution();
    let mut history = TrainHistory::default();

    let mut global_step = 0usize;
    let mut lower_steps = 0usize;
    let mut last_chunk: Vec<usize> = Vec::new();

    let do_lower_step = |state: &ModelState,
                             dist: &mut PairDistribution,
                             lower_steps: &mut usize,
                             history: &mut TrainHistory,
                             observer: &mut dyn TrainObserver,
                             last_chunk: &[usize]|
     -> Result<()> {
        *lower_steps += 1;
        let n = *lower_steps;
        let indices: Vec<usize> = match cfg.lower_batch {
            LowerBatchSource::Fresh => {
                let take = cfg.batch_size.min(ds.len());
                let mut rng = substream(cfg.seed, "lower-batch", &[n as u64]);
                rand::seq::index::sample(&mut rng, ds.len(), take).into_vec()
            }
            LowerBatchSource::Current => last_chunk.to_vec(),
        };
        let batch = make_batch(ds, &indices)?;
        let seed = subseed(cfg.seed, "lower-augment", &[n as u64]);
        let losses = pair_loss_matrix(state, &batch, &loss_cfg, seed)?;
        *dist = lower_step_masked(dist, &losses, cfg.gamma, cfg.lower_lr, &mask);
        dist.validate()?;
        history.snapshots.push(DistributionSnapshot {
            step: n,
            dist: dist.clone(),
        });
        observer.on_event(&RunEvent::LowerStep {
            step: n,
            loss_matrix: losses.flat().to_vec(),
            dist: dist.flat().to_vec(),
        })
    };

    for epoch in 0..cfg.epochs {
        let mut indices: Vec<usize> = (0..ds.len()).collect();
        indices.shuffle(&mut substream(cfg.seed, "shuffle", &[epoch as u64]));

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for (mb, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            last_chunk = chunk.to_vec();
            let batch = make_batch(ds, chunk)?;
            let pair = sample_pair(
                &dist,
                &mut substream(cfg.seed, "pair", &[epoch as u64, mb as u64]),
            )?;
            history.selection_counts[pair.0.index()][pair.1.index()] += 1;
            let aug_seed = subseed(cfg.seed, "upper-augment", &[epoch as u64, mb as u64]);
            let (loss, grads) =
                weighted_loss(&state, &batch, pair, &loss_cfg, aug_seed).map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} (epoch {epoch}, minibatch {mb}, pair {} + {})",
                        pair.0, pair.1
                    )),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, minibatch {mb}"
                )));
            }
            sgd_step(&mut state, &grads, cfg.upper_lr)?;
            observer.on_event(&RunEvent::PairSampled {
                epoch,
                step: global_step,
                pair: [pair.0.index(), pair.1.index()],
                loss,
            })?;
            epoch_loss_sum += loss;
            epoch_batches += 1;
            global_step += 1;

            if let LowerCadence::EveryMinibatches(k) = cfg.lower_cadence {
                if global_step.is_multiple_of(k) {
                    do_lower_step(
                        &state,
                        &mut dist,
                        &mut lower_steps,
                        &mut history,
                        observer,
                        &last_chunk,
                    )?;
                }
            }
        }
        if epoch_batches == 0 {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} produced no usable minibatch (dataset {} graphs, batch size {})",
                ds.len(),
                cfg.batch_size
            )));
        }
        let mean = epoch_loss_sum / epoch_batches as f64;
        history.epoch_loss.push(mean);
        observer.on_event(&RunEvent::EpochLoss { epoch, loss: mean })?;

        if cfg.lower_cadence == LowerCadence::PerEpoch {
            do_lower_step(
                &state,
                &mut dist,
                &mut lower_steps,
                &mut history,
                observer,
                &last_chunk,
            )?;
        }
        observer.on_epoch_end(epoch, &state)?;
    }

    Ok(TrainOutput {
        state,
        distribution: dist,
        history,
    })
}

/// [`agd_train`] without logging; mostly for tests and library use.
pub fn agd_train_silent(cfg: &JoaoConfig, ds: &Dataset) -> Result<TrainOutput> {
    agd_train(cfg, ds, &mut crate::runlog::NullObserver)
}
