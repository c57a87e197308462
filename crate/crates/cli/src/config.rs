//! Flat key-value config files and flag merging.
//!
//! A config file holds `key = value` lines (`#` starts a comment). Every key
//! is optional; command-line flags override file values, which override the
//! built-in defaults. `JOAO_SEED` is the seed fallback when neither a flag
//! nor the file sets one.

use std::path::Path;

use joao_core::augment::{AugmentationKind, EdgePertMode};
use joao_core::joao::{JoaoConfig, LowerBatchSource, LowerCadence};
use joao_core::nn::TrainMode;

use crate::CliError;

/// Values a config file (or the flag set) may provide.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<TrainMode>,
    pub gamma: Option<f64>,
    pub upper_lr: Option<f64>,
    pub lower_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lower_cadence: Option<LowerCadence>,
    pub lower_batch: Option<LowerBatchSource>,
    pub pool: Option<Option<Vec<AugmentationKind>>>,
    pub strength: Option<f64>,
    pub tau: Option<f64>,
    pub symmetric_loss: Option<bool>,
    pub edge_pert_mode: Option<EdgePertMode>,
    pub seed: Option<u64>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub proj_dim: Option<usize>,
    pub checkpoint_interval: Option<usize>,
}

impl Overrides {
    /// Fold these values into `cfg`; returns the checkpoint interval if set.
    pub fn apply(&self, cfg: &mut JoaoConfig) -> Option<usize> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        set!(mode);
        set!(gamma);
        set!(upper_lr);
        set!(lower_lr);
        set!(epochs);
        set!(batch_size);
        set!(lower_cadence);
        set!(lower_batch);
        set!(pool);
        set!(strength);
        set!(tau);
        set!(symmetric_loss);
        set!(edge_pert_mode);
        set!(seed);
        set!(hidden_dim);
        set!(num_layers);
        set!(proj_dim);
        self.checkpoint_interval
    }
}

pub fn parse_cadence(value: &str) -> Result<LowerCadence, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "epoch" | "per_epoch" | "per-epoch" => Ok(LowerCadence::PerEpoch),
        other => other
            .parse::<usize>()
            .map(LowerCadence::EveryMinibatches)
            .map_err(|_| format!("cadence must be `epoch` or a minibatch count, got {value:?}")),
    }
}

pub fn parse_lower_batch(value: &str) -> Result<LowerBatchSource, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "fresh" => Ok(LowerBatchSource::Fresh),
        "current" => Ok(LowerBatchSource::Current),
        other => Err(format!("lower batch must be `fresh` or `current`, got {other:?}")),
    }
}

pub fn parse_edge_pert_mode(value: &str) -> Result<EdgePertMode, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "rewire" => Ok(EdgePertMode::Rewire),
        "drop_only" | "drop-only" | "droponly" => Ok(EdgePertMode::DropOnly),
        other => Err(format!("edge pert mode must be `rewire` or `drop_only`, got {other:?}")),
    }
}

/// `all` means the full pool; otherwise a comma-separated kind list.
pub fn parse_pool(value: &str) -> Result<Option<Vec<AugmentationKind>>, String> {
    if value.trim().eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let kinds: Vec<AugmentationKind> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<AugmentationKind>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if kinds.is_empty() {
        return Err("pool list is empty".into());
    }
    Ok(Some(kinds))
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| format!("bad {what} value {value:?}"))
}

fn apply_line(out: &mut Overrides, key: &str, value: &str) -> Result<(), String> {
    match key {
        "mode" => out.mode = Some(value.parse().map_err(|_| format!("bad mode value {value:?}"))?),
        "gamma" => out.gamma = Some(parse_num(value, "gamma")?),
        "upper_lr" => out.upper_lr = Some(parse_num(value, "upper_lr")?),
        "lower_lr" => out.lower_lr = Some(parse_num(value, "lower_lr")?),
        "epochs" => out.epochs = Some(parse_num(value, "epochs")?),
        "batch_size" => out.batch_size = Some(parse_num(value, "batch_size")?),
        "lower_cadence" => out.lower_cadence = Some(parse_cadence(value)?),
        "lower_batch" => out.lower_batch = Some(parse_lower_batch(value)?),
        "pool" => out.pool = Some(parse_pool(value)?),
        "strength" => out.strength = Some(parse_num(value, "strength")?),
        "tau" => out.tau = Some(parse_num(value, "tau")?),
        "symmetric_loss" => out.symmetric_loss = Some(parse_num(value, "symmetric_loss")?),
        "edge_pert_mode" => out.edge_pert_mode = Some(parse_edge_pert_mode(value)?),
        "seed" => out.seed = Some(parse_num(value, "seed")?),
        "hidden_dim" => out.hidden_dim = Some(parse_num(value, "hidden_dim")?),
        "num_layers" => out.num_layers = Some(parse_num(value, "num_layers")?),
        "proj_dim" => out.proj_dim = Some(parse_num(value, "proj_dim")?),
        "checkpoint_interval" => {
            out.checkpoint_interval = Some(parse_num(value, "checkpoint_interval")?)
        }
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

pub fn parse_config_file(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<(), String> = match line.split_once('=') {
            Some((key, value)) => apply_line(&mut out, key.trim(), value.trim()),
            None => Err(format!("expected `key = value`, got {line:?}")),
        };
        parsed.map_err(|msg| {
            CliError::usage(format!("{}:{}: {msg}", path.display(), lineno + 1))
        })?;
    }
    Ok(out)
}
