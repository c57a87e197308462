//! `joao` command line: dataset statistics, contrastive pre-training with
//! learned augmentation-pair selection, linear-probe evaluation, and
//! distribution exports.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! abort.

mod config;

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use joao_core::augment::{matrix_to_csv, EdgePertMode, PairDistribution, POOL_SIZE};
use joao_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use joao_core::error::Error as CoreError;
use joao_core::eval::{embed_dataset, export_selection_heatmap, linear_probe_cv};
use joao_core::joao::{agd_train, JoaoConfig, LowerBatchSource, LowerCadence};
use joao_core::nn::{ModelState, TrainMode};
use joao_core::runlog::{read_log_values, RunEvent, RunLogWriter, TrainObserver};
use joao_core::tudataset::{dataset_stats, parse_tudataset};

#[derive(Parser)]
#[command(
    name = "joao",
    version,
    about = "Graph contrastive pre-training with learned augmentation-pair selection"
)]
struct Cli {
    /// Cap the worker threads used for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print graph count, average node count and average degree.
    Stats {
        /// Directory holding the TUDataset flat files.
        #[arg(long)]
        data: PathBuf,
        /// Dataset name (file prefix); defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Pre-train; writes a checkpoint, a JSONL run log and the selection
    /// heatmap CSV into the output directory.
    Pretrain(Box<PretrainArgs>),
    /// Evaluate a checkpoint with a stratified k-fold linear probe.
    Evaluate(EvaluateArgs),
    /// Export a 5x5 distribution CSV from a run log.
    ExportDist(ExportDistArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    name: Option<String>,
    /// Flat key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "joao-out")]
    out: PathBuf,

    /// `joao` (shared head) or `joaov2` (one head per augmentation kind).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    upper_lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lower_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `epoch` or a minibatch count.
    #[arg(long)]
    cadence: Option<String>,
    /// Minibatch for the distribution update: `fresh` or `current`.
    #[arg(long)]
    lower_batch: Option<String>,
    /// Comma-separated augmentation kinds, or `all`.
    #[arg(long)]
    pool: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    strength: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    symmetric: Option<bool>,
    /// `rewire` or `drop_only`.
    #[arg(long)]
    edge_pert_mode: Option<String>,
    /// Master seed; falls back to the config file, then $JOAO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
    /// Write an intermediate checkpoint every N epochs.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Fold-assignment seed; falls back to $JOAO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportDistArgs {
    /// JSONL run log produced by `pretrain`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `selection` (sampling percentages) or `final` (last distribution).
    #[arg(long, default_value = "selection")]
    what: String,
}

/// Process error with its exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::InvalidArgument(_) => 1,
            CoreError::MissingFile(_)
            | CoreError::Io { .. }
            | CoreError::Malformed(_)
            | CoreError::InvalidGraph(_)
            | CoreError::DimensionMismatch(_)
            | CoreError::Checkpoint(_) => 2,
            CoreError::InvalidDistribution(_)
            | CoreError::ZeroNorm(_)
            | CoreError::NonFinite(_) => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match cli.command {
        Command::Stats { data, name } => cmd_stats(&data, name.as_deref()),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::ExportDist(args) => cmd_export_dist(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dataset_name(data: &Path, name: Option<&str>) -> CliResult<String> {
    match name {
        Some(n) => Ok(n.to_string()),
        None => data
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::usage("cannot derive dataset name; pass --name")),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("JOAO_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::usage(format!("JOAO_SEED must be an integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn cmd_stats(data: &Path, name: Option<&str>) -> CliResult<()> {
    let name = dataset_name(data, name)?;
    let ds = parse_tudataset(data, &name)?;
    let stats = dataset_stats(&ds);
    println!(
        "{} graphs, avg nodes {:.2}, avg degree {:.2}",
        stats.graph_count, stats.avg_nodes, stats.avg_degree
    );
    Ok(())
}

/// Effective configuration, echoed as the run log's first record.
#[derive(Serialize)]
struct ConfigEcho<'a> {
    event: &'static str,
    dataset: &'a str,
    mode: TrainMode,
    gamma: f64,
    upper_lr: f64,
    lower_lr: f64,
    epochs: usize,
    batch_size: usize,
    lower_cadence: LowerCadence,
    lower_batch: LowerBatchSource,
    pool: Option<Vec<String>>,
    strength: f64,
    tau: f64,
    symmetric_loss: bool,
    edge_pert_mode: EdgePertMode,
    seed: u64,
    hidden_dim: usize,
    num_layers: usize,
    proj_dim: usize,
    checkpoint_interval: Option<usize>,
}

struct PretrainObserver<'a> {
    writer: RunLogWriter<BufWriter<std::fs::File>>,
    out_dir: &'a Path,
    interval: Option<usize>,
    mode: TrainMode,
    seed: u64,
    epochs: usize,
}

impl TrainObserver for PretrainObserver<'_> {
    fn on_event(&mut self, event: &RunEvent) -> joao_core::Result<()> {
        self.writer.write_record(event)
    }

    fn on_epoch_end(&mut self, epoch: usize, state: &ModelState) -> joao_core::Result<()> {
        let done = epoch + 1;
        let Some(interval) = self.interval else {
            return Ok(());
        };
        // The final checkpoint is written separately as `checkpoint.bin`.
        if !done.is_multiple_of(interval) || done == self.epochs {
            return Ok(());
        }
        let file = format!("checkpoint_epoch_{done}.bin");
        save_checkpoint(
            self.out_dir.join(&file),
            state,
            &CheckpointMeta { mode: self.mode, seed: self.seed, step: done },
        )?;
        self.writer.write_record(&RunEvent::Checkpoint { epoch, path: file })
    }
}

fn resolve_pretrain_config(args: &PretrainArgs) -> CliResult<(JoaoConfig, Option<usize>)> {
    let mut cfg = JoaoConfig::default();
    let mut interval = None;
    let mut seed_set = false;

    if let Some(path) = &args.config {
        let file_overrides = config::parse_config_file(path)?;
        seed_set = file_overrides.seed.is_some();
        if let Some(i) = file_overrides.apply(&mut cfg) {
            interval = Some(i);
        }
    }

    let flags = config::Overrides {
        mode: args
            .mode
            .as_deref()
            .map(|s| s.parse::<TrainMode>())
            .transpose()
            .map_err(|e| CliError::usage(e.to_string()))?,
        gamma: args.gamma,
        upper_lr: args.upper_lr,
        lower_lr: args.lower_lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lower_cadence: args
            .cadence
            .as_deref()
            .map(config::parse_cadence)
            .transpose()
            .map_err(CliError::usage)?,
        lower_batch: args
            .lower_batch
            .as_deref()
            .map(config::parse_lower_batch)
            .transpose()
            .map_err(CliError::usage)?,
        pool: args
            .pool
            .as_deref()
            .map(config::parse_pool)
            .transpose()
            .map_err(CliError::usage)?,
        strength: args.strength,
        tau: args.tau,
        symmetric_loss: args.symmetric,
        edge_pert_mode: args
            .edge_pert_mode
            .as_deref()
            .map(config::parse_edge_pert_mode)
            .transpose()
            .map_err(CliError::usage)?,
        seed: args.seed,
        hidden_dim: args.hidden_dim,
        num_layers: args.num_layers,
        proj_dim: args.proj_dim,
        checkpoint_interval: args.checkpoint_interval,
    };
    seed_set |= flags.seed.is_some();
    if let Some(i) = flags.apply(&mut cfg) {
        interval = Some(i);
    }
    if !seed_set {
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
    }
    if let Some(0) = interval {
        return Err(CliError::usage("checkpoint_interval must be at least 1"));
    }
    Ok((cfg, interval))
}

fn cmd_pretrain(args: &PretrainArgs) -> CliResult<()> {
    let (cfg, interval) = resolve_pretrain_config(args)?;
    if let Err(problems) = cfg.validate() {
        for p in &problems {
            eprintln!("config error: {p}");
        }
        return Err(CliError::usage(format!(
            "{} config problem(s); nothing was run",
            problems.len()
        )));
    }

    let name = dataset_name(&args.data, args.name.as_deref())?;
    let ds = parse_tudataset(&args.data, &name)?;

    std::fs::create_dir_all(&args.out).map_err(|e| {
        CliError::usage(format!("cannot create output dir {}: {e}", args.out.display()))
    })?;
    let log_path = args.out.join("run_log.jsonl");
    let log_file = std::fs::File::create(&log_path)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", log_path.display())))?;
    let mut observer = PretrainObserver {
        writer: RunLogWriter::new(BufWriter::new(log_file)),
        out_dir: &args.out,
        interval,
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
    };
    observer.writer.write_record(&ConfigEcho {
        event: "config",
        dataset: &name,
        mode: cfg.mode,
        gamma: cfg.gamma,
        upper_lr: cfg.upper_lr,
        lower_lr: cfg.lower_lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lower_cadence: cfg.lower_cadence,
        lower_batch: cfg.lower_batch,
        pool: cfg
            .pool
            .as_ref()
            .map(|kinds| kinds.iter().map(|k| k.to_string()).collect()),
        strength: cfg.strength,
        tau: cfg.tau,
        symmetric_loss: cfg.symmetric_loss,
        edge_pert_mode: cfg.edge_pert_mode,
        seed: cfg.seed,
        hidden_dim: cfg.hidden_dim,
        num_layers: cfg.num_layers,
        proj_dim: cfg.proj_dim,
        checkpoint_interval: interval,
    })?;

    let output = agd_train(&cfg, &ds, &mut observer)?;

    let final_name = "checkpoint.bin";
    save_checkpoint(
        args.out.join(final_name),
        &output.state,
        &CheckpointMeta { mode: cfg.mode, seed: cfg.seed, step: cfg.epochs },
    )?;
    observer.writer.write_record(&RunEvent::Checkpoint {
        epoch: cfg.epochs - 1,
        path: final_name.into(),
    })?;
    observer.writer.flush()?;

    export_selection_heatmap(&output.history, args.out.join("selection_heatmap.csv"))?;
    output
        .distribution
        .write_csv(args.out.join("final_distribution.csv"))?;

    let last_loss = output.history.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} ({} graphs); final epoch loss {:.6}; outputs in {}",
        cfg.epochs,
        name,
        ds.len(),
        last_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let (state, _meta) = load_checkpoint(&args.checkpoint)?;
    let name = dataset_name(&args.data, args.name.as_deref())?;
    let ds = parse_tudataset(&args.data, &name)?;
    if ds.feature_dim() != state.encoder.feature_dim() {
        return Err(CliError::data(format!(
            "checkpoint expects feature width {}, dataset {} has {}",
            state.encoder.feature_dim(),
            name,
            ds.feature_dim()
        )));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let table = embed_dataset(&state, &ds)?;
    let report = linear_probe_cv(&table, args.folds, seed)?;
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::data(format!("serializing report: {e}")))?;
        std::fs::write(out, json)
            .map_err(|e| CliError::usage(format!("cannot write {}: {e}", out.display())))?;
    }
    println!(
        "{}-fold accuracy {:.4} \u{00b1} {:.4}",
        args.folds, report.mean, report.std
    );
    Ok(())
}

fn cmd_export_dist(args: &ExportDistArgs) -> CliResult<()> {
    let records = read_log_values(&args.log)?;
    match args.what.as_str() {
        "selection" => {
            let mut counts = [[0u64; POOL_SIZE]; POOL_SIZE];
            let mut total = 0u64;
            for record in &records {
                if record.get("event").and_then(|e| e.as_str()) == Some("pair_sampled") {
                    let pair = record
                        .get("pair")
                        .and_then(|p| p.as_array())
                        .filter(|p| p.len() == 2)
                        .ok_or_else(|| CliError::data("pair_sampled record lacks a pair"))?;
                    let i = pair[0].as_u64().unwrap_or(u64::MAX) as usize;
                    let j = pair[1].as_u64().unwrap_or(u64::MAX) as usize;
                    if i >= POOL_SIZE || j >= POOL_SIZE {
                        return Err(CliError::data(format!("pair [{i}, {j}] out of range")));
                    }
                    counts[i][j] += 1;
                    total += 1;
                }
            }
            if total == 0 {
                return Err(CliError::data("run log contains no pair_sampled records"));
            }
            let mut pct = [[0.0; POOL_SIZE]; POOL_SIZE];
            for i in 0..POOL_SIZE {
                for j in 0..POOL_SIZE {
                    pct[i][j] = 100.0 * counts[i][j] as f64 / total as f64;
                }
            }
            std::fs::write(&args.out, matrix_to_csv(&pct)).map_err(|e| {
                CliError::usage(format!("cannot write {}: {e}", args.out.display()))
            })?;
        }
        "final" => {
            let last = records
                .iter()
                .rev()
                .find(|r| r.get("event").and_then(|e| e.as_str()) == Some("lower_step"))
                .ok_or_else(|| CliError::data("run log contains no lower_step records"))?;
            let values = last
                .get("dist")
                .and_then(|d| d.as_array())
                .ok_or_else(|| CliError::data("lower_step record lacks a dist array"))?;
            if values.len() != POOL_SIZE * POOL_SIZE {
                return Err(CliError::data(format!(
                    "dist array has {} entries, expected {}",
                    values.len(),
                    POOL_SIZE * POOL_SIZE
                )));
            }
            let mut probs = [[0.0; POOL_SIZE]; POOL_SIZE];
            for (cell, value) in values.iter().enumerate() {
                probs[cell / POOL_SIZE][cell % POOL_SIZE] = value
                    .as_f64()
                    .ok_or_else(|| CliError::data("non-numeric dist entry"))?;
            }
            let dist = PairDistribution::from_probs(probs)
                .map_err(|e| CliError::data(format!("logged distribution invalid: {e}")))?;
            dist.write_csv(&args.out)?;
        }
        other => {
            return Err(CliError::usage(format!(
                "--what must be `selection` or `final`, got {other:?}"
            )));
        }
    }
    Ok(())
}
