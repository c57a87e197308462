//! Checkpoint container: a JSON header followed by raw parameter data.
//!
//! Layout: 8-byte little-endian header length, the JSON header itself, then
//! every parameter tensor as flat little-endian `f64` in the header-declared
//! order (the canonical order of [`ModelState::param_specs`]).

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelDims, ModelState, TrainMode};
use crate::rng::substream;

const FORMAT: &str = "joao-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    mode: TrainMode,
    dims: ModelDims,
    seed: u64,
    step: usize,
    arrays: Vec<ArraySpec>,
}

/// Metadata stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub seed: u64,
    /// Completed training epochs.
    pub step: usize,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &ModelState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        mode: meta.mode,
        dims: state.dims(),
        seed: meta.seed,
        step: meta.step,
        arrays: state
            .param_specs()
            .into_iter()
            .map(|(name, rows, cols)| ArraySpec { name, rows, cols })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("serializing header: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + 8 * state.param_count());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in state.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, CheckpointMeta)> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header length", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 16 * 1024 * 1024 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible header length {header_len}",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: corrupted header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format {:?}",
            path.display(),
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            header.version
        )));
    }
    header
        .dims
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if header.dims.head_count != header.mode.head_count() {
        return Err(Error::Checkpoint(format!(
            "{}: head count {} does not match mode {}",
            path.display(),
            header.dims.head_count,
            header.mode
        )));
    }

    // Shape the state, then overwrite with the stored parameters.
    let mut state = ModelState::init(&header.dims, &mut substream(0, "checkpoint-shape", &[]))?;
    let declared: usize = header.arrays.iter().map(|a| a.rows * a.cols).sum();
    if declared != state.param_count() {
        return Err(Error::Checkpoint(format!(
            "{}: header declares {declared} values, dims imply {}",
            path.display(),
            state.param_count()
        )));
    }
    for (spec, (name, rows, cols)) in header.arrays.iter().zip(state.param_specs()) {
        if spec.name != name || spec.rows != rows || spec.cols != cols {
            return Err(Error::Checkpoint(format!(
                "{}: array {} ({}x{}) does not match expected {name} ({rows}x{cols})",
                path.display(),
                spec.name,
                spec.rows,
                spec.cols
            )));
        }
    }
    let mut data = vec![0u8; 8 * declared];
    file.read_exact(&mut data)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated parameter data", path.display())))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after parameter data",
            path.display()
        )));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!(
            "{}: non-finite parameter value",
            path.display()
        )));
    }
    state.assign_flat(&flat)?;
    Ok((
        state,
        CheckpointMeta {
            mode: header.mode,
            seed: header.seed,
            step: header.step,
        },
    ))
}
