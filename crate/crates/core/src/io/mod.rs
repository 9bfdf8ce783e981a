//! File formats, the synthetic dataset generator, checkpointing, and
//! figure-data export.
//!
//! Grid stacks are stored as a three-line text header followed by raw
//! little-endian 32-bit floats (NaN encodes a masked cell). Station data is
//! plain CSV. Checkpoints interleave text parameter headers with raw 64-bit
//! float payloads. Every reader rejects malformed input with a positional
//! diagnostic (byte offset or line number).

mod checkpoint;
mod export;
mod stack;
mod stations;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use export::{export_heatmap, export_scatter};
pub use stack::{read_stack, write_stack};
pub use stations::{read_station_csv, write_station_csv};
pub use synth::{synth_generate, SynthConfig, SynthData, SATELLITE_GAIN, SATELLITE_OFFSET};

use crate::grid::GridError;
use crate::vit::VitError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset 0: expected \"GSTK1\", found {found:?}")]
    BadMagic { found: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("truncated payload: expected {expected} bytes, found {actual} (payload starts at byte offset {offset})")]
    Truncated {
        expected: u64,
        actual: u64,
        offset: u64,
    },
    #[error("malformed value at byte offset {offset}: {msg}")]
    Malformed { offset: u64, msg: String },
    #[error("dimension overflow at line {line}: {msg}")]
    DimensionOverflow { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("nothing to export: field has no valid cells")]
    ExportEmpty,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("{0}")]
    Invalid(String),
}

/// Rounds through 32-bit precision; the synthetic generator emits only such
/// values so whole pipelines survive disk round trips bit-identically.
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}
