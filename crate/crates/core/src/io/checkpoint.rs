//! Model checkpoints: a text config header, then per-parameter name/shape
//! lines interleaved with raw little-endian f64 payloads. Loading restores
//! forward outputs bit-identically.

use super::IoError;
use crate::vit::{ViTConfig, ViTRegressor};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "VITCKPT1";

pub fn save_checkpoint(model: &ViTRegressor, path: &Path) -> Result<(), IoError> {
    let c = &model.config;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(
        format!(
            "{} {} {} {} {} {} {} {}\n",
            c.patch_size,
            c.embed_dim,
            c.heads,
            c.blocks,
            c.mlp_hidden,
            c.channels,
            u8::from(c.use_norm_residual),
            model.n_max
        )
        .as_bytes(),
    );
    let params = model.parameters();
    out.extend_from_slice(format!("{}\n", params.len()).as_bytes());
    for p in params {
        let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {}\n", p.name, dims.join(" ")).as_bytes());
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a str, IoError> {
    let rel = bytes[*pos..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::Checkpoint(format!("unexpected end of file reading {what}")))?;
    let line = std::str::from_utf8(&bytes[*pos..*pos + rel])
        .map_err(|e| IoError::Checkpoint(format!("invalid UTF-8 in {what}: {e}")))?;
    *pos += rel + 1;
    Ok(line)
}

pub fn load_checkpoint(path: &Path) -> Result<ViTRegressor, IoError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let magic = take_line(&bytes, &mut pos, "magic")?;
    if magic != MAGIC {
        return Err(IoError::Checkpoint(format!(
            "bad magic: expected {MAGIC:?}, found {magic:?}"
        )));
    }
    let cfg_line = take_line(&bytes, &mut pos, "config")?;
    let nums: Vec<usize> = cfg_line
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| IoError::Checkpoint(format!("bad config field {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if nums.len() != 8 {
        return Err(IoError::Checkpoint(format!(
            "expected 8 config fields, found {}",
            nums.len()
        )));
    }
    let config = ViTConfig {
        patch_size: nums[0],
        embed_dim: nums[1],
        heads: nums[2],
        blocks: nums[3],
        mlp_hidden: nums[4],
        channels: nums[5],
        use_norm_residual: nums[6] != 0,
    };
    let n_max = nums[7];
    let mut model = ViTRegressor::init(config, n_max, 0)?;

    let declared: usize = take_line(&bytes, &mut pos, "parameter count")?
        .trim()
        .parse()
        .map_err(|_| IoError::Checkpoint("bad parameter count".into()))?;
    let expected = model.parameters().len();
    if declared != expected {
        return Err(IoError::Checkpoint(format!(
            "checkpoint declares {declared} parameters, model has {expected}"
        )));
    }

    for pi in 0..expected {
        let header = take_line(&bytes, &mut pos, "parameter header")?.to_string();
        let mut parts = header.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| IoError::Checkpoint("empty parameter header".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| IoError::Checkpoint(format!("bad dimension {s:?} for {name}")))
            })
            .collect::<Result<_, _>>()?;

        let mut params = model.parameters_mut();
        let p = &mut params[pi];
        if p.name != name || p.shape() != shape.as_slice() {
            return Err(IoError::ParamMismatch {
                name: p.name.clone(),
                expected: p.shape().to_vec(),
                found: shape,
            });
        }
        let n = p.tensor.len();
        if pos + n * 8 + 1 > bytes.len() {
            return Err(IoError::Checkpoint(format!(
                "truncated payload for parameter {name} at byte offset {pos}"
            )));
        }
        let data = p.tensor.data_mut();
        for (i, slot) in data.iter_mut().enumerate() {
            let start = pos + i * 8;
            *slot = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        }
        pos += n * 8;
        if bytes[pos] != b'\n' {
            return Err(IoError::Checkpoint(format!(
                "missing separator after parameter {name} at byte offset {pos}"
            )));
        }
        pos += 1;
    }
    Ok(model)
}
