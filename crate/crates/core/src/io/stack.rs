//! The grid-stack file: three text header lines, then time-major row-major
//! little-endian f32 values with NaN marking masked cells.

use super::IoError;
use crate::grid::{Field, FieldStack, GridSpec};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "GSTK1";

pub fn write_stack(stack: &FieldStack, path: &Path) -> Result<(), IoError> {
    let spec = stack.spec();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "{} {} {} {} {} {} {} {}\n",
        spec.lat_min,
        spec.lat_max,
        spec.lon_min,
        spec.lon_max,
        spec.resolution,
        spec.rows,
        spec.cols,
        stack.len()
    ));
    let days: Vec<String> = stack.times().iter().map(|t| t.to_string()).collect();
    header.push_str(&days.join(" "));
    header.push('\n');

    let mut payload = Vec::with_capacity(stack.len() * spec.n_cells() * 4);
    for field in stack.fields() {
        for &v in field.values() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

/// Splits one header line off a byte buffer, tracking the running offset.
fn take_line<'a>(
    bytes: &'a [u8],
    offset: &mut u64,
    line_no: usize,
) -> Result<&'a str, IoError> {
    let start = *offset as usize;
    let rel_end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(IoError::Parse {
            line: line_no,
            msg: "missing newline before end of file".into(),
        })?;
    let line = std::str::from_utf8(&bytes[start..start + rel_end]).map_err(|e| IoError::Parse {
        line: line_no,
        msg: format!("invalid UTF-8: {e}"),
    })?;
    *offset += rel_end as u64 + 1;
    Ok(line)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T, IoError> {
    s.parse().map_err(|_| IoError::Parse {
        line,
        msg: format!("cannot parse {what} from {s:?}"),
    })
}

pub fn read_stack(path: &Path) -> Result<FieldStack, IoError> {
    let bytes = fs::read(path)?;
    let mut offset = 0u64;

    let magic = take_line(&bytes, &mut offset, 1)?;
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            found: magic.chars().take(16).collect(),
        });
    }

    let dims_line = take_line(&bytes, &mut offset, 2)?;
    let parts: Vec<&str> = dims_line.split_whitespace().collect();
    if parts.len() != 8 {
        return Err(IoError::Parse {
            line: 2,
            msg: format!("expected 8 header fields, found {}", parts.len()),
        });
    }
    let lat_min: f64 = parse_field(parts[0], 2, "lat_min")?;
    let lat_max: f64 = parse_field(parts[1], 2, "lat_max")?;
    let lon_min: f64 = parse_field(parts[2], 2, "lon_min")?;
    let lon_max: f64 = parse_field(parts[3], 2, "lon_max")?;
    let resolution: f64 = parse_field(parts[4], 2, "resolution")?;
    let rows: usize = parse_field(parts[5], 2, "rows")?;
    let cols: usize = parse_field(parts[6], 2, "cols")?;
    let n_times: usize = parse_field(parts[7], 2, "n_times")?;

    let spec = GridSpec::new(lat_min, lat_max, lon_min, lon_max, resolution, rows, cols)
        .map_err(|e| IoError::Parse {
            line: 2,
            msg: e.to_string(),
        })?;

    let cells = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(n_times))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IoError::DimensionOverflow {
            line: 2,
            msg: format!("{rows} x {cols} x {n_times} cells overflow"),
        })?;

    let days_line = take_line(&bytes, &mut offset, 3)?;
    let days: Vec<i64> = days_line
        .split_whitespace()
        .map(|s| parse_field::<i64>(s, 3, "day index"))
        .collect::<Result<_, _>>()?;
    if days.len() != n_times {
        return Err(IoError::Parse {
            line: 3,
            msg: format!("header declares {n_times} times but lists {} days", days.len()),
        });
    }
    if !days.windows(2).all(|w| w[0] < w[1]) {
        return Err(IoError::Parse {
            line: 3,
            msg: "day indices must be strictly increasing".into(),
        });
    }

    let actual = (bytes.len() as u64).saturating_sub(offset);
    if actual != cells as u64 {
        return Err(IoError::Truncated {
            expected: cells as u64,
            actual,
            offset,
        });
    }

    let n_cells = rows * cols;
    let mut fields = Vec::with_capacity(n_times);
    let mut pos = offset as usize;
    for _ in 0..n_times {
        let mut values = Vec::with_capacity(n_cells);
        let mut mask = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            if v.is_nan() {
                values.push(f64::NAN);
                mask.push(false);
            } else if v.is_infinite() {
                return Err(IoError::Malformed {
                    offset: pos as u64,
                    msg: format!("non-finite value {v} (only NaN marks masked cells)"),
                });
            } else {
                values.push(v as f64);
                mask.push(true);
            }
            pos += 4;
        }
        fields.push(Field::from_parts(&spec, values, mask)?);
    }
    Ok(FieldStack::new(&spec, days, fields)?)
}
