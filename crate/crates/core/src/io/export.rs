//! Figure-data export: 8-bit grayscale portable graymaps scaled to the valid
//! value range, plus plain CSVs for cell values and truth/prediction scatter
//! pairs.

use super::IoError;
use crate::grid::Field;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `<base>.pgm` (P5, invalid cells black, valid cells scaled so the
/// minimum maps to 0 and the maximum to 255) and `<base>.csv`
/// (`row,col,value` for every valid cell). A constant field renders mid-gray.
pub fn export_heatmap(field: &Field, base: &Path) -> Result<(), IoError> {
    let valid: Vec<f64> = field.iter_valid().map(|(_, _, v)| v).collect();
    if valid.is_empty() {
        return Err(IoError::ExportEmpty);
    }
    let min = valid.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;

    let (rows, cols) = (field.rows(), field.cols());
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let px = match field.try_get(r, c) {
                None => 0u8,
                Some(_) if span == 0.0 => 128,
                Some(v) => ((v - min) / span * 255.0).round() as u8,
            };
            pixels.push(px);
        }
    }
    let mut pgm = fs::File::create(base.with_extension("pgm"))?;
    pgm.write_all(format!("P5\n{cols} {rows}\n255\n").as_bytes())?;
    pgm.write_all(&pixels)?;

    let mut csv = String::from("row,col,value\n");
    for (r, c, v) in field.iter_valid() {
        csv.push_str(&format!("{r},{c},{v}\n"));
    }
    fs::write(base.with_extension("csv"), csv)?;
    Ok(())
}

/// Writes `truth,pred` pairs over cells valid in both fields.
pub fn export_scatter(truth: &Field, pred: &Field, path: &Path) -> Result<(), IoError> {
    if truth.spec() != pred.spec() {
        return Err(IoError::Invalid(
            "scatter export needs fields on the same grid".into(),
        ));
    }
    let mut out = String::from("truth,pred\n");
    let mut n = 0usize;
    for (r, c, t) in truth.iter_valid() {
        if let Some(p) = pred.try_get(r, c) {
            out.push_str(&format!("{t},{p}\n"));
            n += 1;
        }
    }
    if n == 0 {
        return Err(IoError::ExportEmpty);
    }
    fs::write(path, out)?;
    Ok(())
}
