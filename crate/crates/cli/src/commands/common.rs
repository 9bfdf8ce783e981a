//! Shared helpers: grid presets, ground-stack loading, and the metrics CSV
//! layout.

use anyhow::Context;
use clap::ValueEnum;
use gridfuse_core::grid::{regrid_stations, FieldStack, GridSpec};
use gridfuse_core::io::read_station_csv;
use gridfuse_core::training::Metrics;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    No2,
    So2,
}

impl Preset {
    /// Study-area grid for the pollutant: bounding box, nominal 0.05 degree
    /// resolution, and authoritative row/column counts.
    pub fn grid(self) -> GridSpec {
        match self {
            Preset::No2 => GridSpec::new(51.795, 54.323, -9.089, -6.032, 0.05, 49, 67),
            Preset::So2 => GridSpec::new(51.795, 55.004, -9.089, -6.105, 0.05, 64, 59),
        }
        .expect("preset grids are valid")
    }

    pub fn default_stations(self) -> usize {
        match self {
            Preset::No2 => 29,
            Preset::So2 => 14,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::No2 => "no2",
            Preset::So2 => "so2",
        }
    }
}

/// Reads the station CSV and regrids it onto the reference stack's grid and
/// time axis.
pub fn load_ground(stations: &Path, reference: &FieldStack) -> anyhow::Result<FieldStack> {
    let records = read_station_csv(stations)
        .with_context(|| format!("reading stations from {}", stations.display()))?;
    let ground = regrid_stations(&records, reference.spec(), reference.times())
        .context("regridding station records")?;
    Ok(ground)
}

/// Metric rows in the comparison-table layout: for each metric, one row per
/// fold plus an average row.
pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    type Getter = fn(&Metrics) -> f64;
    let mut out = String::from("metric,fold,value\n");
    let metrics: [(&str, Getter); 4] = [
        ("rmse", |m| m.rmse),
        ("mae", |m| m.mae),
        ("r2_det", |m| m.r2_det),
        ("r2_pearson_sq", |m| m.r2_pearson_sq),
    ];
    for (name, get) in metrics {
        for (fold, m) in rows {
            let _ = writeln!(out, "{name},{fold},{}", get(m));
        }
        if rows.len() > 1 {
            let avg = rows.iter().map(|(_, m)| get(m)).sum::<f64>() / rows.len() as f64;
            let _ = writeln!(out, "{name},avg,{avg}");
        }
    }
    out
}

/// Parses `all` or a comma-separated list of fold indices 0..=4.
pub fn parse_folds(spec: &str) -> anyhow::Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..5).collect());
    }
    let mut folds = Vec::new();
    for part in spec.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("--folds expects `all` or fold indices, got {part:?}"))?;
        anyhow::ensure!(k < 5, "fold index {k} out of range 0..=4");
        folds.push(k);
    }
    anyhow::ensure!(!folds.is_empty(), "--folds selected nothing");
    Ok(folds)
}

/// Parses `all` or a comma-separated list of sample positions.
pub fn parse_days(spec: &str, n_samples: usize) -> anyhow::Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..n_samples).collect());
    }
    let mut days = Vec::new();
    for part in spec.split(',') {
        let i: usize = part
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("--days expects `all` or sample indices, got {part:?}"))?;
        anyhow::ensure!(
            i < n_samples,
            "sample index {i} out of range ({n_samples} samples)"
        );
        days.push(i);
    }
    anyhow::ensure!(!days.is_empty(), "--days selected nothing");
    Ok(days)
}
