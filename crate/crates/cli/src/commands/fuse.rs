use super::common::load_ground;
use crate::kv::{check_known_keys, parse, read_kv_file};
use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::fusion::{gap_fill, FusionParams};
use gridfuse_core::io::{read_stack, write_stack};
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct FuseArgs {
    /// Input satellite stack with gaps
    #[arg(long)]
    pub satellite: PathBuf,
    /// Station observation CSV
    #[arg(long)]
    pub stations: PathBuf,
    /// Optional `key = value` fusion parameter file
    #[arg(long)]
    pub params_file: Option<PathBuf>,
    /// Output path for the gap-filled stack
    #[arg(long)]
    pub out: PathBuf,
    /// Optional path for the key-value fusion report
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn read_fusion_params(path: Option<&Path>) -> anyhow::Result<FusionParams> {
    let defaults = FusionParams::default();
    let Some(path) = path else {
        return Ok(defaults);
    };
    let map = read_kv_file(path)?;
    check_known_keys(
        &map,
        &[
            "tau_spatial",
            "tau_consistency",
            "max_neighbors",
            "huber_delta",
            "max_reference_times",
            "min_overlap",
            "idw_epsilon",
        ],
    )?;
    let params = FusionParams {
        tau_spatial: parse(&map, "tau_spatial", defaults.tau_spatial)?,
        tau_consistency: parse(&map, "tau_consistency", defaults.tau_consistency)?,
        max_neighbors: parse(&map, "max_neighbors", defaults.max_neighbors)?,
        huber_delta: parse(&map, "huber_delta", defaults.huber_delta)?,
        max_reference_times: parse(&map, "max_reference_times", defaults.max_reference_times)?,
        min_overlap: parse(&map, "min_overlap", defaults.min_overlap)?,
        idw_epsilon: parse(&map, "idw_epsilon", defaults.idw_epsilon)?,
    };
    params.validate()?;
    Ok(params)
}

pub fn run(args: FuseArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::new("fuse");
    let satellite = read_stack(&args.satellite)
        .with_context(|| format!("reading satellite stack {}", args.satellite.display()))?;
    let ground = load_ground(&args.stations, &satellite)?;
    let params = read_fusion_params(args.params_file.as_deref())?;

    let (fused, report) = gap_fill(&satellite, &ground, &params).context("gap filling")?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_stack(&fused, &args.out)?;

    let report_text = report.to_kv_text();
    if let Some(report_path) = &args.report {
        std::fs::write(report_path, &report_text)?;
    }
    print!("{report_text}");

    manifest.push_path("satellite", &args.satellite);
    manifest.push_path("stations", &args.stations);
    manifest.push("tau_spatial", params.tau_spatial);
    manifest.push("tau_consistency", params.tau_consistency);
    manifest.push("max_neighbors", params.max_neighbors);
    manifest.push("huber_delta", params.huber_delta);
    manifest.push("max_reference_times", params.max_reference_times);
    manifest.push("min_overlap", params.min_overlap);
    manifest.push("idw_epsilon", params.idw_epsilon);
    manifest.push("copied", report.copied);
    manifest.push("filled", report.filled);
    manifest.push("unfilled", report.unfilled);
    manifest.push_path("out", &args.out);
    let manifest_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    manifest.write(manifest_dir)?;
    Ok(())
}
