use super::common::Preset;
use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::io::{synth_generate, write_stack, write_station_csv, SynthConfig};
use std::path::PathBuf;

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pollutant grid preset
    #[arg(long, value_enum, default_value_t = Preset::No2)]
    pub preset: Preset,
    #[arg(long, default_value_t = 485)]
    pub days: usize,
    #[arg(long, default_value_t = 0.3)]
    pub gap_fraction: f64,
    /// Station count (preset default when omitted)
    #[arg(long)]
    pub stations: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    let manifest = build_manifest(&args);
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let spec = args.preset.grid();
    let config = SynthConfig {
        seed: args.seed,
        n_days: args.days,
        n_stations: args.stations.unwrap_or(args.preset.default_stations()),
        gap_fraction: args.gap_fraction,
        ..SynthConfig::new(spec.clone())
    };
    let data = synth_generate(&config).context("generating synthetic dataset")?;

    let satellite_path = args.out_dir.join("satellite.gstk");
    let truth_path = args.out_dir.join("truth.gstk");
    let stations_path = args.out_dir.join("stations.csv");
    write_stack(&data.satellite, &satellite_path)?;
    write_stack(&data.truth, &truth_path)?;
    write_station_csv(&data.stations, &stations_path)?;

    let mut manifest = manifest;
    manifest.push("rows", spec.rows);
    manifest.push("cols", spec.cols);
    manifest.push("n_stations", config.n_stations);
    manifest.push_path("out_satellite", &satellite_path);
    manifest.push_path("out_truth", &truth_path);
    manifest.push_path("out_stations", &stations_path);
    manifest.write(&args.out_dir)?;

    println!(
        "synth: {} preset, {} days, {} stations, grid {}x{} -> {}",
        args.preset.name(),
        args.days,
        config.n_stations,
        spec.rows,
        spec.cols,
        args.out_dir.display()
    );
    Ok(())
}

fn build_manifest(args: &SynthArgs) -> Manifest {
    let mut m = Manifest::new("synth");
    m.push("seed", args.seed);
    m.push("preset", args.preset.name());
    m.push("days", args.days);
    m.push("gap_fraction", args.gap_fraction);
    m
}
