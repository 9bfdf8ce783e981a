use super::common::{load_ground, metrics_csv, parse_folds};
use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::io::read_stack;
use gridfuse_core::training::{kfold_split, linear_baseline, Metrics};
use std::path::PathBuf;

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    /// `all` or a comma-separated list of fold indices
    #[arg(long, default_value = "all")]
    pub folds: String,
    /// Fold-split seed (must match the train run for comparable folds)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: BaselineArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::new("baseline");
    let fused = read_stack(&args.fused)
        .with_context(|| format!("reading fused stack {}", args.fused.display()))?;
    let ground = load_ground(&args.stations, &fused)?;
    let folds = parse_folds(&args.folds)?;
    let splits = kfold_split(fused.len(), args.seed).context("building folds")?;

    let mut fold_metrics: Vec<(String, Metrics)> = Vec::new();
    for &k in &folds {
        let m = linear_baseline(&fused, &ground, &splits[k])
            .with_context(|| format!("baseline fold {k}"))?;
        println!(
            "fold {k}: rmse={:.4} mae={:.4} r2_det={:.4} r2_pearson_sq={:.4}",
            m.rmse, m.mae, m.r2_det, m.r2_pearson_sq
        );
        fold_metrics.push((k.to_string(), m));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&fold_metrics))?;

    manifest.push_path("fused", &args.fused);
    manifest.push_path("stations", &args.stations);
    manifest.push("folds", &args.folds);
    manifest.push("seed", args.seed);
    manifest.write(&args.out_dir)?;
    Ok(())
}
