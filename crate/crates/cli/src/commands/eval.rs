use super::common::{load_ground, metrics_csv, parse_days};
use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::io::{load_checkpoint, read_stack};
use gridfuse_core::training::evaluate;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `all` or comma-separated sample indices into the stack
    #[arg(long, default_value = "all")]
    pub days: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::new("eval");
    let fused = read_stack(&args.fused)
        .with_context(|| format!("reading fused stack {}", args.fused.display()))?;
    let ground = load_ground(&args.stations, &fused)?;
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;

    let spec = fused.spec();
    let needed = model.config.tokens_for(spec.rows, spec.cols);
    anyhow::ensure!(
        needed <= model.n_max,
        "checkpoint positional table holds {} tokens but the grid needs {needed}",
        model.n_max
    );

    let indices = parse_days(&args.days, fused.len())?;
    let metrics = evaluate(&model, &fused, &ground, &indices).context("evaluating")?;
    println!(
        "eval: rmse={:.4} mae={:.4} r2_det={:.4} r2_pearson_sq={:.4} (n={})",
        metrics.rmse, metrics.mae, metrics.r2_det, metrics.r2_pearson_sq, metrics.n
    );

    std::fs::create_dir_all(&args.out_dir)?;
    let rows = vec![("all".to_string(), metrics)];
    std::fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&rows))?;

    manifest.push_path("fused", &args.fused);
    manifest.push_path("stations", &args.stations);
    manifest.push_path("checkpoint", &args.checkpoint);
    manifest.push("days", &args.days);
    manifest.push("rmse", metrics.rmse);
    manifest.push("mae", metrics.mae);
    manifest.write(&args.out_dir)?;
    Ok(())
}
