use super::common::{load_ground, metrics_csv, parse_folds};
use crate::kv::{check_known_keys, parse, read_kv_file};
use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::io::{read_stack, save_checkpoint};
use gridfuse_core::training::{evaluate, kfold_split, train, Metrics, TrainConfig};
use gridfuse_core::vit::ViTConfig;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct TrainArgs {
    /// Gap-filled satellite stack (model input)
    #[arg(long)]
    pub fused: PathBuf,
    /// Station observation CSV (training target)
    #[arg(long)]
    pub stations: PathBuf,
    /// `all` or a comma-separated list of fold indices
    #[arg(long, default_value = "all")]
    pub folds: String,
    /// Training-day fraction (overrides the config file)
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Optional `key = value` training/model config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed (overrides the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "learning_rate",
    "batch_size",
    "beta1",
    "beta2",
    "adam_epsilon",
    "seed",
    "fraction",
    "patch_size",
    "embed_dim",
    "heads",
    "blocks",
    "mlp_hidden",
    "channels",
    "use_norm_residual",
];

/// Resolves the training and model configuration: file values over defaults,
/// command-line flags over both.
pub fn resolve_configs(
    config_path: Option<&Path>,
    fraction_flag: Option<f64>,
    seed_flag: Option<u64>,
) -> anyhow::Result<(TrainConfig, ViTConfig)> {
    let map = match config_path {
        Some(p) => read_kv_file(p)?,
        None => Default::default(),
    };
    check_known_keys(&map, TRAIN_KEYS)?;
    let td = TrainConfig::default();
    let vd = ViTConfig::default();
    let mut tc = TrainConfig {
        epochs: parse(&map, "epochs", td.epochs)?,
        learning_rate: parse(&map, "learning_rate", td.learning_rate)?,
        batch_size: parse(&map, "batch_size", td.batch_size)?,
        beta1: parse(&map, "beta1", td.beta1)?,
        beta2: parse(&map, "beta2", td.beta2)?,
        adam_epsilon: parse(&map, "adam_epsilon", td.adam_epsilon)?,
        seed: parse(&map, "seed", td.seed)?,
        fraction: parse(&map, "fraction", td.fraction)?,
    };
    if let Some(f) = fraction_flag {
        tc.fraction = f;
    }
    if let Some(s) = seed_flag {
        tc.seed = s;
    }
    tc.validate().context("training config")?;
    let vc = ViTConfig {
        patch_size: parse(&map, "patch_size", vd.patch_size)?,
        embed_dim: parse(&map, "embed_dim", vd.embed_dim)?,
        heads: parse(&map, "heads", vd.heads)?,
        blocks: parse(&map, "blocks", vd.blocks)?,
        mlp_hidden: parse(&map, "mlp_hidden", vd.mlp_hidden)?,
        channels: parse(&map, "channels", vd.channels)?,
        use_norm_residual: parse(&map, "use_norm_residual", vd.use_norm_residual)?,
    };
    vc.validate().context("model config")?;
    Ok((tc, vc))
}

pub fn push_config(manifest: &mut Manifest, tc: &TrainConfig, vc: &ViTConfig) {
    manifest.push("epochs", tc.epochs);
    manifest.push("learning_rate", tc.learning_rate);
    manifest.push("batch_size", tc.batch_size);
    manifest.push("beta1", tc.beta1);
    manifest.push("beta2", tc.beta2);
    manifest.push("adam_epsilon", tc.adam_epsilon);
    manifest.push("seed", tc.seed);
    manifest.push("fraction", tc.fraction);
    manifest.push("patch_size", vc.patch_size);
    manifest.push("embed_dim", vc.embed_dim);
    manifest.push("heads", vc.heads);
    manifest.push("blocks", vc.blocks);
    manifest.push("mlp_hidden", vc.mlp_hidden);
    manifest.push("channels", vc.channels);
    manifest.push("use_norm_residual", vc.use_norm_residual);
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::new("train");
    let fused = read_stack(&args.fused)
        .with_context(|| format!("reading fused stack {}", args.fused.display()))?;
    let ground = load_ground(&args.stations, &fused)?;
    let (tc, vc) = resolve_configs(args.config.as_deref(), args.fraction, args.seed)?;
    let folds = parse_folds(&args.folds)?;
    let splits = kfold_split(fused.len(), tc.seed).context("building folds")?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut history_csv = String::new();
    let mut fold_metrics: Vec<(String, Metrics)> = Vec::new();

    for &k in &folds {
        let split = &splits[k];
        let (model, history) =
            train(&fused, &ground, split, &vc, &tc).with_context(|| format!("training fold {k}"))?;
        let ckpt = args.out_dir.join(format!("fold{k}.ckpt"));
        save_checkpoint(&model, &ckpt)?;
        let rows = history.to_rows(k);
        if history_csv.is_empty() {
            history_csv.push_str(&rows);
        } else {
            // drop the repeated header
            history_csv.push_str(rows.split_once('\n').map(|x| x.1).unwrap_or(""));
        }
        let metrics = evaluate(&model, &fused, &ground, &split.validation_indices)
            .with_context(|| format!("evaluating fold {k}"))?;
        println!(
            "fold {k}: rmse={:.4} mae={:.4} r2_det={:.4} r2_pearson_sq={:.4}",
            metrics.rmse, metrics.mae, metrics.r2_det, metrics.r2_pearson_sq
        );
        fold_metrics.push((k.to_string(), metrics));
    }

    std::fs::write(args.out_dir.join("history.csv"), history_csv)?;
    std::fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&fold_metrics))?;

    manifest.push_path("fused", &args.fused);
    manifest.push_path("stations", &args.stations);
    manifest.push("folds", &args.folds);
    push_config(&mut manifest, &tc, &vc);
    manifest.push_path("out_dir", &args.out_dir);
    manifest.write(&args.out_dir)?;
    Ok(())
}
