use crate::manifest::Manifest;
use anyhow::Context;
use clap::Args;
use gridfuse_core::io::{export_heatmap, export_scatter, read_stack};
use std::path::PathBuf;

#[derive(Args)]
pub struct ExportArgs {
    /// Stack to render (a prediction, fused, or truth stack)
    #[arg(long)]
    pub stack: PathBuf,
    /// Day index from the stack's time axis
    #[arg(long)]
    pub day: i64,
    /// Optional truth stack: adds a truth-vs-stack scatter CSV for the day
    #[arg(long)]
    pub truth_stack: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: ExportArgs) -> anyhow::Result<()> {
    let mut manifest = Manifest::new("export");
    let stack = read_stack(&args.stack)
        .with_context(|| format!("reading stack {}", args.stack.display()))?;
    let pos = stack
        .position_of_day(args.day)
        .ok_or_else(|| anyhow::anyhow!("day {} not on the stack's time axis", args.day))?;

    std::fs::create_dir_all(&args.out_dir)?;
    let base = args.out_dir.join(format!("day{}", args.day));
    export_heatmap(stack.field(pos), &base).context("exporting heatmap")?;
    manifest.push_path("heatmap", &base.with_extension("pgm"));
    manifest.push_path("values", &base.with_extension("csv"));

    if let Some(truth_path) = &args.truth_stack {
        let truth = read_stack(truth_path)
            .with_context(|| format!("reading truth stack {}", truth_path.display()))?;
        let tpos = truth
            .position_of_day(args.day)
            .ok_or_else(|| anyhow::anyhow!("day {} not on the truth stack's time axis", args.day))?;
        let scatter = args.out_dir.join(format!("scatter_day{}.csv", args.day));
        export_scatter(truth.field(tpos), stack.field(pos), &scatter)
            .context("exporting scatter pairs")?;
        manifest.push_path("scatter", &scatter);
    }

    manifest.push_path("stack", &args.stack);
    manifest.push("day", args.day);
    manifest.write(&args.out_dir)?;
    println!("export: day {} -> {}", args.day, args.out_dir.display());
    Ok(())
}
