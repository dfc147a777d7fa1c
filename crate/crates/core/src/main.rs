use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsect::cli::{cmd_drr, cmd_evaluate, cmd_phantom, cmd_reconstruct, cmd_train, RunConfig};
use sparsect::data::dataset::ViewPreset;
use sparsect::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsect", version, about = "Sparse-view CT reconstruction with an adversarially trained neural density field")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker cap (the pipeline currently runs on one thread).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// View preset: 1, 2, 5, 10 or 72.
    #[arg(long, global = true)]
    views: Option<u32>,
    /// Train without sub-volume terms.
    #[arg(long, global = true)]
    no_3d_supervision: bool,
    /// Dotted `key=value` config override, repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random analytic phantom and voxelize it.
    Phantom,
    /// Compute DRRs of a volume or analytic phantom.
    Drr {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        phantom: Option<PathBuf>,
    },
    /// Train on one or more subject directories.
    Train {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit latents to reference views and render the volume.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Compare predictions with truths.
    Evaluate {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        pred_views: Option<PathBuf>,
        #[arg(long)]
        truth_views: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(t) = c.threads {
        overrides.push(format!("threads={t}"));
    }
    if let Some(v) = c.views {
        overrides.push(format!("drr.views={v}"));
    }
    if c.no_3d_supervision {
        overrides.push("train.use_3d_supervision=false".into());
    }
    let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Phantom => cmd_phantom(&cfg, out).map(|_| ()),
        Command::Drr { volume, phantom } => cmd_drr(&cfg, out, volume.as_deref(), phantom.as_deref()).map(|_| ()),
        Command::Train { data, resume } => cmd_train(&cfg, out, &data, resume.as_deref()).map(|_| ()),
        Command::Reconstruct { checkpoint, references } => {
            let views = cli.common.views.map(|v| v.to_string().parse::<ViewPreset>()).transpose()?;
            cmd_reconstruct(&cfg, out, &checkpoint, &references, views).map(|_| ())
        }
        Command::Evaluate { pred, truth, pred_views, truth_views } => {
            let report = cmd_evaluate(&cfg, out, pred.as_deref(), truth.as_deref(), pred_views.as_deref(), truth_views.as_deref())?;
            print!("{}", report.to_text()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: Error = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
