use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptseg::checkpoint::Checkpoint;
use promptseg::commands::{self, SweepParam};
use promptseg::config::RunConfig;
use promptseg::error::{CliError, Result};

/// Prompt-driven semantic segmentation with frozen backbones and adapters.
#[derive(Debug, Parser)]
#[command(name = "promptseg", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Also write a colour overlay of the prediction.
    #[arg(long, global = true)]
    overlay: bool,
    /// Overrides the configured backbone (`toy` or `oracle`).
    #[arg(long, global = true)]
    backbone: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train adapters and heads.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask, needed by the oracle backbone.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate once per grid value.
    Sweep {
        /// One of t, tau, alpha_loss.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Plot the extracted prompts of one image.
    VizPrompts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn run_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ckpt)) => Checkpoint::load(ckpt)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.backbone {
        cfg.backbone = name.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint, switching backbones if asked.
fn checkpoint(cli: &Cli, path: &Path) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::load(path)?;
    if let Some(name) = &cli.backbone {
        ckpt.config.backbone = name.clone();
        ckpt.config.validate()?;
    }
    Ok(ckpt)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { resume, iterations } => {
            let mut cfg = run_config(cli, resume.as_deref())?;
            if let Some(n) = iterations {
                cfg.train.optim.iterations = *n;
            }
            let summary = commands::train(&cfg, &cli.out_dir, resume.as_deref())?;
            if let Some(last) = summary.records.last() {
                println!(
                    "iteration {} L_seg {:.6} L_p {:.6} L {:.6}",
                    last.iteration, last.seg, last.aux, last.total
                );
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Infer { checkpoint: path, image, mask } => {
            let ckpt = checkpoint(cli, path)?;
            let seed = cli.seed.unwrap_or(ckpt.config.seed);
            let s = commands::infer(&ckpt, image, mask.as_deref(), &cli.out_dir, cli.overlay, seed)?;
            println!("labels {}", s.labels.display());
            println!("diagnostics {}", s.diagnostics.display());
            if let Some(p) = s.overlay {
                println!("overlay {}", p.display());
            }
        }
        Command::Eval { checkpoint: path } => {
            let ckpt = checkpoint(cli, path)?;
            let seed = cli.seed.unwrap_or(ckpt.config.seed);
            let s = commands::eval(&ckpt, &cli.out_dir, seed)?;
            print!("{}", promptseg::report::markdown_table(&s.evaluation.report));
        }
        Command::Sweep { param, grid } => {
            let param = SweepParam::parse(param)?;
            let cfg = run_config(cli, None)?;
            for row in commands::sweep(&cfg, param, grid, &cli.out_dir)? {
                println!(
                    "{} = {}: mIoU {} prompts {}",
                    param.name(),
                    row.value,
                    row.mean_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
                    row.prompts
                );
            }
        }
        Command::VizPrompts { checkpoint: path, image } => {
            let ckpt = checkpoint(cli, path)?;
            println!("{}", commands::viz_prompts(&ckpt, image, &cli.out_dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &CliError) {
    eprintln!("error[{}]: {e}", e.category());
}
