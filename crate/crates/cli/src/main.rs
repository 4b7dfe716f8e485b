use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gsb_core::bitops::ModelShape;
use gsb_core::harness::commands::{
    attn_dump, grad_check_report, init_check_report, model_for, ops_report, run_eval, run_train, sample_images,
};
use gsb_core::harness::{DatasetKind, RunConfig};

/// Train, evaluate and inspect 1-bit ViTs with GSB attention and value
/// binarization.
#[derive(Parser)]
#[command(name = "gsb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set k_a=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes metrics.log and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set dataset=...`.
        #[arg(long)]
        dataset: Option<String>,
        /// Shorthand for `--set output_dir=...`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Top-1/top-5 of a checkpoint on its run's test split.
    Eval {
        checkpoint: PathBuf,
        /// Defaults to run.cfg next to the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// BOPs, FLOPs and OPs for a model shape in all three modes.
    OpsReport {
        #[arg(long, default_value_t = 198)]
        n: usize,
        #[arg(long, default_value_t = 384)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        r: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, default_value_t = 2)]
        k_a: usize,
        #[arg(long, default_value_t = 2)]
        k_v: usize,
    },
    /// Production GSB backward against the standalone gradient formulas.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Dump the binarized attention, masks and real attention of one image.
    AttnDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained model; a freshly initialized one is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "attn.bin")]
        out: PathBuf,
    },
    /// Closed-form scale inits against least squares on live activations.
    InitCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        images: usize,
    },
}

fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    cfg.apply_overrides(args.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

/// Outcome of a subcommand that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Train { cfg, dataset, output } => {
            let mut cfg = load_config(&cfg, None)?;
            if let Some(d) = dataset {
                cfg.dataset.kind = DatasetKind::parse(&d).map_err(anyhow::Error::msg)?;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let summary = run_train(&cfg, &mut std::io::stdout())?;
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Eval { checkpoint, cfg } => {
            let run_cfg = checkpoint.parent().map(|d| d.join("run.cfg"));
            let cfg = load_config(&cfg, run_cfg.as_deref())?;
            let e = run_eval(&checkpoint, &cfg).with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("test_loss={:.6} top1={:.4} top5={:.4}", e.loss, e.top1, e.top5);
        }
        Command::OpsReport { n, d, r, heads, blocks, k_a, k_v } => {
            if heads == 0 || d % heads != 0 {
                bail!("--d must be a positive multiple of --heads");
            }
            print!(
                "{}",
                ops_report(ModelShape {
                    tokens: n,
                    dim: d,
                    mlp_ratio: r,
                    blocks,
                    heads,
                    k_a,
                    k_v,
                })
            );
        }
        Command::GradCheck { seed, cases } => {
            let report = grad_check_report(seed, cases)?;
            for l in &report.lines {
                println!("{l}");
            }
            if !report.passed {
                return Ok(Status::CheckFailed);
            }
        }
        Command::AttnDump { cfg, checkpoint, out } => {
            let cfg = load_config(&cfg, None)?;
            let mut model = model_for(&cfg, checkpoint.as_deref())?;
            let images = sample_images(&cfg, 32)?;
            if checkpoint.is_none() {
                model.calibrate(&images.view())?;
            }
            for name in attn_dump(&mut model, &images, &out)? {
                println!("{name}");
            }
            println!("wrote {}", out.display());
        }
        Command::InitCheck { cfg, checkpoint, images } => {
            let cfg = load_config(&cfg, None)?;
            let mut model = model_for(&cfg, checkpoint.as_deref())?;
            let x = sample_images(&cfg, images)?;
            let report = init_check_report(&mut model, &x)?;
            for l in &report.lines {
                println!("{l}");
            }
            if !report.passed {
                return Ok(Status::CheckFailed);
            }
        }
    }
    Ok(Status::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
