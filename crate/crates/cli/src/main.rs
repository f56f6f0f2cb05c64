use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctuq_cli::{cmd_experiment, cmd_reconstruct, cmd_train, cmd_uq, CliError, ExperimentConfig, Method, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "ctuq", version, about = "Sparse-view CT reconstruction with a learned prior and seed-resampling uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for the sweep (0 for one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Flag uncertainty scores above this value
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    digit: u8,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    n_views: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the prior on the configured digit
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct one evaluation image from one measurement draw
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Measurement seed index
        #[arg(long, default_value_t = 0)]
        seed: usize,
        /// `lpn` or `fbp`
        #[arg(long, default_value = "lpn")]
        method: String,
    },
    /// Pixel-wise spread over all seeds for one evaluation image
    Uq {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Base seed of the measurement streams
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every digit, image, budget and method; resumable
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Base seed of the measurement streams
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(t) = common.threshold {
        cfg.threshold = Some(t);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, seed } => {
            let mut cfg = config(&common)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = cmd_train(&cfg)?;
            let last = out.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            println!(
                "trained on {} images, final loss {last}; checkpoint {}, log {}",
                out.n_images,
                out.checkpoint.display(),
                out.log_path.display()
            );
        }
        Command::Reconstruct { common, target, seed, method } => {
            let cfg = config(&common)?;
            let method: Method = method.parse()?;
            let out = cmd_reconstruct(&cfg, target.digit, target.index, target.n_views, seed, method)?;
            println!("digit,index,n_views,seed,method,psnr,ssim");
            println!("{}", out.line);
            eprintln!("wrote {}", out.pgm.display());
        }
        Command::Uq { common, target, seed } => {
            let mut cfg = config(&common)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            let out = cmd_uq(&cfg, target.digit, target.index, target.n_views)?;
            println!("digit,index,n_views,score,threshold,flagged");
            println!("{}", out.line);
            eprintln!("wrote {}", out.dir.display());
        }
        Command::Experiment { common, seed } => {
            let mut cfg = config(&common)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            let out = cmd_experiment(&cfg)?;
            println!(
                "{} cells complete, {} new reconstructions; results in {}",
                out.cells,
                out.new_reconstructions,
                out.dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
