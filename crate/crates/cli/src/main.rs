//! `mcm`: generate synthetic data, train base models and conditioning
//! modules, sample, evaluate and profile.

mod commands;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mcm", version, about = "Multimodal conditioning modules for frozen diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of images, segmentation maps and sketches
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a base noise predictor
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the training state stored in --out
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a conditioning module against a frozen base checkpoint
    TrainMcm {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw samples, optionally conditioned on a segmentation map and/or sketch
    Sample {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mcm: Option<PathBuf>,
        #[arg(long)]
        seg: Option<PathBuf>,
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// ddim or ddpm
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score samples for every modality subset on held-out conditions
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mcm: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_condition_samples: Option<usize>,
        #[arg(long)]
        conditions: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Trace modulation magnitudes and denoised estimates along one trajectory
    Profile {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mcm: PathBuf,
        #[arg(long)]
        seg: Option<PathBuf>,
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { out, count, seed, classes, size, cfg } => {
            commands::gen_data(&out, count, seed, classes, size, &cfg)
        }
        Command::TrainBase { data, out, resume, cfg } => commands::train_base(&data, &out, resume, &cfg),
        Command::TrainMcm { base, data, out, resume, cfg } => commands::train_mcm(&base, &data, &out, resume, &cfg),
        Command::Sample { base, mcm, seg, sketch, n, steps, eta, seed, sampler, out, cfg } => commands::sample(
            &commands::SampleArgs { base, mcm, seg, sketch, n, steps, eta, seed, sampler, out },
            &cfg,
        ),
        Command::Eval { base, mcm, data, out, per_condition_samples, conditions, steps, seed, cfg } => commands::eval(
            &commands::EvalArgs { base, mcm, data, out, per_condition_samples, conditions, steps, seed },
            &cfg,
        ),
        Command::Profile { base, mcm, seg, sketch, steps, seed, out, cfg } => {
            commands::profile(&commands::ProfileArgs { base, mcm, seg, sketch, steps, seed, out }, &cfg)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
