use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Gate-based global filter pruning for small CNNs")]
struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding train.pkds and test.pkds.
    #[arg(long, value_name = "DIR", required_unless_present = "idx", conflicts_with = "idx")]
    pub data: Option<PathBuf>,

    /// IDX files: train images, train labels, test images, test labels.
    #[arg(
        long,
        num_args = 4,
        value_names = ["TRAIN_IMAGES", "TRAIN_LABELS", "TEST_IMAGES", "TEST_LABELS"]
    )]
    pub idx: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug, Clone)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 250)]
    pub test_per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Standard deviation of pixel noise.
    #[arg(long, default_value_t = 0.25)]
    pub noise: f32,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic train/test pair as PKDS files.
    GenerateSynthetic(SyntheticArgs),
    /// Train a baseline network and save it as baseline.ckpt.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Prune a baseline checkpoint to the configured FLOPs target.
    Prune {
        #[arg(long, value_name = "CKPT")]
        baseline: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Emit cost, width, group and phase reports.
    Report {
        #[arg(long, value_name = "CKPT", required_unless_present = "runlog")]
        checkpoint: Option<PathBuf>,
        /// Reference checkpoint for the reduction columns.
        #[arg(long, value_name = "CKPT", requires = "checkpoint")]
        baseline: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        runlog: Option<PathBuf>,
    },
    /// Report test accuracy of a checkpoint.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let ctx = commands::Context {
        seed: cli.seed,
        config: cli.config,
        out_dir: cli.out_dir,
    };
    let result = match cli.command {
        Command::GenerateSynthetic(args) => commands::generate_synthetic(&ctx, &args),
        Command::Train { data } => commands::train(&ctx, &data),
        Command::Prune { baseline, data } => commands::prune(&ctx, &baseline, &data),
        Command::Report {
            checkpoint,
            baseline,
            runlog,
        } => commands::report(&ctx, checkpoint.as_deref(), baseline.as_deref(), runlog.as_deref()),
        Command::Eval { checkpoint, data } => commands::eval(&ctx, &checkpoint, &data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("prunekit: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
