use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lsattn::commands::{self, SynthArgs, TrainArgs};
use lsattn::CliResult;
use lsattn_core::config::Task;
use lsattn_core::data::{Signal, Split};

#[derive(Parser)]
#[command(name = "lsattn", version, about = "Layer-spatial attention: synthesis, training, evaluation and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Pose,
    Class,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Texture,
    Layout,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "mixed")]
        signal: SignalArg,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Train a model into a run directory
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue the run in --out from its latest checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print key=value metrics
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Layer selection frequencies from a run's traces
    ReportLsf {
        #[arg(long)]
        run: PathBuf,
    },
    /// Export per-step attention heatmaps for one example
    Heatmaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        example: usize,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Finite-difference gradient checks for every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's gradient (harness self-test)
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn threads() -> usize {
    std::env::var("LSATTN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Synth {
            task,
            out: dir,
            n,
            seed,
            signal,
            split,
            size,
            classes,
        } => {
            let args = SynthArgs {
                task: match task {
                    TaskArg::Pose => Task::Pose,
                    TaskArg::Class => Task::Class,
                },
                out: &dir,
                n,
                seed,
                signal: match signal {
                    SignalArg::Texture => Signal::Texture,
                    SignalArg::Layout => Signal::Layout,
                    SignalArg::Mixed => Signal::Mixed,
                },
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                size,
                classes,
            };
            commands::synth(&args, &mut out, &mut io::stderr())
        }
        Command::Train {
            config,
            data,
            out: dir,
            seed,
            resume,
        } => commands::train(
            &TrainArgs {
                config: config.as_deref(),
                data: &data,
                out: &dir,
                seed,
                resume,
                threads: threads(),
            },
            &mut out,
        ),
        Command::Eval { run, data, checkpoint } => commands::eval(&run, &data, checkpoint.as_deref(), threads(), &mut out),
        Command::ReportLsf { run } => commands::report_lsf(&run, &mut out),
        Command::Heatmaps {
            run,
            data,
            example,
            checkpoint,
        } => commands::heatmaps(&run, &data, example, checkpoint.as_deref(), &mut out),
        Command::Gradcheck { seed, corrupt } => commands::gradcheck(seed, corrupt.as_deref(), &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
