use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use posekit_cli::commands::{self, Common, EvalOpts, PoseOpts, TrainKind, TrainOpts};
use posekit_cli::eval::{GroupingKind, ScoringKind};

#[derive(Parser)]
#[command(name = "posekit", version, about = "Heatmap-to-pose back-end: data, training, evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (falls back to POSEKIT_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, repeatable: --set pg.epochs=3
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits
    Datagen,
    /// Check a generated dataset against the generator's invariants
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the grouping (pgm) or correspondence (corrnet) network
    Train {
        #[arg(value_enum)]
        kind: TrainKind,
        /// Dataset directory (defaults to --out)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in --out
        #[arg(long)]
        resume: bool,
        /// Train every grouping configuration and write an FPS table
        #[arg(long)]
        sweep: bool,
    },
    /// Evaluate grouping x scoring combinations on the test split
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with pgm.npk / corrnet.npk (defaults to --out)
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum)]
        grouping: Option<GroupingKind>,
        #[arg(long, value_enum)]
        scoring: Option<ScoringKind>,
    },
    /// Estimate the pose of one HMS1 heatmap stack
    Pose {
        #[arg(long)]
        stack: PathBuf,
        /// fx,fy,cx,cy
        #[arg(long, value_parser = parse_list::<4>)]
        intrinsics: [f64; 4],
        /// Box extents dx,dy,dz in meters
        #[arg(long, value_parser = parse_list::<3>)]
        extent: [f64; 3],
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pgm")]
        grouping: GroupingKind,
        #[arg(long, value_enum, default_value = "corrnet")]
        scoring: ScoringKind,
    },
}

fn parse_list<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn run(cli: Cli) -> Result<()> {
    let threads = posekit_cli::thread_count(cli.global.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker pool")?;
    let g = cli.global;
    let common = Common {
        config: g.config,
        seed: g.seed,
        set: g.set,
        out: g.out.clone(),
    };
    let or_out = |d: Option<PathBuf>| d.unwrap_or_else(|| g.out.clone());
    match cli.command {
        Command::Datagen => commands::cmd_datagen(&common),
        Command::Validate { data } => commands::cmd_validate(&common, &or_out(data)),
        Command::Train {
            kind,
            data,
            resume,
            sweep,
        } => commands::cmd_train(
            &common,
            &TrainOpts {
                kind,
                data: or_out(data),
                resume,
                sweep,
            },
        ),
        Command::Eval {
            data,
            models,
            grouping,
            scoring,
        } => commands::cmd_eval(
            &common,
            &EvalOpts {
                data: or_out(data),
                models,
                grouping,
                scoring,
            },
        ),
        Command::Pose {
            stack,
            intrinsics,
            extent,
            models,
            grouping,
            scoring,
        } => commands::cmd_pose(
            &common,
            &PoseOpts {
                stack,
                intrinsics,
                extent,
                models,
                grouping,
                scoring,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
