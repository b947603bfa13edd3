mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CmdResult, Failure, TrackerSpec, TrainPaths};
use config::Config;

#[derive(Parser)]
#[command(name = "distrack", version, about = "Train and run a compact student tracker distilled from teacher trackers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Trackers {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Teacher id for `trast` and `teacher` modes.
    #[arg(long)]
    teacher: Option<String>,
    /// Comma-separated teacher ids for fusion.
    #[arg(long, value_delimiter = ',')]
    pool: Vec<String>,
    /// Replay recorded teacher traces from this directory instead of running live teachers.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Use true IoU in place of the value head when choosing boxes.
    #[arg(long)]
    oracle_evaluator: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Record every configured teacher on a dataset.
    RunTeachers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Filter teacher trajectories and cut the transfer set into chunks.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train the student on a filtered transfer set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        /// Output directory of `filter`.
        #[arg(long)]
        transfer: PathBuf,
        /// Held-out videos for validation and early stopping.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Track every video with the student alone (tras) or with a teacher (trast).
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "tras")]
        mode: String,
        #[command(flatten)]
        trackers: Trackers,
    },
    /// Track every video by fusing a teacher pool.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        trackers: Trackers,
    },
    /// One-pass evaluation of one or more trackers.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated modes: tras, trast, trasfust, teacher.
        #[arg(long, value_delimiter = ',', default_value = "tras")]
        mode: Vec<String>,
        #[command(flatten)]
        trackers: Trackers,
    },
    /// Finite-difference check of the student's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 60)]
        samples: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::RunTeachers { common, .. }
            | Command::Filter { common, .. }
            | Command::Train { common, .. }
            | Command::Track { common, .. }
            | Command::Fuse { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn spec(t: &Trackers) -> TrackerSpec<'_> {
    TrackerSpec {
        checkpoint: t.checkpoint.as_deref(),
        teacher: t.teacher.as_deref(),
        pool: &t.pool,
        traces: t.traces.as_deref(),
    }
}

fn effective_config(cmd: &Command) -> CmdResult<Config> {
    let common = cmd.common();
    let mut cfg = Config::load(common.config.as_deref())?;
    match cmd {
        Command::GenData { .. } => {
            cfg.env.seed = Some(commands::require_seed(common.seed, cfg.env.seed, "gen-data")?);
        }
        Command::Train { beta, .. } => {
            cfg.train.seed = Some(commands::require_seed(common.seed, cfg.train.seed, "train")?);
            if let Some(b) = beta {
                cfg.train.beta = *b;
            }
        }
        Command::Filter { beta, .. } => {
            if let Some(s) = common.seed {
                cfg.train.seed = Some(s);
            }
            if let Some(b) = beta {
                cfg.train.beta = *b;
            }
        }
        Command::Track { trackers, .. } | Command::Fuse { trackers, .. } | Command::Eval { trackers, .. } => {
            if trackers.oracle_evaluator {
                cfg.eval.evaluator = config::EvaluatorName::Oracle;
            }
        }
        Command::RunTeachers { .. } | Command::Gradcheck { .. } => {}
    }
    Ok(cfg)
}

fn run(cmd: &Command, cfg: &Config, out: &Path) -> CmdResult {
    std::fs::create_dir_all(out).map_err(|e| {
        Failure::Core(distrack_core::Error::Io {
            context: format!("creating {}", out.display()),
            source: e,
        })
    })?;
    cfg.echo(out)?;
    match cmd {
        Command::GenData { .. } => commands::gen_data(cfg, out),
        Command::RunTeachers { data, .. } => commands::run_teachers(cfg, data, out),
        Command::Filter { data, traces, .. } => commands::filter(cfg, data, traces, out),
        Command::Train {
            data,
            traces,
            transfer,
            validation,
            ..
        } => commands::train_cmd(
            cfg,
            &TrainPaths {
                data,
                traces,
                transfer,
                validation: validation.as_deref(),
            },
            out,
        ),
        Command::Track { data, mode, trackers, .. } => {
            if mode != "tras" && mode != "trast" {
                return Err(Failure::Usage(format!("track supports --mode tras|trast, not `{mode}`")));
            }
            let tracker = commands::build_tracker(cfg, mode, &spec(trackers))?;
            commands::track(tracker.as_ref(), data, out)
        }
        Command::Fuse { data, trackers, .. } => {
            let tracker = commands::build_tracker(cfg, "trasfust", &spec(trackers))?;
            commands::track(tracker.as_ref(), data, out)
        }
        Command::Eval { data, mode, trackers, .. } => commands::eval(cfg, mode, &spec(trackers), data, out),
        Command::Gradcheck { common, samples } => commands::gradcheck(cfg, common.seed.unwrap_or(0), *samples, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = cli.command.common().out.clone();
    let result = effective_config(&cli.command).and_then(|cfg| run(&cli.command, &cfg, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            if !matches!(f, Failure::Verification(_)) {
                if let Some(q) = commands::quarantine(&out) {
                    eprintln!("partial outputs moved to {}", q.display());
                }
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
