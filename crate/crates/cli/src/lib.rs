//! The `mmpack` command-line tool: curate caption shards, pack them into
//! fixed-context multimodal sequences and inspect the resulting containers.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use mmpack::curation::Metric;
use mmpack::projector::{TokenMode, ENCODER_GRID_SIDE, PRETRAIN_POOL_SIDE};

use config::{CommonArgs, RunConfig};
use error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "mmpack",
    version,
    about = "Curate and pack image-text caption shards"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Keep samples whose score for a metric is at least a threshold.
    Filter {
        #[command(flatten)]
        common: CommonArgs,
        /// Score name, e.g. su, itm, odf, ctq, clip.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// NDJSON score table joined onto samples by uid.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Select samples listed in a uid set and rewrite them into full shards.
    Reshard {
        #[command(flatten)]
        common: CommonArgs,
        /// Text (one uid per line) or binary uid set.
        #[arg(long)]
        uid_set: Option<PathBuf>,
        #[arg(long)]
        shard_capacity: Option<usize>,
    },
    /// Pack each shard into a `.mmpk` container.
    Pack {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Padding and mixture statistics for existing containers.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
        /// Also list every record.
        #[arg(long)]
        per_record: bool,
        /// Mixture source as `name=count`; repeatable.
        #[arg(long, value_parser = commands::stats::parse_mixture_entry)]
        mixture: Vec<(String, f64)>,
    },
    /// Check container checksums and sequence invariants.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Container paths or globs.
        paths: Vec<String>,
    },
    /// Visual token cost of images under the pooling projector.
    Budget {
        #[arg(long, default_value_t = 1)]
        images: usize,
        #[arg(long, value_enum, default_value_t = Mode::Pretrain)]
        mode: Mode,
        #[arg(long, default_value_t = ENCODER_GRID_SIDE)]
        grid: usize,
        #[arg(long, default_value_t = PRETRAIN_POOL_SIDE)]
        pool: usize,
        /// Print the per-axis pooling windows.
        #[arg(long)]
        windows: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pretrain,
    Sft,
}

impl From<Mode> for TokenMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pretrain => TokenMode::Pretrain,
            Mode::Sft => TokenMode::Sft,
        }
    }
}

fn finish<T: Display>(summary: T, code: i32) -> i32 {
    // a closed stdout (e.g. piped into `head`) is not a failure of the run
    let _ = writeln!(std::io::stdout().lock(), "{summary}");
    code
}

fn fail(err: CliError) -> i32 {
    eprintln!("mmpack: {err}");
    err.exit_code()
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Filter {
            common,
            metric,
            threshold,
            scores,
        } => RunConfig::resolve(&common).and_then(|mut cfg| {
            if let Some(m) = metric {
                cfg.metric = Metric::from_name(&m);
            }
            cfg.threshold = threshold.or(cfg.threshold);
            cfg.scores = scores.or(cfg.scores);
            commands::filter::run(&cfg).map(|s| {
                let code = s.exit_code();
                finish(s, code)
            })
        }),
        Command::Reshard {
            common,
            uid_set,
            shard_capacity,
        } => RunConfig::resolve(&common).and_then(|mut cfg| {
            cfg.uid_set = uid_set.or(cfg.uid_set);
            if let Some(n) = shard_capacity {
                if n == 0 {
                    return Err(CliError::Usage("shard_capacity must be at least 1".into()));
                }
                cfg.shard_capacity = n;
            }
            commands::reshard::run(&cfg).map(|s| {
                let code = s.exit_code();
                finish(s, code)
            })
        }),
        Command::Pack { common } => RunConfig::resolve(&common).and_then(|cfg| {
            commands::pack::run(&cfg).map(|s| {
                let code = s.exit_code();
                finish(s, code)
            })
        }),
        Command::Stats {
            common,
            per_record,
            mixture,
        } => RunConfig::resolve(&common).and_then(|cfg| {
            let opts = commands::stats::StatsOptions {
                per_record,
                mixture,
            };
            commands::stats::run(&cfg, &opts).map(|s| {
                let code = s.exit_code();
                finish(s, code)
            })
        }),
        Command::Verify { common, paths } => RunConfig::resolve(&common).and_then(|cfg| {
            commands::verify::run(&cfg, &paths).map(|s| {
                if let Some(first) = s.first_failure() {
                    eprintln!("mmpack: verify failed: {first}");
                }
                let code = s.exit_code();
                finish(s, code)
            })
        }),
        Command::Budget {
            images,
            mode,
            grid,
            pool,
            windows,
        } => commands::budget::run(images, mode.into(), grid, pool, windows)
            .map(|s| finish(s, EXIT_OK)),
    };
    result.unwrap_or_else(fail)
}

/// Parses `args` (including the program name) and runs the command.
/// Argument errors exit with the usage code; `--help` and `--version` exit 0.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
