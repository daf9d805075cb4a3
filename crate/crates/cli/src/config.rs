//! Run configuration: a flat `key = value` file (TOML syntax) overridden by
//! command-line flags.
//!
//! ```toml
//! input = "shards/*.tar"
//! output = "out"
//! prefix = "packed"
//! tokenizer = "byte"            # or "vocab" with vocab_path
//! context_length = 4096
//! visual_tokens_per_image = 144
//! metric = "su"
//! threshold = 85
//! workers = 8
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use mmpack::curation::Metric;
use mmpack::ingest::SHARD_CAPACITY;
use mmpack::lengths::{
    check_special_ids, PackerConfig, SpecialTokens, TokenizerPort, TokenizerSpec,
    DEFAULT_CONTEXT_LENGTH, PRETRAIN_TOKENS_PER_IMAGE,
};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<String>,
    pub output: Option<PathBuf>,
    pub prefix: Option<String>,
    pub tokenizer: Option<String>,
    pub vocab_path: Option<PathBuf>,
    pub image_token: Option<String>,
    pub separator_token: Option<String>,
    pub pad_token: Option<String>,
    pub unk_token: Option<String>,
    pub context_length: Option<usize>,
    pub visual_tokens_per_image: Option<usize>,
    pub metric: Option<String>,
    pub threshold: Option<f64>,
    pub scores: Option<PathBuf>,
    pub uid_set: Option<PathBuf>,
    pub shard_capacity: Option<usize>,
    pub workers: Option<usize>,
    pub report: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|reason| CliError::Config {
            path: path.to_owned(),
            reason,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_owned())
    }
}

/// Flags shared by every pipeline subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Config file with default values for the flags below.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Input glob (shards or containers, depending on the command).
    #[arg(long, short = 'i')]
    pub input: Option<String>,
    /// Output directory.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Output file name prefix.
    #[arg(long)]
    pub prefix: Option<String>,
    /// `byte` or `vocab`.
    #[arg(long)]
    pub tokenizer: Option<String>,
    /// Vocabulary file, one token per line, for `--tokenizer vocab`.
    #[arg(long)]
    pub vocab_path: Option<PathBuf>,
    /// Sequence length L in expanded tokens [default: 4096].
    #[arg(long)]
    pub context_length: Option<usize>,
    /// Visual tokens per image [default: 144].
    #[arg(long)]
    pub visual_tokens_per_image: Option<usize>,
    /// Worker threads [default: 1].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Machine-readable report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<String>,
    pub output: Option<PathBuf>,
    pub prefix: String,
    pub tokenizer: TokenizerSpec,
    pub context_length: usize,
    pub visual_tokens_per_image: usize,
    pub metric: Metric,
    pub threshold: Option<f64>,
    pub scores: Option<PathBuf>,
    pub uid_set: Option<PathBuf>,
    pub shard_capacity: usize,
    pub workers: usize,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            output: None,
            prefix: "packed".into(),
            tokenizer: TokenizerSpec::Byte,
            context_length: DEFAULT_CONTEXT_LENGTH,
            visual_tokens_per_image: PRETRAIN_TOKENS_PER_IMAGE,
            metric: Metric::Su,
            threshold: None,
            scores: None,
            uid_set: None,
            shard_capacity: SHARD_CAPACITY,
            workers: 1,
            report: None,
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

impl RunConfig {
    /// Defaults, then the config file named by `args.config`, then flags.
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Self::merge(file, args)
    }

    pub fn merge(file: FileConfig, args: &CommonArgs) -> Result<Self, CliError> {
        let defaults = RunConfig::default();
        let tokenizer_kind = pick(args.tokenizer.clone(), file.tokenizer.clone());
        let vocab_path = pick(args.vocab_path.clone(), file.vocab_path.clone());
        let tokenizer = match tokenizer_kind.as_deref() {
            None | Some("byte") => TokenizerSpec::Byte,
            Some("vocab") => {
                let path = vocab_path.ok_or_else(|| {
                    CliError::Usage("tokenizer = \"vocab\" needs vocab_path".into())
                })?;
                let d = SpecialTokens::default();
                TokenizerSpec::Vocab {
                    path,
                    specials: SpecialTokens {
                        image: file.image_token.unwrap_or(d.image),
                        separator: file.separator_token.unwrap_or(d.separator),
                        pad: file.pad_token.unwrap_or(d.pad),
                        unk: file.unk_token.unwrap_or(d.unk),
                    },
                }
            }
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown tokenizer {other:?}; expected \"byte\" or \"vocab\""
                )))
            }
        };
        let workers = pick(args.workers, file.workers).unwrap_or(defaults.workers);
        if workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        let shard_capacity = file.shard_capacity.unwrap_or(defaults.shard_capacity);
        if shard_capacity == 0 {
            return Err(CliError::Usage("shard_capacity must be at least 1".into()));
        }
        Ok(RunConfig {
            input: pick(args.input.clone(), file.input),
            output: pick(args.output.clone(), file.output),
            prefix: pick(args.prefix.clone(), file.prefix).unwrap_or(defaults.prefix),
            tokenizer,
            context_length: pick(args.context_length, file.context_length)
                .unwrap_or(defaults.context_length),
            visual_tokens_per_image: pick(
                args.visual_tokens_per_image,
                file.visual_tokens_per_image,
            )
            .unwrap_or(defaults.visual_tokens_per_image),
            metric: file
                .metric
                .map_or(defaults.metric, |m| Metric::from_name(&m)),
            threshold: file.threshold,
            scores: file.scores,
            uid_set: file.uid_set,
            shard_capacity,
            workers,
            report: pick(args.report.clone(), file.report),
        })
    }

    pub fn input(&self) -> Result<&str, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Usage("no input glob given (--input or `input =`)".into()))
    }

    pub fn output(&self) -> Result<&Path, CliError> {
        self.output.as_deref().ok_or_else(|| {
            CliError::Usage("no output directory given (--output or `output =`)".into())
        })
    }

    pub fn load_tokenizer(&self) -> Result<Box<dyn TokenizerPort + Send + Sync>, CliError> {
        let tok = self
            .tokenizer
            .load()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        check_special_ids(tok.as_ref()).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(tok)
    }

    pub fn packer_config(&self, tok: &dyn TokenizerPort) -> Result<PackerConfig, CliError> {
        PackerConfig::new(
            self.context_length,
            self.visual_tokens_per_image,
            tok.pad_id(),
        )
        .map_err(|e| CliError::Usage(e.to_string()))
    }

    /// A pool with exactly `workers` threads.
    pub fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", self.workers)))
    }
}
