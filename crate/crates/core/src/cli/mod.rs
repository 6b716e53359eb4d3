//! Command-line front end. Every subcommand writes machine-readable output
//! (JSON or JSONL) to files or stdout; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 environment or I/O error, 2 data error
//! (including malformed arguments).

mod commands;
mod features;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::tokenizer::Granularity;
use crate::train::SimilarityMode;

pub use features::{score_matrices, ImageInputs, TextInputs};

#[derive(Debug, Parser)]
#[command(
    name = "vlkit",
    version,
    about = "Chinese image-text pretraining toolkit",
    args_override_self = true,
    after_help = FORMATS_HELP
)]
pub struct Cli {
    /// Worker threads; 0 uses all cores. 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// key=value file applied before the command-line flags. Keys are flag
    /// names with `_` or `-`; `true` turns on a switch.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

const FORMATS_HELP: &str = "\
File formats:
  corpus JSONL     {\"id\", \"caption\", \"width\", \"height\", \"keyword\"?, \"url\"?, ...}
  rejects JSONL    {\"id\", \"stage\", \"reason\"}; stage is null for unreadable lines
  captions JSONL   {\"id\", \"caption\", \"image\"?}; without image the id is the item index
  vocab            one WordPiece token per line
  WKEB             binary embedding file (magic, dims, grid, f32 payload, mask)
  checkpoint       WKCK binary: JSON header plus named f32 tensors
  ground truth     JSONL {\"query_id\", \"positives\": [ids]}; image ids are item indices
  labels           one class index per line
  classes          one class name per line
  prompts          one template per line with a single {} placeholder";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a JSONL corpus into kept records and a rejection log.
    Filter(FilterArgs),
    /// Token statistics of the captions in a JSONL file.
    Stats(StatsArgs),
    /// Encode captions into fixed-length token id sequences.
    Tokenize(TokenizeArgs),
    /// Train the text tower against frozen image embeddings.
    Train(TrainArgs),
    /// Recall@{1,5,10} and mean recall for image-text retrieval.
    EvalRetrieval(RetrievalArgs),
    /// Zero-shot classification with a prompt ensemble.
    EvalZeroshot(ZeroShotArgs),
    /// Pairwise image-text similarities.
    Score(ScoreArgs),
    /// For each image grid cell, the text token it matches best.
    AlignMap(AlignMapArgs),
    /// Write a small synthetic image-caption task.
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Filter(_) => "filter",
            Self::Stats(_) => "stats",
            Self::Tokenize(_) => "tokenize",
            Self::Train(_) => "train",
            Self::EvalRetrieval(_) => "eval-retrieval",
            Self::EvalZeroshot(_) => "eval-zeroshot",
            Self::Score(_) => "score",
            Self::AlignMap(_) => "align-map",
            Self::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Char,
    Word,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Char => Granularity::Char,
            GranularityArg::Word => Granularity::Word,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Both,
    I2t,
    T2i,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Input corpus JSONL.
    pub input: PathBuf,
    /// Kept records, JSONL.
    pub kept: PathBuf,
    /// Rejection log, JSONL.
    pub rejects: PathBuf,
    /// Person-name lexicon, one entry per line.
    #[arg(long)]
    pub names: Option<PathBuf>,
    /// Sensitive-word lexicon, one entry per line.
    #[arg(long)]
    pub sensitive: Option<PathBuf>,
    #[arg(long)]
    pub min_dim: Option<u32>,
    #[arg(long)]
    pub max_aspect: Option<f64>,
    #[arg(long)]
    pub min_cjk_chars: Option<usize>,
    #[arg(long)]
    pub max_cjk_chars: Option<usize>,
    #[arg(long)]
    pub max_text_frequency: Option<u64>,
    #[arg(long)]
    pub keyword_cap: Option<usize>,
    #[arg(long)]
    pub person_token: Option<String>,
    /// Exit with status 2 when more input lines than this fail to parse.
    #[arg(long)]
    pub max_errors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// JSONL with a `caption` field per line.
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = GranularityArg::Char)]
    pub granularity: GranularityArg,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// One caption per line (or captions JSONL with --jsonl); stdin when absent.
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = GranularityArg::Char)]
    pub granularity: GranularityArg,
    /// Read captions JSONL and carry each record's id into the output.
    #[arg(long)]
    pub jsonl: bool,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Frozen image embeddings (WKEB).
    #[arg(long)]
    pub images: PathBuf,
    /// Captions JSONL paired with the image items.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint written at the end of training.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step and validation log, JSONL.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, requires = "val_captions")]
    pub val_images: Option<PathBuf>,
    #[arg(long, requires = "val_images")]
    pub val_captions: Option<PathBuf>,
    /// Continue from this checkpoint; its architecture must match the flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GranularityArg::Char)]
    pub granularity: GranularityArg,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Total optimizer steps; overrides --epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub lamb_eps: Option<f64>,
    #[arg(long)]
    pub mode: Option<SimilarityMode>,
    /// Tokens kept by the reducer in reduced mode.
    #[arg(long)]
    pub n_prime: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Validate every N steps; 0 means once per epoch.
    #[arg(long)]
    pub val_every: Option<usize>,
}

/// Where the two sides of a comparison come from. Images are always a WKEB
/// file; texts are either a WKEB file of token features already in the
/// shared space, or captions encoded by the checkpoint's text tower.
#[derive(Debug, Args)]
pub struct PairInputArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Text token features (WKEB).
    #[arg(long, conflicts_with = "captions")]
    pub texts: Option<PathBuf>,
    /// Captions JSONL; needs --checkpoint and --vocab.
    #[arg(long, requires_all = ["checkpoint", "vocab"])]
    pub captions: Option<PathBuf>,
    /// Trained model. Images go through its image side; captions through
    /// its text tower.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GranularityArg::Char)]
    pub granularity: GranularityArg,
    #[arg(long, default_value_t = SimilarityMode::Global)]
    pub mode: SimilarityMode,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub inputs: PairInputArgs,
    #[arg(long, value_enum, default_value_t = Direction::Both)]
    pub direction: Direction,
    /// Image-to-text ground truth; default pairs each image with its captions.
    #[arg(long)]
    pub gt_i2t: Option<PathBuf>,
    /// Text-to-image ground truth.
    #[arg(long)]
    pub gt_t2i: Option<PathBuf>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Class index of every image item.
    #[arg(long)]
    pub labels: PathBuf,
    /// Class names.
    #[arg(long)]
    pub classes: PathBuf,
    /// Prompt templates; the bundled Chinese set when absent.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GranularityArg::Char)]
    pub granularity: GranularityArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub inputs: PairInputArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignMapArgs {
    #[command(flatten)]
    pub inputs: PairInputArgs,
    #[arg(long, default_value_t = 0)]
    pub image_index: usize,
    #[arg(long, default_value_t = 0)]
    pub text_index: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Token grid as HxW; one token per item when absent.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("grid height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("grid width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((h, w))
}

/// Turns `key=value` lines into flag tokens.
fn config_tokens(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        if key.is_empty() || key == "config" {
            return Err(Error::Config(format!("config line {}: bad key {k:?}", n + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => out.push(format!("--{key}={value}").into()),
        }
    }
    Ok(out)
}

/// Parses `args`, applying the config-file overlay if one is named. Flags
/// given on the command line override the file.
fn parse(args: Vec<OsString>) -> std::result::Result<Cli, ParseFailure> {
    let first = Cli::try_parse_from(&args).map_err(ParseFailure::Clap)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(path).map_err(|e| ParseFailure::Lib(Error::io(path, e)))?;
    let extra = config_tokens(&text).map_err(ParseFailure::Lib)?;
    let name = first.command.name();
    let pos = args
        .iter()
        .skip(1)
        .position(|a| a == name)
        .map(|p| p + 1)
        .expect("subcommand token is present");
    let mut merged = args[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos + 1..]);
    Cli::try_parse_from(&merged).map_err(ParseFailure::Clap)
}

enum ParseFailure {
    Clap(clap::Error),
    Lib(Error),
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_data_error() {
        2
    } else {
        1
    }
}

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(args) {
        Ok(c) => c,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
        Err(ParseFailure::Lib(e)) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if cli.threads > 0 {
        // Fails only if the global pool already exists (repeated in-process
        // runs); the first setting stays in force.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    log::info!("resolved config: {cli:?}");
    match commands::dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let t = config_tokens("# c\nmax_len = 16\njsonl=true\nx=false\n\n").unwrap();
        assert_eq!(t, vec![OsString::from("--max-len=16"), OsString::from("--jsonl")]);
        assert!(config_tokens("novalue").is_err());
        assert!(config_tokens("config=x").is_err());
    }

    #[test]
    fn grid_parse() {
        assert_eq!(parse_grid("4x3"), Ok((4, 3)));
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("0x3").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "max_len=16\ngranularity=word\n").unwrap();
        let args: Vec<OsString> = ["vlkit", "tokenize", "--vocab", "v", "--max-len", "8"]
            .iter()
            .map(OsString::from)
            .chain([OsString::from("--config"), cfg.clone().into_os_string()])
            .collect();
        let Ok(cli) = parse(args) else {
            panic!("parse failed")
        };
        let Command::Tokenize(t) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(t.max_len, 8);
        assert_eq!(t.granularity, GranularityArg::Word);
    }

    #[test]
    fn unknown_config_key_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "no_such_flag=1\n").unwrap();
        let args: Vec<OsString> = vec![
            "vlkit".into(),
            "--config".into(),
            cfg.into_os_string(),
            "tokenize".into(),
            "--vocab".into(),
            "v".into(),
        ];
        assert!(matches!(parse(args), Err(ParseFailure::Clap(_))));
    }
}
