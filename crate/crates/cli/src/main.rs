//! `facedyn`: synthetic corpora, training, evaluation and the drift,
//! length and enrollment analyses from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use facedyn_core::encoders::EncoderConfig;
use facedyn_core::synthgen::SynthConfig;
use facedyn_core::trainer::TrainConfig;

use crate::config::EvalSettings;

const ARCHS: [&str; 6] = ["gru", "ms_gru", "tcn", "ms_tcn", "transformer", "conformer"];

fn synth_d() -> SynthConfig {
    SynthConfig::default()
}
fn enc_d() -> EncoderConfig {
    EncoderConfig::default()
}
fn train_d() -> TrainConfig {
    TrainConfig::default()
}
fn eval_d() -> EvalSettings {
    EvalSettings::default()
}

/// Identify people from facial expression and jaw dynamics.
///
/// Settings resolve in order: command-line flag, then the --config file,
/// then the built-in default shown next to each flag.
#[derive(Debug, Parser)]
#[command(name = "facedyn", version)]
pub struct Cli {
    /// Log progress to stderr (-vv for debug output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config with optional [synth], [encoder], [train] and [eval] tables [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the command
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted identity signatures
    Synth(SynthArgs),
    /// Check a manifest for group, session and file consistency
    Validate(ValidateArgs),
    /// Train an encoder or classifier
    Train(TrainArgs),
    /// Accuracy and macro-F1 of a checkpoint on the test split
    Eval(EvalArgs),
    /// Drift-to-noise ratio per identity from shape statistics
    Dnr(DnrArgs),
    /// Recall by DNR, accuracy by clip length, or accuracy by enrollment
    Analyze(AnalyzeArgs),
    /// Write every table and plot for a checkpoint into one directory
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = synth_d().num_speakers)]
    pub speakers: usize,
    /// Utterances per speaker
    #[arg(long, default_value_t = synth_d().utterances_per_speaker)]
    pub utterances: usize,
    /// Sessions per cross-session (GB) speaker
    #[arg(long, default_value_t = synth_d().sessions_per_speaker)]
    pub sessions: usize,
    #[arg(long, default_value_t = synth_d().frames_per_utterance[0])]
    pub min_frames: usize,
    #[arg(long, default_value_t = synth_d().frames_per_utterance[1])]
    pub max_frames: usize,
    #[arg(long, default_value_t = synth_d().signature_dim)]
    pub signature_dim: usize,
    #[arg(long, default_value_t = synth_d().noise_std)]
    pub noise_std: f64,
    #[arg(long, default_value_t = synth_d().shape_drift_scale)]
    pub drift_scale: f64,
    #[arg(long, default_value_t = synth_d().drift_spread)]
    pub drift_spread: f64,
    /// Shape leakage into the dynamics, in [0, 1]
    #[arg(long, default_value_t = synth_d().leakage_strength)]
    pub leakage: f64,
    /// Leading fraction of speakers recorded in one session (GA)
    #[arg(long, default_value_t = synth_d().ga_fraction)]
    pub ga_fraction: f64,
    #[arg(long, default_value_t = synth_d().val_fraction)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = synth_d().test_fraction)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = synth_d().fps)]
    pub fps: f64,
    /// Training utterances per speaker, cycled over speakers [default: from --utterances]
    #[arg(long, value_delimiter = ',')]
    pub train_utterances: Option<Vec<usize>>,
    /// Regenerate with speakers split over these leakage strengths [default: none]
    #[arg(long, value_delimiter = ',')]
    pub leakage_strata: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Manifest of utterance records (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Skip the check that every sequence file exists
    #[arg(long)]
    pub no_files: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    /// Stage 1: encoder under supervised contrastive loss
    Supcon,
    /// Stage 2: classifier head on a frozen encoder
    Classifier,
    /// Encoder and head end to end under focal loss
    Joint,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Manifest of utterance records (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint whose encoder stage 2 freezes [default: none]
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,

    #[arg(long, default_value_t = enc_d().arch.name().to_string(), value_parser = ARCHS)]
    pub arch: String,
    #[arg(long, default_value_t = enc_d().embed_dim)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = enc_d().num_blocks)]
    pub blocks: usize,
    #[arg(long, default_value_t = enc_d().num_heads)]
    pub heads: usize,
    #[arg(long, default_value_t = enc_d().hidden_dim)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = enc_d().ff_mult)]
    pub ff_mult: usize,
    /// Conformer depthwise convolution kernel
    #[arg(long, default_value_t = enc_d().conv_kernel)]
    pub conv_kernel: usize,
    /// TCN kernel sizes [default: 3 for tcn, 3,5,7,9 for ms_tcn]
    #[arg(long, value_delimiter = ',')]
    pub kernel_sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = enc_d().dropout)]
    pub dropout: f64,

    #[arg(long, default_value_t = train_d().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = train_d().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = train_d().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = train_d().weight_decay)]
    pub weight_decay: f64,
    /// Training crop/pad length in frames
    #[arg(long, default_value_t = train_d().policy.max_length)]
    pub max_length: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = train_d().patience)]
    pub patience: usize,
    /// Speaker-grouped batches [default: true for supcon, false otherwise]
    #[arg(long)]
    pub balanced: Option<bool>,
    /// Utterances per speaker in a balanced batch
    #[arg(long, default_value_t = train_d().per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = train_d().supcon.temperature)]
    pub temperature: f64,
    #[arg(long, default_value_t = train_d().supcon.queue_capacity)]
    pub queue_size: usize,
    /// Focal loss focusing parameter
    #[arg(long, default_value_t = train_d().focal.gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = train_d().label_smoothing)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = train_d().cosine_scale)]
    pub cosine_scale: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest of utterance records (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint with a classifier head
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TOML run config; only the [eval] table is used [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation crop/pad length in frames
    #[arg(long, default_value_t = eval_d().max_length)]
    pub max_length: usize,
}

#[derive(Debug, Args)]
pub struct DnrArgs {
    /// JSON lines of per-(speaker, session) shape mean and std
    #[arg(long)]
    pub shape_stats: PathBuf,
    /// TOML run config; only the [eval] table is used [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Added to the noise term of the ratio
    #[arg(long, default_value_t = eval_d().epsilon)]
    pub epsilon: f64,
    /// Print the report as JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    DnrRecall,
    Length,
    Enrollment,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Manifest of utterance records (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint with a classifier head
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Shape statistics, needed for the DNR analysis [default: none]
    #[arg(long)]
    pub shape_stats: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = eval_d().max_length)]
    pub max_length: usize,
    /// Crop/pad lengths of the length sweep
    #[arg(long, value_delimiter = ',', default_values_t = eval_d().lengths)]
    pub lengths: Vec<usize>,
    /// Equal-count DNR bins
    #[arg(long, default_value_t = eval_d().dnr_bins)]
    pub bins: usize,
    #[arg(long, default_value_t = eval_d().bootstrap_iters)]
    pub bootstrap_iters: usize,
    #[arg(long, default_value_t = eval_d().epsilon)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub kind: AnalysisKind,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(facedyn_core::Error),
}

impl From<facedyn_core::Error> for Failure {
    fn from(e: facedyn_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// True when the flag was typed on the command line rather than defaulted.
pub fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

fn one_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| {
            !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(2)
                }
                _ => {
                    eprintln!("facedyn: {}", one_line(&e.render().to_string()));
                    ExitCode::from(2)
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("facedyn: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    match commands::run(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("facedyn: error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("facedyn: error: {}", one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
