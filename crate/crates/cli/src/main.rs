mod commands;
mod error;
mod manifest;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "crop", version, about = "Composition-aware aesthetic cropping toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Crop images with the analysis, proposal and decision stages
    Run(RunArgs),
    /// Draw composition overlays on an image
    Enhance(EnhanceArgs),
    /// Generate rule-based candidate crops for annotated elements
    Propose(ProposeArgs),
    /// Build analysis and proposal dialogues from element annotations
    BuildCrp(BuildCrpArgs),
    /// Build decision dialogues from scored crops
    BuildSft(BuildSftArgs),
    /// Build preference pairs from scored crops or study votes
    BuildDpo(BuildDpoArgs),
    /// Score predicted crops against ground truth
    Eval(EvalArgs),
    /// Evaluate fine-tuning losses and check their gradients
    LossCheck(LossCheckArgs),
    /// Serve the pairwise preference study
    ServeStudy(ServeStudyArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Output directory; receives the artifacts and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic choice outside the model backend
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct PromptArgs {
    /// Prompt file overriding some or all built-in prompts
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Hybrid,
    VlmOnly,
    Baseline,
}

#[derive(Args)]
pub struct RunArgs {
    /// Input PNG; repeat for several images
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Chat-completions URL (the CROP_ENDPOINT variable overrides it)
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model identifier sent to the backend
    #[arg(long)]
    pub model: Option<String>,
    /// Sampling temperature [default: 0.1]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus sampling mass [default: 0.95]
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Candidate source [default: hybrid]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Replay store: off, record:<dir> or play:<dir>
    #[arg(long, default_value = "off")]
    pub replay: String,
    /// Correction retries per stage [default: 2]
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Images processed in parallel [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct EnhanceArgs {
    /// Input PNG
    #[arg(long)]
    pub image: PathBuf,
    /// Elements as JSON: {"elements": [...]} or a bare list
    #[arg(long)]
    pub elements: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct ProposeArgs {
    /// Elements as JSON: {"elements": [...]} or a bare list
    #[arg(long)]
    pub elements: PathBuf,
    /// Image whose size bounds the crops
    #[arg(long, conflicts_with = "size", required_unless_present = "size")]
    pub image: Option<PathBuf>,
    /// Frame size as WIDTHxHEIGHT
    #[arg(long)]
    pub size: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct BuildCrpArgs {
    /// JSONL of {image, width, height, elements}
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of source PNGs; when given, overlays are rendered too
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Clone)]
pub struct StrataArgs {
    /// Lowest MOS counted as good [default: 3.5]
    #[arg(long)]
    pub good_threshold: Option<f64>,
    /// MOS below which a crop counts as poor [default: 2.5]
    #[arg(long)]
    pub poor_threshold: Option<f64>,
}

#[derive(Args)]
pub struct BuildSftArgs {
    /// JSONL of {image, width, height, crops: [{box, mos}]}
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub strata: StrataArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct BuildDpoArgs {
    /// JSONL of {image, width, height, crops: [{box, mos}]}
    #[arg(long, required_unless_present = "votes", conflicts_with = "votes")]
    pub input: Option<PathBuf>,
    /// Study vote log to export instead of scored crops
    #[arg(long, requires = "study")]
    pub votes: Option<PathBuf>,
    /// Study definition matching the vote log
    #[arg(long)]
    pub study: Option<PathBuf>,
    /// Pairs per scored image
    #[arg(long, default_value_t = 4)]
    pub pairs_per_image: usize,
    #[command(flatten)]
    pub strata: StrataArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Text,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSONL of {image, boxes}, best first
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSONL of {image, width, height, crops | boxes}
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Report format for stdout and report file
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// IoU above which two crops count as the same [default: 0.85]
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct LossCheckArgs {
    /// JSONL of {pair_id, policy_w, ref_w, policy_l, ref_l}
    #[arg(long)]
    pub input: PathBuf,
    /// Preference temperature [default: 0.2]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative gradient error
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct ServeStudyArgs {
    /// Study definition JSON
    #[arg(long)]
    pub study: PathBuf,
    /// Directory for the vote and session logs
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Token unlocking /api/results
    #[arg(long)]
    pub operator_token: Option<String>,
    /// Directory of the browser client, served at /
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Propose(a) => commands::propose(a),
        Command::BuildCrp(a) => commands::build_crp(a),
        Command::BuildSft(a) => commands::build_sft(a),
        Command::BuildDpo(a) => commands::build_dpo(a),
        Command::Eval(a) => commands::eval(a),
        Command::LossCheck(a) => commands::loss_check(a),
        Command::ServeStudy(a) => commands::serve_study(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.kind.exit_code());
    }
}
