// SPDX-License-Identifier: MIT OR Apache-2.0

//! Argument grammar. Every struct here also serialises into `run.json`, so a
//! resolved invocation can be replayed without re-parsing a command line.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use melab::detector::{DEFAULT_EXCLUDE_TAIL, DEFAULT_THRESHOLD};
use melab::synth::{DEFAULT_JUMP, DEFAULT_SINK_STRENGTH};
use melab::transformer::TapPoint;
use melab::wemask::{MaskInsertion, MaskPolicy, TokenMode};

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(name = "melab", version, about = "Massive-activation laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command", content = "args")]
pub enum Command {
    /// Generate a synthetic oracle model with an engineered emergence layer.
    Synth(SynthArgs),
    /// Run a forward pass and save the captured taps.
    Trace(TraceArgs),
    /// Locate the emergence layer from block-output norms.
    Detect(DetectArgs),
    /// Layer-wise diagnostics of the massive token.
    Metrics(MetricsArgs),
    /// Build a mask and optionally compare masked and unmasked runs.
    Mask(MaskCmdArgs),
    /// Ablate the FFN or its input norm at the emergence layer.
    Ablate(AblateArgs),
    /// Sink scores across mask rates, with attention heatmaps.
    Sink(SinkArgs),
    /// Cosine similarity of one token's representation across inputs.
    Similarity(SimilarityArgs),
    /// Print the published emergence-layer table.
    ReferenceTable(ReferenceArgs),
    /// Replay a saved `run.json`.
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Trace(_) => "trace",
            Command::Detect(_) => "detect",
            Command::Metrics(_) => "metrics",
            Command::Mask(_) => "mask",
            Command::Ablate(_) => "ablate",
            Command::Sink(_) => "sink",
            Command::Similarity(_) => "similarity",
            Command::ReferenceTable(_) => "reference-table",
            Command::Rerun(_) => "rerun",
        }
    }

    /// Output directory, for commands that write one.
    pub fn out_dir_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Synth(a) => Some(&mut a.out.out),
            Command::Trace(a) => Some(&mut a.out.out),
            Command::Detect(a) => Some(&mut a.out.out),
            Command::Metrics(a) => Some(&mut a.out.out),
            Command::Mask(a) => Some(&mut a.out.out),
            Command::Ablate(a) => Some(&mut a.out.out),
            Command::Sink(a) => Some(&mut a.out.out),
            Command::Similarity(a) => Some(&mut a.out.out),
            Command::ReferenceTable(a) => Some(&mut a.out.out),
            Command::Rerun(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Model config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Tensor archive.
    #[arg(long)]
    pub archive: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// JSON array of token ids. Without it a synthetic input is drawn.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Seed for synthetic inputs and random masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Length of the synthetic input.
    #[arg(long, default_value_t = 16)]
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DetectFlags {
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_EXCLUDE_TAIL)]
    pub exclude_tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    MeOnly,
    AllAfterMe,
}

impl From<PolicyArg> for MaskPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::MeOnly => MaskPolicy::MeOnly,
            PolicyArg::AllAfterMe => MaskPolicy::AllAfterMe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKindArg {
    Weight,
    Random,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenModeArg {
    Massive,
    All,
}

impl TokenModeArg {
    pub fn resolve(self, massive_token: usize) -> TokenMode {
        match self {
            TokenModeArg::Massive => TokenMode::MassiveToken(massive_token),
            TokenModeArg::All => TokenMode::AllTokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionArg {
    AfterNorm,
    BeforeNorm,
}

impl From<InsertionArg> for MaskInsertion {
    fn from(i: InsertionArg) -> Self {
        match i {
            InsertionArg::AfterNorm => MaskInsertion::AfterNorm,
            InsertionArg::BeforeNorm => MaskInsertion::BeforeNorm,
        }
    }
}

/// Mask selection shared by `mask`, `sink` and `trace`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MaskFlags {
    #[arg(long, value_enum, default_value_t = PolicyArg::AllAfterMe)]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = MaskKindArg::Weight)]
    pub mask_kind: MaskKindArg,
    #[arg(long, value_enum, default_value_t = TokenModeArg::Massive)]
    pub token_mode: TokenModeArg,
    #[arg(long, value_enum, default_value_t = InsertionArg::AfterNorm)]
    pub insertion: InsertionArg,
    /// Emergence layer; detected when omitted.
    #[arg(long)]
    pub me_layer: Option<usize>,
    /// Massive-token position; the detected token (or 0) when omitted.
    #[arg(long)]
    pub massive_token: Option<usize>,
    #[command(flatten)]
    pub detect: DetectFlags,
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Architecture JSON; the default oracle architecture when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Layer count for the default architecture.
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    /// Engineered emergence layer.
    #[arg(long, default_value_t = 7)]
    pub target: usize,
    #[arg(long, default_value_t = DEFAULT_JUMP)]
    pub jump: f64,
    #[arg(long, default_value_t = DEFAULT_SINK_STRENGTH)]
    pub sink_strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceIntervention {
    None,
    Mask,
    AblateFfn,
    AblateFfnNorm,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Taps whose full tensors are saved (comma separated); all when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_tap)]
    pub taps: Vec<TapPoint>,
    /// Layers whose tensors are saved; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub capture_layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = TraceIntervention::None)]
    pub intervention: TraceIntervention,
    /// Mask rate when `--intervention mask`.
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[command(flatten)]
    pub mask: MaskFlags,
}

fn parse_tap(s: &str) -> Result<TapPoint, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = TapPoint::ALL.iter().map(|t| t.name()).collect();
        format!("unknown tap `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub detect: DetectFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Top-K fraction of `d_model` for the Frac metric (`K = ceil(frac·d)`).
    #[arg(long, default_value_t = 0.01)]
    pub topk_frac: f64,
    /// Norm whose weights rank the dimensions: `pre-ffn` or `pre-attention`.
    #[arg(long, value_enum, default_value_t = SiteArg::PreFfn)]
    pub site: SiteArg,
    #[arg(long, default_value_t = 0)]
    pub massive_token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteArg {
    PreFfn,
    PreAttention,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MaskCmdArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[command(flatten)]
    pub mask: MaskFlags,
    /// Also run masked and unmasked passes and compare them.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArg {
    Ffn,
    FfnNorm,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, value_enum, default_value_t = AblationArg::Ffn)]
    pub kind: AblationArg,
    /// Layer to ablate; detected when omitted.
    #[arg(long)]
    pub me_layer: Option<usize>,
    #[command(flatten)]
    pub detect: DetectFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SinkArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Mask rates to compare against the unmasked run.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5])]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub sink_column: usize,
    /// Skip the per-(layer, head) heatmap CSVs.
    #[arg(long)]
    pub no_heatmaps: bool,
    #[command(flatten)]
    pub mask: MaskFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Token files, one per input. Synthetic inputs are drawn when omitted.
    #[arg(long = "tokens", value_delimiter = ',')]
    pub tokens: Vec<PathBuf>,
    /// Number of synthetic inputs, seeded `seed, seed+1, …`.
    #[arg(long, default_value_t = 5)]
    pub inputs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    /// Position compared in every input.
    #[arg(long, default_value_t = 0)]
    pub massive_token: usize,
    #[arg(long, default_value = "block_output", value_parser = parse_tap)]
    pub tap: TapPoint,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReferenceArgs {
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// A `run.json` written by an earlier invocation.
    pub run_json: PathBuf,
    /// Output directory override.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
