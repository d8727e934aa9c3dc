use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dualedit::analysis::{KlPosition, QueryRows};
use dualedit::editor::{CombineMode, ScaleMode};
use dualedit::training::GenTextModel;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DUALEDIT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "dualedit", version, about = "Modality-aware editing workbench for a tiny vision-language model")]
pub struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "dualedit-out")]
    pub out_dir: PathBuf,
    /// Print progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy world, its probe set and the edit cases.
    Synth(SynthArgs),
    /// Pretrain the base model on the world's facts.
    Pretrain(PretrainArgs),
    /// Train one adapter set per edit case.
    EditTrain(EditTrainArgs),
    /// Score trained edits on their cases.
    Eval(EvalArgs),
    /// Modality analyses.
    Analyze(AnalyzeArgs),
}

/// Numeric precision of model, adapters and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// A layer index or `none`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerArg(pub Option<usize>);

impl FromStr for LayerArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "-" => Ok(Self(None)),
            _ => s.parse().map(|l| Self(Some(l))).map_err(|_| format!("expected a layer index or `none`, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CombineArg {
    Replace,
    Residual,
}

impl From<CombineArg> for CombineMode {
    fn from(c: CombineArg) -> Self {
        match c {
            CombineArg::Replace => CombineMode::Replace,
            CombineArg::Residual => CombineMode::ResidualAdd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Literal,
    Scaled,
}

impl From<ScaleArg> for ScaleMode {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Literal => ScaleMode::Literal,
            ScaleArg::Scaled => ScaleMode::Scaled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenTextArg {
    Edited,
    Base,
}

impl From<GenTextArg> for GenTextModel {
    fn from(g: GenTextArg) -> Self {
        match g {
            GenTextArg::Edited => GenTextModel::Edited,
            GenTextArg::Base => GenTextModel::Base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Visual,
    Textual,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QueryRowsArg {
    All,
    Last,
}

impl From<QueryRowsArg> for QueryRows {
    fn from(q: QueryRowsArg) -> Self {
        match q {
            QueryRowsArg::All => QueryRows::All,
            QueryRowsArg::Last => QueryRows::Last,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PositionArg {
    Final,
    Mean,
}

impl From<PositionArg> for KlPosition {
    fn from(p: PositionArg) -> Self {
        match p {
            PositionArg::Final => KlPosition::Final,
            PositionArg::Mean => KlPosition::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image-grounded facts.
    #[arg(long)]
    pub facts: Option<usize>,
    /// Text-only facts.
    #[arg(long)]
    pub text_facts: Option<usize>,
    /// Facts re-used as the probe set.
    #[arg(long)]
    pub probe: Option<usize>,
    #[arg(long)]
    pub edits: Option<usize>,
    #[arg(long)]
    pub edit_seed: Option<u64>,
    /// Output directory (default: the global output directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory written by `synth` (or a facts JSONL file).
    #[arg(long)]
    pub data: PathBuf,
    /// Probe JSONL (default: `probe.jsonl` next to the facts).
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// JSON file with `model`, `pretrain` and `precision` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path (default: `<out-dir>/base.dled`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EditTrainArgs {
    /// Base model checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Edit cases JSONL (or a directory holding `edits.jsonl`).
    #[arg(long)]
    pub cases: PathBuf,
    /// JSON file with `suite`, `tau` and `precision` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Textual adapter layer, or `none`.
    #[arg(long)]
    pub tlayer: Option<LayerArg>,
    /// Visual adapter layer, or `none`.
    #[arg(long)]
    pub vlayer: Option<LayerArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gate_layer: Option<usize>,
    #[arg(long, value_enum)]
    pub combine: Option<CombineArg>,
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub adapter_seed: Option<u64>,
    /// Model scoring the textual-neighbour term.
    #[arg(long, value_enum)]
    pub gen_text_model: Option<GenTextArg>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Train only these case ids (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Output directory (default: `<out-dir>/adapters`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Directory written by `edit-train`.
    #[arg(long)]
    pub adapters: PathBuf,
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub gating: Option<OnOff>,
    /// Threshold (default: the one stored with the adapters).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Report path (default: `<out-dir>/report.json`); the CSV row goes
    /// next to it with a `.csv` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write per-query outcomes next to the report.
    #[arg(long)]
    pub details: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub kind: AnalyzeKind,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeKind {
    /// Attention received per modality and layer.
    Attention(AttentionArgs),
    /// Output KL under Gaussian noise per modality, layer and σ.
    Perturb(PerturbArgs),
    /// Gate similarity populations and their separation.
    GateHist(GateHistArgs),
    /// Adapter-layer sweep with and without gating.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Directory written by `synth` (or a facts JSONL file); prompts are
    /// its first image facts.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: the global output directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub common: SampleArgs,
    #[arg(long, value_enum)]
    pub queries: Option<QueryRowsArg>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: SampleArgs,
    /// Perturbed spans (repeatable; default all three).
    #[arg(long, value_enum)]
    pub modality: Vec<ModalityArg>,
    /// Noise scales (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub sigma: Vec<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub position: Option<PositionArg>,
}

#[derive(Debug, Args)]
pub struct GateHistArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub gate_layer: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub cases: PathBuf,
    /// Text layers (comma-separated, `none` allowed).
    #[arg(long, value_delimiter = ',')]
    pub tlayers: Vec<LayerArg>,
    /// Visual layers (comma-separated, `none` allowed).
    #[arg(long, value_delimiter = ',')]
    pub vlayers: Vec<LayerArg>,
    /// Gating flags to score (comma-separated).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub gating: Vec<OnOff>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Use only the first `n` cases.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
