use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kbmem::eval::EvalMode;
use kbmem::trainer::Mode;

#[derive(Debug, Parser)]
#[command(name = "kbmem", version, about = "Train and probe knowledge-base memorizers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON experiment config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$KBMEM_OUT/<command>`, then `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Triplet TSV to use as the KB; replaces any KB source in the config.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, filter and deduplicate a triplet dump.
    Ingest(IngestArgs),
    /// Generate the synthetic Zipf KB.
    Synth,
    /// Write the popular and long-tail strata.
    Strata,
    /// Memorize the KB in one sampling mode.
    Train(TrainArgs),
    /// Train both sampling modes from the same initialization.
    Compare(CompareArgs),
    /// Finetune on question-answer pairs.
    Qa(QaArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate reasoning probes and/or score a checkpoint on them.
    Probes(ProbesArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth => "synth",
            Command::Strata => "strata",
            Command::Train(_) => "train",
            Command::Compare(_) => "compare",
            Command::Qa(_) => "qa",
            Command::Eval(_) => "eval",
            Command::Probes(_) => "probes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Importance,
    Uniform,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Importance => Mode::Importance,
            ModeArg::Uniform => Mode::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    Triplet,
    Question,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> EvalMode {
        match m {
            EvalModeArg::Triplet => EvalMode::Triplet,
            EvalModeArg::Question => EvalMode::Question,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Raw triplet TSV dump; defaults to the config's `kb`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// File with one allowed subject per line.
    #[arg(long)]
    pub allowlist: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "importance")]
    pub mode: ModeArg,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// EM threshold to report; repeatable. Replaces the config's list.
    #[arg(long = "threshold")]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
#[group(id = "init", required = true, multiple = false, args = ["checkpoint", "fresh"])]
pub struct QaArgs {
    /// Memorization checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from random initialization instead.
    #[arg(long)]
    pub fresh: bool,
    /// `question<TAB>answer` pairs instead of templated KB questions.
    #[arg(long)]
    pub qa_tsv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triplet TSV to score; defaults to the KB's eval sample.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "triplet")]
    pub mode: EvalModeArg,
    /// Directory of `D_<name>.tsv` strata for per-stratum scores.
    #[arg(long)]
    pub strata_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbesArgs {
    /// Checkpoint to score on the probe sets.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe-set TSV to score; repeatable. Generation is skipped unless a KB
    /// is configured.
    #[arg(long = "probes")]
    pub probes: Vec<PathBuf>,
    /// `subject<TAB>relation<TAB>gold1|gold2` file of missing facts.
    #[arg(long)]
    pub missing_facts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "triplet")]
    pub mode: EvalModeArg,
}
