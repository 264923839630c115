//! `vmsst`: generate a synthetic corpus, train, embed, mine, evaluate and
//! score, all driven by one JSON experiment config.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmsst::evalkit::MiningMethod;
use vmsst::objectives::Objective;

#[derive(Debug, Parser)]
#[command(
    name = "vmsst",
    version,
    about = "Multilingual sentence embeddings by variational source separation"
)]
pub struct Cli {
    /// Experiment config (JSON); defaults apply to every missing field.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the corpus and training seeds.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Suppress progress and summaries on stderr/stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its evaluation sets.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a loss CSV.
    Train(TrainArgs),
    /// Embed one TSV column with a checkpoint into a VMSB file.
    Embed(EmbedArgs),
    /// Mine pairs between two VMSB files and score them against gold.
    Mine(MineArgs),
    /// Evaluate a checkpoint on every evaluation set.
    Eval(EvalArgs),
    /// Overall score from a report or from the seven component values.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory [default: paths.corpus_dir].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// contrastive, bitranslation, vmsst or vmsst_contrastive.
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    /// Total number of updates (including any already in a resumed checkpoint).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the latest checkpoint in the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    /// Corpus directory [default: paths.corpus_dir].
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory [default: paths.checkpoint_dir].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Checkpoint [default: latest in paths.checkpoint_dir].
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Tab-separated input with space-separated tokens in one column.
    #[arg(long, value_name = "TSV")]
    pub input: PathBuf,
    /// 1-based column holding the tokens.
    #[arg(long, default_value_t = 2)]
    pub column: usize,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long, value_name = "VMSB")]
    pub src: PathBuf,
    #[arg(long, value_name = "VMSB")]
    pub tgt: PathBuf,
    /// Gold pairs, one `src<TAB>tgt` row index pair per line.
    #[arg(long, value_name = "TSV")]
    pub gold: PathBuf,
    #[arg(long, default_value = "cosine", value_parser = parse_method)]
    pub method: MiningMethod,
    /// Margin neighbourhood size [default: eval.k_nn].
    #[arg(long)]
    pub k_nn: Option<usize>,
    /// Write the result here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint [default: latest in paths.checkpoint_dir].
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory [default: paths.corpus_dir].
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Report path [default: paths.report_dir/eval.report].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Report written by `eval`, or a JSON object of the seven components.
    #[arg(
        long,
        value_name = "PATH",
        conflicts_with = "values",
        required_unless_present = "values"
    )]
    pub report: Option<PathBuf>,
    /// sts_english,sts_crosslingual,tatoeba,bucc_cosine,bucc_margin,r1_primary,r1_multilingual
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: vmsst::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<MiningMethod, String> {
    s.parse().map_err(|e: vmsst::Error| e.to_string())
}

/// 3 for numerical failures, 2 for usage, configuration and input errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    use vmsst::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } | Error::Degenerate(_) => 3,
                Error::Num(numcore::NumError::NonFinite { .. }) => 3,
                Error::Num(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
