//! `hso`: train small models and compare evaluation methods on them.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser, Debug, Clone)]
#[command(name = "hso", version, about = "Hidden-state optimization experiments")]
pub struct Cli {
    /// Worker threads for sharded evaluation and few-shot episodes.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Compute precision; defaults to the checkpoint's own (f32 for training).
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Byte,
    Char,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Train a model on a text corpus.
    Train(TrainArgs),
    /// Perplexity of a corpus under one evaluation method.
    Eval(EvalArgs),
    /// In-context classification accuracy.
    Fewshot(FewshotArgs),
    /// Time and memory per method on random inputs.
    Bench(BenchArgs),
    /// Compare analytic gradients and optimizer steps with references.
    Gradcheck(GradcheckArgs),
    /// Regenerate a report from its embedded manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "byte")]
    pub tokenizer: TokenizerKind,
    /// Overrides the training config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON training log with manifest.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "baseline")]
    pub method: String,
    /// Method config: `window_size` for baseline, otherwise the method's keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "reset_at_max")]
    pub policy: String,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent streams evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    /// Per-window CSV trace; single-shard runs only.
    #[arg(long)]
    pub windows_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct FewshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task JSON.
    #[arg(long)]
    pub task: PathBuf,
    /// Test examples as `label<TAB>text` lines.
    #[arg(long)]
    pub test: PathBuf,
    /// Demonstration pool; defaults to the test set minus the query.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,hso")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub shots: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub hso_config: Option<PathBuf>,
    #[arg(long)]
    pub de_config: Option<PathBuf>,
    /// Per-episode JSON.
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "baseline,hso,de")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub hso_config: Option<PathBuf>,
    #[arg(long)]
    pub de_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RerunArgs {
    /// A JSON or CSV report written by this tool.
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let failure = Failure::Usage(e.to_string());
            failure.report();
            return ExitCode::from(failure.code());
        }
    };
    match commands::run(cli, argv, &commands::Context::live()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            failure.report();
            ExitCode::from(failure.code())
        }
    }
}
