mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sceneqa::datakit::DATASET_ENV;
use sceneqa::training::Phase;

#[derive(Parser, Debug)]
#[command(name = "sceneqa", version, about = "Desk-scale 3D scene question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of rooms, boxes and question/answer pairs.
    GenData(GenDataArgs),
    /// Convert a ScanQA-style question file into a dataset manifest.
    IngestScanqa(IngestArgs),
    /// Token length statistics for a split.
    TokenStats(TokenStatsArgs),
    /// Write a model configuration file.
    InitConfig(InitConfigArgs),
    /// Train the spatial encoder on box prediction.
    PretrainDetector(DetectorArgs),
    /// Run a training phase.
    Train(TrainArgs),
    /// Generate answers for a split and score them.
    Eval(EvalArgs),
    /// Answer one question about one point cloud.
    Infer(InferArgs),
    /// Write per-query attention heat maps as colored point clouds.
    ExportAttention(ExportArgs),
    /// Train and evaluate one model per compressor query count.
    QuerySweep(SweepArgs),
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// Dataset root.
    #[arg(long, env = DATASET_ENV)]
    dataset: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model configuration file; overrides --preset.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Compressor query count.
    #[arg(long)]
    nq: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Scene generator configuration (JSON): room, categories, palette, counts.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory holding `<scene_id>.ply` or `.xyz` files.
    #[arg(long)]
    clouds: PathBuf,
    /// Dataset root to write the manifest and vocabulary into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split: String,
}

#[derive(Args, Debug)]
struct TokenStatsArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args, Debug)]
struct InitConfigArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Vocabulary size; taken from the dataset when omitted.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, env = DATASET_ENV)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[command(flatten)]
    model: ModelArgs,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_phase)]
    phase: Phase,
    #[command(flatten)]
    data: DatasetArg,
    #[command(flatten)]
    model: ModelArgs,
    /// Initialize parameters from this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    checkpoint: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint and optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training plan file (JSON); flags below override its fields.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    freeze_compressor: bool,
    #[arg(long)]
    freeze_lm: bool,
    #[arg(long)]
    freeze_encoder: bool,
    /// Disable gradient norm clipping.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, args = ["checkpoint", "predictions"])]
struct EvalArgs {
    #[arg(long, env = DATASET_ENV)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score an existing predictions file instead of generating.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Restrict to QA items.
    #[arg(long)]
    qa_only: bool,
    /// Beam width; greedy decoding when omitted.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, env = DATASET_ENV)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, env = DATASET_ENV)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Query counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,32,128")]
    nq: Vec<usize>,
    #[arg(long, value_parser = parse_phase, default_value = "finetune")]
    phase: Phase,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: sceneqa::Error| e.to_string())
}

fn main() -> ExitCode {
    // Exit quietly when the reader of stdout goes away (`sceneqa ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
