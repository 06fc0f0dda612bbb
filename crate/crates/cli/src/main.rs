use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inpars::corpus::{self, CorpusFormat};
use inpars::pipeline::{self, LoadedConfig, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(
    name = "inpars",
    version,
    about = "Synthetic query generation and reranking pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 index over the corpus.
    Index(StageArgs),
    /// Generate one question per sampled document.
    Generate(StageArgs),
    /// Keep the likeliest questions and mine negatives.
    Curate(StageArgs),
    /// Retrieve first-stage candidates for the evaluation queries.
    Retrieve(StageArgs),
    /// Rerank first-stage candidates.
    Rerank(StageArgs),
    /// Score the run files against the judgments.
    Evaluate(StageArgs),
    /// Run every stage in order.
    All(StageArgs),
    /// Re-serialize a corpus file.
    Export(ExportArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when inputs and config are unchanged.
    #[arg(long)]
    force: bool,
    /// Override the configured output directory.
    #[arg(long)]
    stage_output: Option<PathBuf>,
    /// Override every configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    /// Corpus to read.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    input_format: CorpusFormat,
    #[arg(long, value_enum, default_value_t = ExportFormat::Jsonl)]
    format: ExportFormat,
    /// Destination file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Jsonl,
}

fn run_pipeline(stage: Stage, args: StageArgs) -> Result<(), PipelineError> {
    let loaded = LoadedConfig::load(&args.config)?;
    let options = RunOptions {
        force: args.force,
        output_dir: args.stage_output.map(std::path::absolute).transpose()?,
        seed: args.seed,
    };
    for summary in pipeline::run_stage(&loaded, stage, &options)? {
        println!(
            "{}",
            serde_json::to_string(&summary).expect("summary serializes")
        );
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), PipelineError> {
    let corpus = corpus::ingest(&args.input, args.input_format)?;
    let ExportFormat::Jsonl = args.format;
    match args.output {
        Some(path) => {
            let mut out = BufWriter::new(File::create(path)?);
            corpus.export_jsonl(&mut out)?;
            out.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            match corpus.export_jsonl(&mut out).and_then(|()| out.flush()) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => run_pipeline(Stage::Index, a),
        Command::Generate(a) => run_pipeline(Stage::Generate, a),
        Command::Curate(a) => run_pipeline(Stage::Curate, a),
        Command::Retrieve(a) => run_pipeline(Stage::Retrieve, a),
        Command::Rerank(a) => run_pipeline(Stage::Rerank, a),
        Command::Evaluate(a) => run_pipeline(Stage::Evaluate, a),
        Command::All(a) => run_pipeline(Stage::All, a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut err = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            if let PipelineError::MissingUpstreamArtifact(stage) = &e {
                err["stage"] = stage.name().into();
            }
            if let PipelineError::ConfigInvalid { field, .. } = &e {
                err["field"] = field.as_str().into();
            }
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
