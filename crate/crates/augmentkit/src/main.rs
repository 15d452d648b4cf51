//! `augmentkit` CLI: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use augmentkit::config::PipelineConfig;
use augmentkit::corpus::DatasetFormat;
use augmentkit::evalsuite::{Aspect, MetricsReport};
use augmentkit::pipeline::{Pipeline, PipelineError};
use augmentkit::trainset::TrainTask;

#[derive(Parser)]
#[command(name = "augmentkit", version, about = "Batch augmentation of instruction-tuning data")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read, deduplicate and canonicalize a dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "pairs-jsonl")]
        format: DatasetFormat,
        #[arg(long)]
        output: PathBuf,
    },
    /// Label task types and rebalance to a target size.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        target_size: usize,
    },
    /// Expand every instruction into N more challenging variants.
    Expand {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Variants per source instruction.
        #[arg(long)]
        n: Option<usize>,
        /// Render prompts and print their digests without calling the backend.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rewrite each instruction into a clearer, structured prompt.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Fill in responses for records that lack one.
    Respond {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Drop records below a quality score threshold.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Minimum score (1-10) to keep a record.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate new instruction/response pairs from in-context demonstrations.
    Ire {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Pairs to generate; defaults to the pool size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Emit a training set (IE, IR or IRE) from augmented records.
    EmitTrain {
        #[arg(long, value_enum)]
        task: TrainTask,
        #[arg(long)]
        input: PathBuf,
        /// Source dataset the records' parent_id values point into (IE/IR).
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute the metric battery over a dataset.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Row label in the printed table; defaults to the input file name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Judge answer pairs under one aspect and report win/lose/tie rates.
    Judge {
        /// JSONL with {"instruction", "answer_a", "answer_b"} per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        aspect: Aspect,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print metric reports produced by `eval` as one table.
    Report {
        /// One or more metric report JSON files.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = load_config(&cli)?;
    if let Command::Report { input } = &cli.command {
        return report(input);
    }
    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::Ingest { input, format, output } => {
            let manifest = pipeline.ingest(&input, format, &output)?;
            println!("ingest: kept {} records -> {}", manifest.record_count, output.display());
        }
        Command::Sample { input, output, target_size } => {
            let manifest = pipeline.sample(&input, &output, target_size)?;
            println!("sample: kept {} records -> {}", manifest.record_count, output.display());
        }
        Command::Expand { input, output, n, dry_run } => {
            let n = n.unwrap_or(pipeline.config.expansion_n);
            if let Some(manifest) = pipeline.expand(&input, &output, n, dry_run)? {
                println!("expand: wrote {} records -> {}", manifest.record_count, output.display());
            }
        }
        Command::Refine { input, output, dry_run } => {
            if let Some(manifest) = pipeline.refine(&input, &output, dry_run)? {
                println!("refine: wrote {} records -> {}", manifest.record_count, output.display());
            }
        }
        Command::Respond { input, output } => {
            let manifest = pipeline.respond(&input, &output)?;
            println!("respond: wrote {} records -> {}", manifest.record_count, output.display());
        }
        Command::Filter { input, output, threshold } => {
            let threshold = threshold.unwrap_or(pipeline.config.filter_threshold);
            let manifest = pipeline.filter(&input, &output, threshold)?;
            println!("filter: kept {} records -> {}", manifest.record_count, output.display());
        }
        Command::Ire { input, output, count } => {
            let manifest = pipeline.ire(&input, &output, count)?;
            println!("ire: wrote {} records -> {}", manifest.record_count, output.display());
        }
        Command::EmitTrain { task, input, sources, output } => {
            let manifest = pipeline.emit_train(task, &input, sources.as_deref(), &output)?;
            println!(
                "emit-train: wrote {} examples -> {}",
                manifest.example_count,
                output.display()
            );
        }
        Command::Eval { input, output, label } => {
            let label = label.unwrap_or_else(|| {
                input
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into())
            });
            let metrics = pipeline.eval(&input, &output)?;
            print!("{}", metrics.text_table(&label));
        }
        Command::Judge { input, aspect, output } => {
            let judged = pipeline.judge(&input, aspect, &output)?;
            println!(
                "judge ({:?}): win {:.2}% / lose {:.2}% / tie {:.2}% -> relative {:.2}%",
                judged.aspect,
                judged.rates.win_pct,
                judged.rates.lose_pct,
                judged.rates.tie_pct,
                judged.rates.relative_pct,
            );
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn report(inputs: &[PathBuf]) -> Result<(), PipelineError> {
    let mut first = true;
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| {
            augmentkit::config::ConfigError::Invalid(format!("{}: {e}", path.display()))
        })?;
        let metrics: MetricsReport = serde_json::from_str(&text).map_err(|e| {
            augmentkit::config::ConfigError::Invalid(format!("{}: {e}", path.display()))
        })?;
        let label = path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let table = metrics.text_table(&label);
        if first {
            print!("{table}");
            first = false;
        } else {
            // skip the repeated header line for subsequent datasets
            if let Some((_, row)) = table.split_once('\n') {
                print!("{row}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
