//! `curator`: perplexity-guided dataset curation and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::AppConfig;

#[derive(Debug, Parser)]
#[command(
    name = "curator",
    version,
    about = "Revise (query, response) datasets toward lower perplexity and evaluate the results",
    propagate_version = true
)]
struct Cli {
    /// Configuration file (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true)]
    log_level: Option<String>,

    /// Emit logs as JSON lines on stderr.
    #[arg(long, global = true)]
    log_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RatePreset {
    /// 5% of the dataset: the light-touch preset.
    Low,
    /// 25% of the dataset: the aggressive preset.
    High,
}

impl RatePreset {
    fn fraction(self) -> f64 {
        match self {
            RatePreset::Low => 0.05,
            RatePreset::High => 0.25,
        }
    }
}

#[derive(Debug, Args)]
struct SelectionArgs {
    /// Fraction of pairs to select, in (0, 1].
    #[arg(long, conflicts_with_all = ["count", "preset"])]
    fraction: Option<f64>,

    /// Exact number of pairs to select.
    #[arg(long, conflicts_with_all = ["fraction", "preset"])]
    count: Option<usize>,

    /// Named curation-rate preset: low = 5%, high = 25%.
    #[arg(long, value_enum, conflicts_with_all = ["fraction", "count"])]
    preset: Option<RatePreset>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Curate a dataset: revise selected responses toward lower perplexity.
    Curate {
        /// Input dataset (JSONL).
        #[arg(long, short)]
        input: PathBuf,
        /// Curated output dataset (JSONL).
        #[arg(long, short)]
        output: PathBuf,
        /// Trace output (JSONL); defaults to `<output>.traces.jsonl`.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Seed for selection and generation schedules.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of beam-search rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the beam width.
        #[arg(long)]
        beam_k: Option<usize>,
        /// Override the quality floor (fraction of the original scores).
        #[arg(long)]
        quality_floor: Option<f64>,
    },
    /// Score pairs on ppl, readability, and/or helpfulness into CSV.
    Score {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Comma-separated metrics: ppl,readability,helpfulness.
        #[arg(long, default_value = "ppl,readability,helpfulness")]
        metrics: String,
        /// Score responses without conditioning on their queries.
        #[arg(long)]
        unconditioned: bool,
    },
    /// Per-dataset perplexity profiles plus a combined summary.
    Analyze {
        /// Input datasets (JSONL).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for profile CSVs and summaries.
        #[arg(long, short)]
        output_dir: PathBuf,
        /// Histogram bucket count.
        #[arg(long, default_value_t = 20)]
        buckets: usize,
        #[arg(long)]
        unconditioned: bool,
    },
    /// Mix datasets per a JSON spec file.
    Mix {
        /// Mix spec (JSON: components with path, fraction|count, label).
        #[arg(long, short)]
        spec: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Override the spec's shuffle seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate responses: attack success rate and judged scores.
    Eval {
        /// Input JSONL of (id, query[, response]).
        #[arg(long, short)]
        input: PathBuf,
        /// Per-query CSV output; summary lands beside it.
        #[arg(long, short)]
        output: PathBuf,
        /// asr = refusal matching only; full adds judged harmfulness and
        /// helpfulness.
        #[arg(long, value_enum, default_value_t = commands::EvalModeArg::Asr)]
        mode: commands::EvalModeArg,
        /// Generate missing responses with the generation backend first.
        #[arg(long)]
        generate: bool,
        /// Classify refusals with the judge backend instead of the lexicon.
        #[arg(long)]
        asr_judge: bool,
        /// Refusal inspection window in characters.
        #[arg(long, default_value_t = 128)]
        window: usize,
        /// Seed for generated responses.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging(cli: &Cli, config: &AppConfig) {
    let level = cli
        .log_level
        .clone()
        .or_else(|| config.log_level.clone())
        .unwrap_or_else(|| "warn".to_string());
    let mut builder = env_logger::Builder::new();
    builder.parse_filters(&level);
    if cli.log_json {
        builder.format(|buf, record| {
            use std::io::Write;
            writeln!(
                buf,
                "{}",
                serde_json::json!({
                    "level": record.level().to_string(),
                    "target": record.target(),
                    "message": record.args().to_string(),
                })
            )
        });
    }
    let _ = builder.try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match AppConfig::load(cli.config.as_deref()) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {:#}", e);
            return ExitCode::from(1);
        }
    };
    init_logging(&cli, &config);

    let outcome = match &cli.command {
        Command::Curate {
            input,
            output,
            traces,
            selection,
            seed,
            rounds,
            beam_k,
            quality_floor,
        } => commands::cmd_curate(
            &config,
            commands::CurateArgs {
                input,
                output,
                traces: traces.as_deref(),
                fraction: selection.fraction,
                count: selection.count,
                preset_fraction: selection.preset.map(RatePreset::fraction),
                seed: *seed,
                rounds: *rounds,
                beam_k: *beam_k,
                quality_floor: *quality_floor,
            },
        ),
        Command::Score { input, output, metrics, unconditioned } => {
            commands::cmd_score(&config, input, output, metrics, *unconditioned)
        }
        Command::Analyze { inputs, output_dir, buckets, unconditioned } => {
            commands::cmd_analyze(&config, inputs, output_dir, *buckets, *unconditioned)
        }
        Command::Mix { spec, output, seed } => commands::cmd_mix(spec, output, *seed),
        Command::Eval { input, output, mode, generate, asr_judge, window, seed } => {
            commands::cmd_eval(
                &config,
                commands::EvalArgs {
                    input,
                    output,
                    mode: *mode,
                    generate: *generate,
                    asr_judge: *asr_judge,
                    window: *window,
                    seed: *seed,
                },
            )
        }
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
