//! The five subcommands. Exit codes are uniform: 0 full success, 2 when
//! some records failed but output was produced, 1 (via Err) on fatal
//! problems.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;

use curator_core::backend::{LmBackend, SamplingConfig};
use curator_core::dataset::{load_jsonl, mix_datasets, save_jsonl, source_counts, MixSpec,
                            SampleSize};
use curator_core::engine::{write_traces_jsonl, Backends, CurationEngine, PairEvent};
use curator_core::eval::{evaluate, generate_responses, load_eval_records, write_eval_csv,
                         write_eval_summary, EvalMode, EvalOptions, RefusalLexicon,
                         RefusalMethod};
use curator_core::helpfulness::{HelpfulnessJudge, JudgeCache};
use curator_core::perplexity::{dataset_perplexity_profile, response_perplexity_with,
                               write_profile_csv, write_profile_summary, Conditioning};
use curator_core::readability::{ReadabilityScorer, ReferenceCorpus, Tagger};

use crate::config::AppConfig;

const EXIT_OK: u8 = 0;
const EXIT_PARTIAL: u8 = 2;

fn build_backend(descriptor: &curator_core::backend::BackendDescriptor) -> Result<Arc<dyn LmBackend>> {
    descriptor.build().map_err(|e| anyhow!(e.to_string()))
}

fn build_scorer(config: &AppConfig) -> Result<ReadabilityScorer> {
    let tagger = match &config.lexicon {
        Some(path) => Tagger::from_lexicon_file(path).map_err(|e| anyhow!(e.to_string()))?,
        None => Tagger::builtin(),
    };
    let corpus = match &config.corpus {
        Some(path) => ReferenceCorpus::from_file(path).map_err(|e| anyhow!(e.to_string()))?,
        None => ReferenceCorpus::builtin(),
    };
    Ok(ReadabilityScorer::new(tagger, corpus))
}

fn refusal_lexicon(config: &AppConfig, window: usize) -> Result<RefusalLexicon> {
    match &config.refusal_lexicon {
        Some(path) => {
            RefusalLexicon::from_file(path, window).map_err(|e| anyhow!(e.to_string()))
        }
        None => Ok(RefusalLexicon::builtin_with_window(window)),
    }
}

fn helpfulness_judge(config: &AppConfig) -> Result<HelpfulnessJudge> {
    let judge = HelpfulnessJudge::new();
    match &config.judge_cache {
        Some(dir) => {
            let cache = JudgeCache::new(dir).map_err(|e| anyhow!(e.to_string()))?;
            Ok(judge.with_cache(cache))
        }
        None => Ok(judge),
    }
}

/// `out.csv` -> `out.summary.json`.
fn summary_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    output.with_file_name(format!("{}.summary.json", stem))
}

pub struct CurateArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub traces: Option<&'a Path>,
    pub fraction: Option<f64>,
    pub count: Option<usize>,
    pub preset_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub beam_k: Option<usize>,
    pub quality_floor: Option<f64>,
}

pub fn cmd_curate(config: &AppConfig, args: CurateArgs<'_>) -> Result<u8> {
    let ds = load_jsonl(args.input).map_err(|e| anyhow!(e.to_string()))?;
    if ds.is_empty() {
        bail!("input dataset {} is empty", args.input.display());
    }

    let mut curation = config.curation.clone();
    if let Some(seed) = args.seed {
        curation.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        curation.rounds = rounds;
    }
    if let Some(beam_k) = args.beam_k {
        curation.beam_k = beam_k;
    }
    if let Some(floor) = args.quality_floor {
        curation.quality_floor = floor;
    }
    let selection_seed = curation.seed;
    let size = match (args.fraction, args.count, args.preset_fraction) {
        (Some(f), None, None) => SampleSize::Fraction(f),
        (None, Some(n), None) => SampleSize::Count(n),
        (None, None, Some(f)) => SampleSize::Fraction(f),
        (None, None, None) => SampleSize::Fraction(0.05),
        _ => bail!("--fraction, --count, and --preset are mutually exclusive"),
    };

    let backends = Backends {
        scoring: build_backend(&config.backends.scoring)?,
        generation: build_backend(&config.backends.generation)?,
        judge: build_backend(&config.backends.judge)?,
    };
    let engine = CurationEngine::new(backends, build_scorer(config)?, curation)
        .with_concurrency(config.concurrency)
        .with_helpfulness(helpfulness_judge(config)?);

    // Ctrl-C drains the current pair, flushes partial output, and marks
    // the trace file.
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        let _ = ctrlc::set_handler(move || {
            eprintln!("interrupt: finishing the current pair, then flushing");
            cancel.store(true, Ordering::SeqCst);
        });
    }

    let started = Instant::now();
    let mut total_calls = 0usize;
    let run = engine
        .curate_dataset(&ds, size, selection_seed, Some(&cancel), |event| match event {
            PairEvent::Done { index, total, id, backend_calls } => {
                total_calls += backend_calls;
                let done = index + 1;
                let per_pair = started.elapsed().as_secs_f64() / done as f64;
                let remaining = per_pair * (total - done) as f64;
                eprintln!(
                    "[{}/{}] {} curated ({} backend calls total, ~{:.0}s remaining)",
                    done, total, id, total_calls, remaining
                );
            }
            PairEvent::Failed { index, total, id, error } => {
                eprintln!("[{}/{}] {} FAILED: {}", index + 1, total, id, error);
            }
        })
        .map_err(|e| anyhow!(e.to_string()))?;

    save_jsonl(&run.curated, args.output).map_err(|e| anyhow!(e.to_string()))?;
    let trace_path = args
        .traces
        .map(Path::to_path_buf)
        .unwrap_or_else(|| summary_trace_path(args.output));
    write_traces_jsonl(&run.traces, run.interrupted, &trace_path)
        .map_err(|e| anyhow!(e.to_string()))?;

    eprintln!(
        "curated {} pairs into {} (traces: {})",
        run.curated.len(),
        args.output.display(),
        trace_path.display()
    );
    if !run.failures.is_empty() {
        eprintln!("{} pairs failed:", run.failures.len());
        for failure in &run.failures {
            eprintln!("  {}: {}", failure.id, failure.error);
        }
    }
    if run.interrupted {
        eprintln!("run interrupted; output is partial");
    }
    Ok(if run.failures.is_empty() && !run.interrupted { EXIT_OK } else { EXIT_PARTIAL })
}

/// `out.jsonl` -> `out.traces.jsonl`.
fn summary_trace_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    output.with_file_name(format!("{}.traces.jsonl", stem))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Ppl,
    Readability,
    Helpfulness,
}

const VALID_METRICS: &str = "ppl, readability, helpfulness";

fn parse_metrics(spec: &str) -> Result<Vec<Metric>> {
    let mut metrics = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let metric = match name {
            "ppl" => Metric::Ppl,
            "readability" => Metric::Readability,
            "helpfulness" => Metric::Helpfulness,
            other => bail!("unknown metric {:?}; valid metrics: {}", other, VALID_METRICS),
        };
        if !metrics.contains(&metric) {
            metrics.push(metric);
        }
    }
    if metrics.is_empty() {
        bail!("no metrics requested; valid metrics: {}", VALID_METRICS);
    }
    Ok(metrics)
}

pub fn cmd_score(
    config: &AppConfig,
    input: &Path,
    output: &Path,
    metrics: &str,
    unconditioned: bool,
) -> Result<u8> {
    let metrics = parse_metrics(metrics)?;
    let ds = load_jsonl(input).map_err(|e| anyhow!(e.to_string()))?;
    if ds.is_empty() {
        bail!("input dataset {} is empty", input.display());
    }
    let conditioning =
        if unconditioned { Conditioning::None } else { Conditioning::QueryTemplate };
    let scoring = build_backend(&config.backends.scoring)?;
    let judge = build_backend(&config.backends.judge)?;
    let scorer = build_scorer(config)?;
    let helper = helpfulness_judge(config)?;

    struct Row {
        id: String,
        source: String,
        values: Vec<Option<f64>>,
        error: Option<String>,
    }
    let rows: Vec<Row> =
        curator_core::parallel::parallel_map(ds.pairs(), config.concurrency, |_, pair| {
            let mut values = Vec::with_capacity(metrics.len());
            let mut error: Option<String> = None;
            for metric in &metrics {
                let value = match metric {
                    Metric::Ppl => response_perplexity_with(pair, scoring.as_ref(), conditioning)
                        .map(|r| r.ppl),
                    Metric::Readability => scorer.estimate(&pair.response).map(|s| s.value),
                    Metric::Helpfulness => {
                        helper.score_helpfulness(pair, judge.as_ref()).map(|s| s.overall)
                    }
                };
                match value {
                    Ok(v) => values.push(Some(v)),
                    Err(e) => {
                        values.push(None);
                        error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            Row { id: pair.id.clone(), source: pair.source.clone(), values, error }
        });

    let mut writer = csv::Writer::from_path(output)
        .with_context(|| format!("creating {}", output.display()))?;
    let mut header = vec!["id".to_string(), "source".to_string()];
    header.extend(metrics.iter().map(|m| {
        match m {
            Metric::Ppl => "ppl",
            Metric::Readability => "readability",
            Metric::Helpfulness => "helpfulness",
        }
        .to_string()
    }));
    header.push("error".to_string());
    writer.write_record(&header)?;
    let mut failures = 0;
    for row in &rows {
        let mut record = vec![row.id.clone(), row.source.clone()];
        record.extend(
            row.values.iter().map(|v| v.map(|x| format!("{}", x)).unwrap_or_default()),
        );
        record.push(row.error.clone().unwrap_or_default());
        writer.write_record(&record)?;
        if row.error.is_some() {
            failures += 1;
        }
    }
    writer.flush()?;
    if failures > 0 {
        eprintln!("{} of {} pairs failed to score", failures, rows.len());
        for row in rows.iter().filter(|r| r.error.is_some()) {
            eprintln!("  {}: {}", row.id, row.error.as_deref().unwrap_or_default());
        }
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

pub fn cmd_analyze(
    config: &AppConfig,
    inputs: &[PathBuf],
    output_dir: &Path,
    buckets: usize,
    unconditioned: bool,
) -> Result<u8> {
    std::fs::create_dir_all(output_dir)
        .with_context(|| format!("creating {}", output_dir.display()))?;
    let scoring = build_backend(&config.backends.scoring)?;
    let conditioning =
        if unconditioned { Conditioning::None } else { Conditioning::QueryTemplate };

    let mut combined = csv::Writer::from_path(output_dir.join("summary.csv"))?;
    combined.write_record([
        "dataset", "count", "failures", "mean", "median", "q1", "q3", "min", "max",
    ])?;
    let mut any_failures = false;
    for input in inputs {
        let ds = load_jsonl(input).map_err(|e| anyhow!(e.to_string()))?;
        let profile = dataset_perplexity_profile(
            &ds,
            scoring.clone(),
            conditioning,
            config.concurrency,
            buckets,
        )
        .map_err(|e| anyhow!("{}: {}", input.display(), e))?;
        let stem = input.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        let csv_path = output_dir.join(format!("{}_profile.csv", stem));
        let summary_path = output_dir.join(format!("{}_summary.json", stem));
        write_profile_csv(&profile, &csv_path).map_err(|e| anyhow!(e.to_string()))?;
        write_profile_summary(&profile, &summary_path).map_err(|e| anyhow!(e.to_string()))?;
        let s = &profile.summary;
        combined.write_record(&[
            stem.to_string(),
            s.count.to_string(),
            s.failures.to_string(),
            format!("{}", s.mean),
            format!("{}", s.median),
            format!("{}", s.q1),
            format!("{}", s.q3),
            format!("{}", s.min),
            format!("{}", s.max),
        ])?;
        if s.failures > 0 {
            any_failures = true;
            eprintln!("{}: {} pairs failed to score", input.display(), s.failures);
        }
        println!(
            "{}: n={} mean={:.4} median={:.4} (profile: {})",
            stem,
            s.count,
            s.mean,
            s.median,
            csv_path.display()
        );
    }
    combined.flush()?;
    Ok(if any_failures { EXIT_PARTIAL } else { EXIT_OK })
}

pub fn cmd_mix(spec_path: &Path, output: &Path, seed: Option<u64>) -> Result<u8> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec: MixSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", spec_path.display()))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let mixed = mix_datasets(&spec).map_err(|e| anyhow!(e.to_string()))?;
    save_jsonl(&mixed, output).map_err(|e| anyhow!(e.to_string()))?;
    println!("mixed {} pairs into {}", mixed.len(), output.display());
    for (source, count) in source_counts(&mixed) {
        println!("  {}: {}", source, count);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    Asr,
    Full,
}

pub struct EvalArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub mode: EvalModeArg,
    pub generate: bool,
    pub asr_judge: bool,
    pub window: usize,
    pub seed: Option<u64>,
}

pub fn cmd_eval(config: &AppConfig, args: EvalArgs<'_>) -> Result<u8> {
    let mut records = load_eval_records(args.input).map_err(|e| anyhow!(e.to_string()))?;

    if args.generate {
        let generation = build_backend(&config.backends.generation)?;
        let sampling = SamplingConfig::new(1.0, 1.0)
            .with_max_tokens(config.curation.max_tokens)
            .with_seed(args.seed.unwrap_or(0));
        generate_responses(&mut records, generation, &sampling, config.concurrency)
            .map_err(|e| anyhow!(e.to_string()))?;
    } else if let Some(missing) =
        records.iter().position(|r| r.response.is_none())
    {
        bail!(
            "{}: line {}: missing field `response` (pass --generate to fill responses)",
            args.input.display(),
            missing + 1
        );
    }

    let mode = match args.mode {
        EvalModeArg::Asr => EvalMode::Asr,
        EvalModeArg::Full => EvalMode::Full,
    };
    let options = EvalOptions {
        mode,
        refusal_method: if args.asr_judge { RefusalMethod::Judge } else { RefusalMethod::Lexicon },
        concurrency: config.concurrency,
    };
    let judge = if mode == EvalMode::Full || args.asr_judge {
        Some(build_backend(&config.backends.judge)?)
    } else {
        None
    };
    let lexicon = refusal_lexicon(config, args.window)?;

    let report =
        evaluate(&records, &lexicon, &options, judge).map_err(|e| anyhow!(e.to_string()))?;
    write_eval_csv(&report, args.output).map_err(|e| anyhow!(e.to_string()))?;
    write_eval_summary(&report, &summary_path(args.output))
        .map_err(|e| anyhow!(e.to_string()))?;

    print!(
        "n={} asr={:.3} refusal_rate={:.3}",
        report.n_queries, report.asr, report.refusal_rate
    );
    if let Some(harm) = report.mean_harmfulness {
        print!(" mean_harmfulness={:.3}", harm);
    }
    if let Some(help) = report.mean_helpfulness {
        print!(" mean_helpfulness={:.3}", help);
    }
    println!();
    if report.judge_failures > 0 {
        eprintln!("{} rows had judge failures", report.judge_failures);
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}
