//! The curation loop: revise a response over several rounds of sampled
//! generation, keeping the lowest-perplexity revisions that hold quality.
//!
//! Each round, every beam entry is revised once per (temperature, top-p)
//! grid cell. Candidates are scored on perplexity (scoring backend),
//! readability (tag-structure match), and helpfulness (judge backend),
//! filtered against a floor relative to the *original* response's scores,
//! pooled with the current beam, and the k lowest-perplexity survivors
//! become the next beam. Keeping the current beam in the pool guarantees
//! the best perplexity never increases and the loop always has an output,
//! even when a round's candidates are all rejected.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{CountingLm, LmBackend, SamplingConfig};
use crate::dataset::{sample_pairs, Dataset, SampleSize, TextPair};
use crate::error::{Error, Result};
use crate::helpfulness::HelpfulnessJudge;
use crate::parallel::parallel_map;
use crate::perplexity::response_perplexity;
use crate::readability::ReadabilityScorer;
use crate::rng::derive_seed;

/// The fixed instruction prepended to every revision request.
pub const DEFAULT_REVISION_PROMPT: &str = "Given a query and its response, revise the response \
     statements to present an alternative perspective in answering the query.";

/// Grid, beam, and round parameters. Defaults: a 5x5 grid over
/// {0.2, 0.4, 0.6, 0.8, 1.0} for both temperature and top-p, beam width 3,
/// 5 rounds, quality floor 0.10 of the original scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub temperatures: Vec<f64>,
    pub top_ps: Vec<f64>,
    pub beam_k: usize,
    pub rounds: usize,
    pub quality_floor: f64,
    pub revision_prompt: String,
    pub max_tokens: usize,
    pub seed: u64,
    /// Stop early when the best perplexity improves by less than 1e-6
    /// relative for two consecutive rounds. Off by default: the standard
    /// schedule runs all rounds.
    pub early_stop: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            temperatures: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            top_ps: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            beam_k: 3,
            rounds: 5,
            quality_floor: 0.10,
            revision_prompt: DEFAULT_REVISION_PROMPT.to_string(),
            max_tokens: 256,
            seed: 0,
            early_stop: false,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperatures.is_empty() || self.top_ps.is_empty() {
            return Err(Error::invalid_argument("sampling grid lists must be non-empty"));
        }
        if self.temperatures.iter().any(|&t| t.is_nan() || t <= 0.0) {
            return Err(Error::invalid_argument("temperatures must be positive"));
        }
        if self.top_ps.iter().any(|&p| p.is_nan() || p <= 0.0 || p > 1.0) {
            return Err(Error::invalid_argument("top-p values must lie in (0, 1]"));
        }
        if self.beam_k == 0 {
            return Err(Error::invalid_argument("beam_k must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid_argument("rounds must be at least 1"));
        }
        if self.quality_floor < 0.0 {
            return Err(Error::invalid_argument("quality_floor must be non-negative"));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid_argument("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// The sampling grid in temperature-major, top-p-minor order: with the
/// defaults the first config is (0.2, 0.2) and the last (1.0, 1.0).
pub fn enumerate_configs(config: &CurationConfig) -> Result<Vec<SamplingConfig>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.temperatures.len() * config.top_ps.len());
    for &temperature in &config.temperatures {
        for &top_p in &config.top_ps {
            out.push(SamplingConfig {
                temperature,
                top_p,
                max_tokens: config.max_tokens,
                seed: None,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub ppl: f64,
    pub readability: f64,
    pub helpfulness: f64,
}

/// A candidate revision with its scores and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub text: String,
    pub scores: ScoreTriple,
    /// (round, parent beam index, grid config index); the original
    /// response is (0, 0, 0).
    pub origin: (usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Passed,
    LowReadability,
    LowHelpfulness,
    LowBoth,
}

/// Applies the quality floor: a candidate passes when its readability and
/// helpfulness are both at least `floor` times the original response's
/// values. Rejections record which metric fell short.
pub fn filter_verdict(
    scores: &ScoreTriple,
    baseline: &ScoreTriple,
    floor: f64,
) -> FilterVerdict {
    let low_readability = scores.readability < floor * baseline.readability;
    let low_helpfulness = scores.helpfulness < floor * baseline.helpfulness;
    match (low_readability, low_helpfulness) {
        (false, false) => FilterVerdict::Passed,
        (true, false) => FilterVerdict::LowReadability,
        (false, true) => FilterVerdict::LowHelpfulness,
        (true, true) => FilterVerdict::LowBoth,
    }
}

/// Ranks the pool by perplexity ascending (ties broken by shorter text,
/// then lexicographic text), deduplicates identical texts, and keeps at
/// most `k`.
pub fn select_top_k(mut pool: Vec<ScoredCandidate>, k: usize) -> Vec<ScoredCandidate> {
    pool.sort_by(|a, b| {
        a.scores
            .ppl
            .partial_cmp(&b.scores.ppl)
            .unwrap()
            .then(a.text.len().cmp(&b.text.len()))
            .then(a.text.cmp(&b.text))
    });
    let mut seen = std::collections::HashSet::new();
    pool.retain(|c| seen.insert(c.text.clone()));
    pool.truncate(k.max(1));
    pool
}

// ── Trace types ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub text: String,
    pub ppl: f64,
    pub readability: f64,
    pub helpfulness: f64,
    pub parent: usize,
    pub config_index: usize,
    pub verdict: FilterVerdict,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub parent: usize,
    pub config_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeamEntry {
    pub text: String,
    pub ppl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Beam size entering the round; generations attempted =
    /// `parents * grid size` = candidates + failures.
    pub parents: usize,
    pub candidates: Vec<CandidateTrace>,
    pub generation_failures: Vec<GenerationFailure>,
    pub beam: Vec<BeamEntry>,
}

/// Full history of one pair's curation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationTrace {
    pub pair_id: String,
    pub baseline: ScoreTriple,
    pub rounds: Vec<RoundTrace>,
    pub final_text: String,
    pub final_scores: ScoreTriple,
    pub rounds_executed: usize,
    pub total_backend_calls: usize,
}

/// A pair the engine could not curate, with however much trace was built.
/// The trace is boxed: it dwarfs the rest of the error value.
#[derive(Debug)]
pub struct PairFailure {
    pub id: String,
    pub error: Error,
    pub trace: Option<Box<CurationTrace>>,
}

/// Output of a dataset run.
#[derive(Debug)]
pub struct CurationRun {
    pub curated: Dataset,
    pub traces: Vec<CurationTrace>,
    pub failures: Vec<PairFailure>,
    pub interrupted: bool,
}

/// Progress callbacks from `curate_dataset`.
pub enum PairEvent<'a> {
    Done { index: usize, total: usize, id: &'a str, backend_calls: usize },
    Failed { index: usize, total: usize, id: &'a str, error: &'a Error },
}

pub struct Backends {
    pub scoring: Arc<dyn LmBackend>,
    pub generation: Arc<dyn LmBackend>,
    pub judge: Arc<dyn LmBackend>,
}

impl Backends {
    /// One backend serving all three roles.
    pub fn shared(backend: Arc<dyn LmBackend>) -> Self {
        Self { scoring: backend.clone(), generation: backend.clone(), judge: backend }
    }
}

pub struct CurationEngine {
    backends: Backends,
    readability: ReadabilityScorer,
    helpfulness: HelpfulnessJudge,
    config: CurationConfig,
    concurrency: usize,
}

impl CurationEngine {
    pub fn new(backends: Backends, readability: ReadabilityScorer, config: CurationConfig) -> Self {
        Self {
            backends,
            readability,
            helpfulness: HelpfulnessJudge::new(),
            config,
            concurrency: 8,
        }
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    /// Replaces the default helpfulness judge, e.g. to add a reply cache
    /// or a custom preamble.
    pub fn with_helpfulness(mut self, helpfulness: HelpfulnessJudge) -> Self {
        self.helpfulness = helpfulness;
        self
    }

    pub fn config(&self) -> &CurationConfig {
        &self.config
    }

    /// The revision request sent to the generation backend.
    fn render_revision_prompt(&self, query: &str, response: &str) -> String {
        format!(
            "{}\n\nQuery: {}\nResponse: {}\n\nRevised response:",
            self.config.revision_prompt, query, response
        )
    }

    fn score_text(
        &self,
        pair: &TextPair,
        text: &str,
        scoring: &dyn LmBackend,
        judge: &dyn LmBackend,
    ) -> Result<ScoreTriple> {
        let probe = TextPair {
            response: text.to_string(),
            ..pair.clone()
        };
        let ppl = response_perplexity(&probe, scoring)?.ppl;
        let readability = self.readability.estimate(text)?.value;
        let helpfulness = self.helpfulness.score_helpfulness(&probe, judge)?.overall;
        Ok(ScoreTriple { ppl, readability, helpfulness })
    }

    /// Runs the full loop for one pair. On failure the partial trace rides
    /// along in the error value.
    pub fn curate_pair(
        &self,
        pair: &TextPair,
    ) -> std::result::Result<(TextPair, CurationTrace), PairFailure> {
        self.config.validate().map_err(|error| PairFailure {
            id: pair.id.clone(),
            error,
            trace: None,
        })?;
        let scoring = CountingLm::new(self.backends.scoring.clone());
        let generation = CountingLm::new(self.backends.generation.clone());
        let judge = CountingLm::new(self.backends.judge.clone());
        let fail = |error: Error, rounds: Vec<RoundTrace>, baseline: Option<ScoreTriple>| {
            PairFailure {
                id: pair.id.clone(),
                error,
                trace: baseline.map(|baseline| Box::new(CurationTrace {
                    pair_id: pair.id.clone(),
                    baseline,
                    rounds_executed: rounds.len(),
                    rounds,
                    final_text: String::new(),
                    final_scores: baseline,
                    total_backend_calls: 0,
                })),
            }
        };

        let baseline = self
            .score_text(pair, &pair.response, &scoring, &judge)
            .map_err(|e| fail(e, Vec::new(), None))?;

        let configs = enumerate_configs(&self.config).expect("validated above");
        let mut beam = vec![ScoredCandidate {
            text: pair.response.clone(),
            scores: baseline,
            origin: (0, 0, 0),
        }];
        let mut rounds: Vec<RoundTrace> = Vec::new();
        let mut previous_best = baseline.ppl;
        let mut stale_rounds = 0usize;

        for round in 1..=self.config.rounds {
            // One job per (beam entry, grid cell), seeded from the config
            // seed and the job coordinates.
            let jobs: Vec<(usize, usize)> = (0..beam.len())
                .flat_map(|parent| (0..configs.len()).map(move |c| (parent, c)))
                .collect();
            let generated: Vec<(usize, usize, std::result::Result<String, String>)> =
                parallel_map(&jobs, self.concurrency, |_, &(parent, config_index)| {
                    let prompt =
                        self.render_revision_prompt(&pair.query, &beam[parent].text);
                    let seed = derive_seed(
                        self.config.seed,
                        &[round as u64, parent as u64, config_index as u64],
                    );
                    let config = configs[config_index].clone().with_seed(seed);
                    let outcome = generation
                        .generate(&prompt, &config)
                        .map_err(|e| e.to_string());
                    (parent, config_index, outcome)
                });

            let mut texts: Vec<(usize, usize, String)> = Vec::new();
            let mut failures: Vec<GenerationFailure> = Vec::new();
            for (parent, config_index, outcome) in generated {
                match outcome {
                    Ok(text) => texts.push((parent, config_index, text)),
                    Err(error) => {
                        failures.push(GenerationFailure { parent, config_index, error })
                    }
                }
            }
            if texts.is_empty() {
                return Err(fail(
                    Error::backend(format!(
                        "every generation in round {} failed ({} attempts)",
                        round,
                        failures.len()
                    )),
                    rounds,
                    Some(baseline),
                ));
            }

            // Score all new candidates; a scoring failure aborts the pair.
            let scored: Vec<std::result::Result<ScoredCandidate, Error>> =
                parallel_map(&texts, self.concurrency, |_, (parent, config_index, text)| {
                    self.score_text(pair, text, &scoring, &judge).map(|scores| {
                        ScoredCandidate {
                            text: text.clone(),
                            scores,
                            origin: (round, *parent, *config_index),
                        }
                    })
                });
            let mut candidates = Vec::with_capacity(scored.len());
            for outcome in scored {
                match outcome {
                    Ok(candidate) => candidates.push(candidate),
                    Err(error) => return Err(fail(error, rounds, Some(baseline))),
                }
            }

            let verdicts: Vec<FilterVerdict> = candidates
                .iter()
                .map(|c| filter_verdict(&c.scores, &baseline, self.config.quality_floor))
                .collect();
            let passed: Vec<ScoredCandidate> = candidates
                .iter()
                .zip(&verdicts)
                .filter(|(_, v)| **v == FilterVerdict::Passed)
                .map(|(c, _)| c.clone())
                .collect();

            // Elitism: the current beam always competes, so the best
            // perplexity is non-increasing and the pool is never empty.
            let mut pool = beam.clone();
            pool.extend(passed);
            let next_beam = select_top_k(pool, self.config.beam_k);

            let selected: std::collections::HashSet<&str> =
                next_beam.iter().map(|c| c.text.as_str()).collect();
            rounds.push(RoundTrace {
                round,
                parents: beam.len(),
                candidates: candidates
                    .iter()
                    .zip(&verdicts)
                    .map(|(c, &verdict)| CandidateTrace {
                        text: c.text.clone(),
                        ppl: c.scores.ppl,
                        readability: c.scores.readability,
                        helpfulness: c.scores.helpfulness,
                        parent: c.origin.1,
                        config_index: c.origin.2,
                        verdict,
                        selected: selected.contains(c.text.as_str()),
                    })
                    .collect(),
                generation_failures: failures,
                beam: next_beam
                    .iter()
                    .map(|c| BeamEntry { text: c.text.clone(), ppl: c.scores.ppl })
                    .collect(),
            });
            beam = next_beam;

            if self.config.early_stop {
                let best = beam[0].scores.ppl;
                let relative = (previous_best - best) / previous_best.max(f64::MIN_POSITIVE);
                if relative < 1e-6 {
                    stale_rounds += 1;
                    if stale_rounds >= 2 {
                        break;
                    }
                } else {
                    stale_rounds = 0;
                }
                previous_best = best;
            }
        }

        let winner = beam.into_iter().next().expect("beam is never empty");
        let rounds_executed = rounds.len();
        let total_backend_calls = scoring.calls() + generation.calls() + judge.calls();
        let mut curated = pair.clone();
        curated.response = winner.text.clone();
        curated.source = "curated".to_string();
        let meta = &mut curated.meta;
        meta.insert("baseline_ppl".into(), format!("{}", baseline.ppl));
        meta.insert("baseline_readability".into(), format!("{}", baseline.readability));
        meta.insert("baseline_helpfulness".into(), format!("{}", baseline.helpfulness));
        meta.insert("final_ppl".into(), format!("{}", winner.scores.ppl));
        meta.insert("final_readability".into(), format!("{}", winner.scores.readability));
        meta.insert("final_helpfulness".into(), format!("{}", winner.scores.helpfulness));
        meta.insert("rounds".into(), format!("{}", rounds_executed));
        meta.insert("scoring_model".into(), self.backends.scoring.model_name().to_string());
        meta.insert("generation_model".into(), self.backends.generation.model_name().to_string());
        meta.insert("judge_model".into(), self.backends.judge.model_name().to_string());

        let trace = CurationTrace {
            pair_id: pair.id.clone(),
            baseline,
            rounds,
            final_text: winner.text,
            final_scores: winner.scores,
            rounds_executed,
            total_backend_calls,
        };
        Ok((curated, trace))
    }

    /// Samples `size` of the dataset and curates each selected pair in
    /// selection order. Failed pairs are reported and omitted from the
    /// output. A cancel flag (checked between pairs) stops the run early
    /// with whatever completed so far.
    pub fn curate_dataset(
        &self,
        ds: &Dataset,
        size: SampleSize,
        seed: u64,
        cancel: Option<&AtomicBool>,
        mut observer: impl FnMut(PairEvent<'_>),
    ) -> Result<CurationRun> {
        let selection = sample_pairs(ds, size, seed)?;
        let total = selection.len();
        let mut curated = Vec::new();
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        let mut interrupted = false;
        for (index, pair) in selection.iter().enumerate() {
            if cancel.map(|flag| flag.load(Ordering::SeqCst)).unwrap_or(false) {
                interrupted = true;
                break;
            }
            match self.curate_pair(pair) {
                Ok((pair_out, trace)) => {
                    observer(PairEvent::Done {
                        index,
                        total,
                        id: &pair.id,
                        backend_calls: trace.total_backend_calls,
                    });
                    curated.push(pair_out);
                    traces.push(trace);
                }
                Err(failure) => {
                    observer(PairEvent::Failed {
                        index,
                        total,
                        id: &pair.id,
                        error: &failure.error,
                    });
                    failures.push(failure);
                }
            }
        }
        Ok(CurationRun {
            curated: Dataset::from_pairs(format!("{}-curated", ds.name), curated)?,
            traces,
            failures,
            interrupted,
        })
    }
}

/// Writes traces as JSONL, one object per pair, appending an
/// `{"marker":"interrupted",...}` record when the run was cut short.
pub fn write_traces_jsonl(
    traces: &[CurationTrace],
    interrupted: bool,
    path: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    for trace in traces {
        out.push_str(&serde_json::to_string(trace).expect("trace serialization cannot fail"));
        out.push('\n');
    }
    if interrupted {
        out.push_str(&format!(
            "{{\"marker\":\"interrupted\",\"completed_pairs\":{}}}\n",
            traces.len()
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockLm, TokenLogProb};

    fn triple(ppl: f64, readability: f64, helpfulness: f64) -> ScoreTriple {
        ScoreTriple { ppl, readability, helpfulness }
    }

    fn candidate(text: &str, ppl: f64) -> ScoredCandidate {
        ScoredCandidate { text: text.to_string(), scores: triple(ppl, 0.5, 3.0), origin: (1, 0, 0) }
    }

    #[test]
    fn default_grid_is_twenty_five_configs_in_order() {
        let configs = enumerate_configs(&CurationConfig::default()).unwrap();
        assert_eq!(configs.len(), 25);
        assert_eq!((configs[0].temperature, configs[0].top_p), (0.2, 0.2));
        assert_eq!((configs[1].temperature, configs[1].top_p), (0.2, 0.4));
        assert_eq!((configs[24].temperature, configs[24].top_p), (1.0, 1.0));
    }

    #[test]
    fn grid_cardinality_is_the_cross_product() {
        let config = CurationConfig {
            temperatures: vec![0.5, 1.0],
            top_ps: vec![0.3, 0.6, 0.9],
            ..CurationConfig::default()
        };
        let configs = enumerate_configs(&config).unwrap();
        assert_eq!(configs.len(), 6);
        let pairs: Vec<(f64, f64)> =
            configs.iter().map(|c| (c.temperature, c.top_p)).collect();
        assert_eq!(
            pairs,
            [(0.5, 0.3), (0.5, 0.6), (0.5, 0.9), (1.0, 0.3), (1.0, 0.6), (1.0, 0.9)]
        );

        let single = CurationConfig {
            temperatures: vec![0.7],
            top_ps: vec![0.9],
            ..CurationConfig::default()
        };
        assert_eq!(enumerate_configs(&single).unwrap().len(), 1);
    }

    #[test]
    fn zero_rounds_is_rejected() {
        let config = CurationConfig { rounds: 0, ..CurationConfig::default() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn filter_thresholds_are_strict_less_than() {
        let baseline = triple(5.0, 0.8, 4.0);
        // 0.07 < 0.10 * 0.8 = 0.08 -> rejected.
        assert_eq!(
            filter_verdict(&triple(5.0, 0.07, 4.0), &baseline, 0.10),
            FilterVerdict::LowReadability
        );
        // Equal to the baseline passes.
        assert_eq!(
            filter_verdict(&triple(9.0, 0.8, 4.0), &baseline, 0.10),
            FilterVerdict::Passed
        );
        // Floor 0 passes everything.
        assert_eq!(
            filter_verdict(&triple(9.0, 0.0, 0.0), &baseline, 0.0),
            FilterVerdict::Passed
        );
        // Both low reports both.
        assert_eq!(
            filter_verdict(&triple(9.0, 0.0, 0.0), &baseline, 0.10),
            FilterVerdict::LowBoth
        );
    }

    #[test]
    fn filter_boundary_cases_at_both_floors() {
        let baseline = triple(5.0, 0.8, 4.0);
        let floor = 0.10;
        for (factor, expected) in [
            (0.09, FilterVerdict::LowReadability),
            (0.10, FilterVerdict::Passed),
            (1.0, FilterVerdict::Passed),
        ] {
            let scores = triple(5.0, factor * baseline.readability, 4.0);
            assert_eq!(filter_verdict(&scores, &baseline, floor), expected, "{}", factor);
        }
        // At floor 0.9 a candidate at half the original readability flips
        // to rejected.
        let half = triple(5.0, 0.5 * baseline.readability, 4.0);
        assert_eq!(filter_verdict(&half, &baseline, 0.10), FilterVerdict::Passed);
        assert_eq!(filter_verdict(&half, &baseline, 0.9), FilterVerdict::LowReadability);
    }

    #[test]
    fn top_k_sorts_ascending_and_truncates() {
        let pool = vec![
            candidate("five", 5.0),
            candidate("two-a", 2.0),
            candidate("nine", 9.0),
            candidate("two-b", 2.0),
        ];
        let selected = select_top_k(pool, 3);
        let ppls: Vec<f64> = selected.iter().map(|c| c.scores.ppl).collect();
        assert_eq!(ppls, [2.0, 2.0, 5.0]);

        let small = select_top_k(vec![candidate("a", 3.0), candidate("b", 1.0)], 5);
        assert_eq!(small.len(), 2);
        assert_eq!(small[0].scores.ppl, 1.0);
    }

    #[test]
    fn top_k_ties_break_by_length_then_text() {
        let pool = vec![
            candidate("bbb", 2.0),
            candidate("aa", 2.0),
            candidate("ab", 2.0),
        ];
        let selected = select_top_k(pool, 2);
        let texts: Vec<&str> = selected.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["aa", "ab"]);
    }

    #[test]
    fn top_k_deduplicates_identical_texts() {
        let pool = vec![candidate("same", 2.0), candidate("same", 2.0), candidate("other", 3.0)];
        let selected = select_top_k(pool, 3);
        assert_eq!(selected.len(), 2);
    }

    fn mock_pair(seed: u64) -> TextPair {
        let walk = MockLm::builtin().table().random_walk(seed, 6);
        TextPair::new(format!("pair{}", seed), "hello world", walk, "clean")
    }

    fn mock_engine(config: CurationConfig) -> CurationEngine {
        let backend: Arc<dyn LmBackend> = Arc::new(MockLm::builtin());
        CurationEngine::new(
            Backends::shared(backend),
            ReadabilityScorer::builtin(),
            config,
        )
        .with_concurrency(4)
    }

    #[test]
    fn mock_run_improves_and_respects_structure() {
        let config = CurationConfig { seed: 7, ..CurationConfig::default() };
        let engine = mock_engine(config);
        let pair = mock_pair(1);
        let (curated, trace) = engine.curate_pair(&pair).unwrap();

        assert!(trace.final_scores.ppl <= trace.baseline.ppl);
        assert_eq!(curated.source, "curated");
        assert_eq!(curated.id, pair.id);
        assert_eq!(trace.rounds.len(), 5);

        // Candidate counts per round: parents * 25, minus recorded failures.
        for round in &trace.rounds {
            assert_eq!(
                round.candidates.len() + round.generation_failures.len(),
                round.parents * 25
            );
            assert!(round.beam.len() <= 3);
        }
        // Best-of-beam perplexity is non-increasing across rounds.
        let mut best = trace.baseline.ppl;
        for round in &trace.rounds {
            let round_best = round.beam[0].ppl;
            assert!(round_best <= best + 1e-12, "{} > {}", round_best, best);
            best = round_best;
        }
        assert!(trace.total_backend_calls > 0);
        assert_eq!(curated.meta["rounds"], "5");
    }

    #[test]
    fn curate_pair_is_deterministic() {
        let config = CurationConfig { seed: 3, ..CurationConfig::default() };
        let engine = mock_engine(config.clone());
        let pair = mock_pair(2);
        let (a_pair, a_trace) = engine.curate_pair(&pair).unwrap();
        let engine2 = mock_engine(config);
        let (b_pair, b_trace) = engine2.curate_pair(&pair).unwrap();
        assert_eq!(a_pair, b_pair);
        assert_eq!(
            serde_json::to_string(&a_trace).unwrap(),
            serde_json::to_string(&b_trace).unwrap()
        );
    }

    /// Generation backend that always emits one fixed reply.
    struct FixedGeneration(String);

    impl LmBackend for FixedGeneration {
        fn score_tokens(&self, _: &str, _: &str) -> Result<Vec<TokenLogProb>> {
            unreachable!("generation only")
        }
        fn generate(&self, _: &str, _: &SamplingConfig) -> Result<String> {
            Ok(self.0.clone())
        }
        fn judge(&self, _: &str) -> Result<String> {
            unreachable!("generation only")
        }
        fn model_name(&self) -> &str {
            "fixed"
        }
    }

    #[test]
    fn elitism_keeps_the_original_when_candidates_are_worse() {
        // The fixed revision "bright bright" has ppl 32 under the builtin
        // table; the original response "world" after query "hello" has
        // ppl 2. One round, one grid cell.
        let mock: Arc<dyn LmBackend> = Arc::new(MockLm::builtin());
        let backends = Backends {
            scoring: mock.clone(),
            generation: Arc::new(FixedGeneration("bright bright".into())),
            judge: mock,
        };
        let config = CurationConfig {
            temperatures: vec![1.0],
            top_ps: vec![1.0],
            rounds: 1,
            ..CurationConfig::default()
        };
        let engine =
            CurationEngine::new(backends, ReadabilityScorer::builtin(), config);
        let pair = TextPair::new("p", "hello", "world", "clean");
        let (curated, trace) = engine.curate_pair(&pair).unwrap();
        assert_eq!(curated.response, "world");
        assert_eq!(trace.final_scores.ppl, trace.baseline.ppl);
        assert_eq!(trace.rounds[0].candidates.len(), 1);
    }

    #[test]
    fn elitism_carries_the_beam_when_every_candidate_is_filtered() {
        // quality_floor 2.0 demands candidates twice as readable and
        // helpful as the original; nothing passes, the beam survives.
        let config = CurationConfig {
            quality_floor: 2.0,
            rounds: 2,
            seed: 5,
            ..CurationConfig::default()
        };
        let engine = mock_engine(config);
        let pair = mock_pair(3);
        let (curated, trace) = engine.curate_pair(&pair).unwrap();
        assert_eq!(curated.response, pair.response);
        for round in &trace.rounds {
            assert!(round
                .candidates
                .iter()
                .all(|c| c.verdict != FilterVerdict::Passed || !c.selected));
            assert_eq!(round.beam.len(), 1);
        }
    }

    /// Generation backend that fails the first `failures` calls, then
    /// delegates to the mock.
    struct FlakyGeneration {
        inner: MockLm,
        remaining_failures: std::sync::atomic::AtomicUsize,
    }

    impl LmBackend for FlakyGeneration {
        fn score_tokens(&self, _: &str, _: &str) -> Result<Vec<TokenLogProb>> {
            unreachable!("generation only")
        }
        fn generate(&self, context: &str, config: &SamplingConfig) -> Result<String> {
            let left = self
                .remaining_failures
                .fetch_update(
                    std::sync::atomic::Ordering::SeqCst,
                    std::sync::atomic::Ordering::SeqCst,
                    |n| n.checked_sub(1),
                )
                .is_ok();
            if left {
                Err(crate::Error::backend("synthetic timeout"))
            } else {
                self.inner.generate(context, config)
            }
        }
        fn judge(&self, _: &str) -> Result<String> {
            unreachable!("generation only")
        }
        fn model_name(&self) -> &str {
            "flaky"
        }
    }

    #[test]
    fn single_generation_failure_is_recorded_and_skipped() {
        let mock: Arc<dyn LmBackend> = Arc::new(MockLm::builtin());
        let backends = Backends {
            scoring: mock.clone(),
            generation: Arc::new(FlakyGeneration {
                inner: MockLm::builtin(),
                remaining_failures: std::sync::atomic::AtomicUsize::new(1),
            }),
            judge: mock,
        };
        let config = CurationConfig { rounds: 1, ..CurationConfig::default() };
        let engine = CurationEngine::new(backends, ReadabilityScorer::builtin(), config)
            .with_concurrency(1);
        let (_, trace) = engine.curate_pair(&mock_pair(4)).unwrap();
        let round = &trace.rounds[0];
        assert_eq!(round.candidates.len(), 24);
        assert_eq!(round.generation_failures.len(), 1);
        assert!(round.generation_failures[0].error.contains("synthetic timeout"));
    }

    #[test]
    fn total_generation_failure_aborts_with_the_trace() {
        let mock: Arc<dyn LmBackend> = Arc::new(MockLm::builtin());
        let backends = Backends {
            scoring: mock.clone(),
            generation: Arc::new(FlakyGeneration {
                inner: MockLm::builtin(),
                remaining_failures: std::sync::atomic::AtomicUsize::new(usize::MAX),
            }),
            judge: mock,
        };
        let config = CurationConfig { rounds: 3, ..CurationConfig::default() };
        let engine = CurationEngine::new(backends, ReadabilityScorer::builtin(), config);
        let failure = engine.curate_pair(&mock_pair(5)).unwrap_err();
        assert!(failure.error.to_string().contains("every generation in round 1 failed"));
        let trace = failure.trace.expect("partial trace attached");
        assert!(trace.rounds.is_empty());
        assert!(trace.baseline.ppl > 0.0);
    }

    #[test]
    fn curate_dataset_samples_and_reports() {
        let pairs: Vec<TextPair> = (0..40)
            .map(|i| {
                let walk = MockLm::builtin().table().random_walk(i, 5);
                TextPair::new(format!("p{}", i), "hello", walk, "clean")
            })
            .collect();
        let ds = Dataset::from_pairs("clean", pairs).unwrap();
        let config = CurationConfig {
            rounds: 2,
            seed: 11,
            ..CurationConfig::default()
        };
        let engine = mock_engine(config.clone());
        let mut done = 0;
        let run = engine
            .curate_dataset(&ds, SampleSize::Fraction(0.1), 42, None, |event| {
                if let PairEvent::Done { .. } = event {
                    done += 1;
                }
            })
            .unwrap();
        assert_eq!(run.curated.len(), 4);
        assert_eq!(run.traces.len(), 4);
        assert_eq!(done, 4);
        assert!(!run.interrupted);
        assert!(run.failures.is_empty());

        // Same seed and config reproduce the same output.
        let engine2 = mock_engine(config);
        let run2 = engine2
            .curate_dataset(&ds, SampleSize::Fraction(0.1), 42, None, |_| {})
            .unwrap();
        assert_eq!(run.curated.pairs(), run2.curated.pairs());
    }

    #[test]
    fn unscoreable_pair_is_reported_and_omitted() {
        let pairs = vec![
            TextPair::new("good", "hello", "world again", "clean"),
            TextPair::new("bad", "hello", "tokens outside the vocabulary", "clean"),
        ];
        let ds = Dataset::from_pairs("mixed", pairs).unwrap();
        let config = CurationConfig { rounds: 1, ..CurationConfig::default() };
        let engine = mock_engine(config);
        let run = engine
            .curate_dataset(&ds, SampleSize::Fraction(1.0), 0, None, |_| {})
            .unwrap();
        assert_eq!(run.curated.len(), 1);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].id, "bad");
    }

    #[test]
    fn cancel_flag_stops_between_pairs() {
        let pairs: Vec<TextPair> = (0..6)
            .map(|i| {
                let walk = MockLm::builtin().table().random_walk(i, 4);
                TextPair::new(format!("p{}", i), "hello", walk, "clean")
            })
            .collect();
        let ds = Dataset::from_pairs("clean", pairs).unwrap();
        let config = CurationConfig { rounds: 1, ..CurationConfig::default() };
        let engine = mock_engine(config);
        let cancel = AtomicBool::new(false);
        let mut seen = 0;
        let run = engine
            .curate_dataset(&ds, SampleSize::Fraction(1.0), 0, Some(&cancel), |_| {
                seen += 1;
                if seen == 2 {
                    cancel.store(true, Ordering::SeqCst);
                }
            })
            .unwrap();
        assert!(run.interrupted);
        assert_eq!(run.curated.len(), 2);
    }

    #[test]
    fn traces_serialize_to_jsonl_with_interrupt_marker() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let config = CurationConfig { rounds: 1, ..CurationConfig::default() };
        let engine = mock_engine(config);
        let (_, trace) = engine.curate_pair(&mock_pair(9)).unwrap();
        write_traces_jsonl(&[trace], true, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("\"marker\":\"interrupted\""));
        let parsed: CurationTrace = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed.pair_id, "pair9");
    }
}
