//! Perplexity of a response under a scoring backend.
//!
//! Perplexity is the exponential of the mean negative log-likelihood per
//! token: `exp(-(1/n) * sum(logprob_i))`. Responses are scored conditioned
//! on their query through a fixed template (`"Query: {q}\nResponse: "`),
//! which keeps scores comparable across queries; unconditioned scoring is
//! available behind [`Conditioning::None`].

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::backend::{LmBackend, TokenLogProb};
use crate::dataset::{Dataset, TextPair};
use crate::error::{Error, Result};
use crate::parallel::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexityResult {
    pub ppl: f64,
    pub token_count: usize,
    pub mean_nll: f64,
}

/// Computes perplexity from scored tokens. Rejects empty input and any
/// non-finite log-probability, naming the offending position.
pub fn perplexity_of(logprobs: &[TokenLogProb]) -> Result<PerplexityResult> {
    if logprobs.is_empty() {
        return Err(Error::empty("log-probability list"));
    }
    let mut sum = 0.0;
    for tlp in logprobs {
        if !tlp.logprob.is_finite() {
            return Err(Error::NonFiniteLogProb { position: tlp.position, value: tlp.logprob });
        }
        sum += tlp.logprob;
    }
    let n = logprobs.len();
    let mean_nll = -sum / n as f64;
    Ok(PerplexityResult { ppl: mean_nll.exp(), token_count: n, mean_nll })
}

/// Whether the response is scored conditioned on its query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Score response tokens after `"Query: {q}\nResponse: "`.
    QueryTemplate,
    /// Score the bare response.
    None,
}

pub fn format_query_context(query: &str) -> String {
    format!("Query: {}\nResponse: ", query)
}

pub fn response_perplexity_with(
    pair: &TextPair,
    backend: &dyn LmBackend,
    conditioning: Conditioning,
) -> Result<PerplexityResult> {
    let context = match conditioning {
        Conditioning::QueryTemplate => format_query_context(&pair.query),
        Conditioning::None => String::new(),
    };
    let scored = backend.score_tokens(&context, &pair.response)?;
    perplexity_of(&scored)
}

/// Perplexity of the response conditioned on the query.
pub fn response_perplexity(pair: &TextPair, backend: &dyn LmBackend) -> Result<PerplexityResult> {
    response_perplexity_with(pair, backend, Conditioning::QueryTemplate)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub id: String,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<PerplexityResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileSummary {
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<HistogramBucket>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetProfile {
    pub rows: Vec<ProfileRow>,
    pub summary: ProfileSummary,
}

/// Default number of log-spaced histogram buckets.
pub const DEFAULT_BUCKETS: usize = 20;

/// Scores every pair, concurrently up to `concurrency`, assembling rows in
/// dataset order. Per-pair failures are recorded, not fatal; the summary
/// covers the successes and reports the failure count.
pub fn dataset_perplexity_profile(
    ds: &Dataset,
    backend: Arc<dyn LmBackend>,
    conditioning: Conditioning,
    concurrency: usize,
    buckets: usize,
) -> Result<DatasetProfile> {
    if ds.is_empty() {
        return Err(Error::empty("dataset"));
    }
    let rows: Vec<ProfileRow> = parallel_map(ds.pairs(), concurrency, |_, pair| {
        match response_perplexity_with(pair, backend.as_ref(), conditioning) {
            Ok(result) => ProfileRow {
                id: pair.id.clone(),
                source: pair.source.clone(),
                result: Some(result),
                error: None,
            },
            Err(e) => ProfileRow {
                id: pair.id.clone(),
                source: pair.source.clone(),
                result: None,
                error: Some(e.to_string()),
            },
        }
    });
    let summary = summarize(&rows, buckets)?;
    Ok(DatasetProfile { rows, summary })
}

fn summarize(rows: &[ProfileRow], buckets: usize) -> Result<ProfileSummary> {
    let mut values: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().map(|p| p.ppl))
        .collect();
    let failures = rows.len() - values.len();
    if values.is_empty() {
        return Err(Error::invalid_dataset(format!(
            "no pair could be scored ({} failures)",
            failures
        )));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let min = values[0];
    let max = values[count - 1];
    Ok(ProfileSummary {
        count,
        failures,
        mean,
        median: quantile(&values, 0.5),
        q1: quantile(&values, 0.25),
        q3: quantile(&values, 0.75),
        min,
        max,
        histogram: log_histogram(&values, buckets.max(1)),
    })
}

/// Linear interpolation between order statistics (the common default).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Buckets with log-spaced edges spanning the observed range. Perplexity
/// is always positive, so the logs are defined.
fn log_histogram(sorted: &[f64], buckets: usize) -> Vec<HistogramBucket> {
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    if min == max {
        return vec![HistogramBucket { lo: min, hi: max, count: sorted.len() }];
    }
    let (log_min, log_max) = (min.ln(), max.ln());
    let step = (log_max - log_min) / buckets as f64;
    let mut out: Vec<HistogramBucket> = (0..buckets)
        .map(|i| HistogramBucket {
            lo: (log_min + step * i as f64).exp(),
            hi: (log_min + step * (i + 1) as f64).exp(),
            count: 0,
        })
        .collect();
    for &v in sorted {
        let mut idx = (((v.ln() - log_min) / step).floor() as usize).min(buckets - 1);
        // Guard against edge rounding putting a value just below its bucket.
        if v < out[idx].lo && idx > 0 {
            idx -= 1;
        }
        out[idx].count += 1;
    }
    out
}

/// Writes `id, source, ppl, token_count, mean_nll` rows. Failed pairs get
/// empty numeric fields and their error in the trailing column.
pub fn write_profile_csv(profile: &DatasetProfile, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    writer
        .write_record(["id", "source", "ppl", "token_count", "mean_nll", "error"])
        .map_err(|e| Error::invalid_argument(e.to_string()))?;
    for row in &profile.rows {
        let record = match &row.result {
            Some(p) => [
                row.id.clone(),
                row.source.clone(),
                format!("{}", p.ppl),
                format!("{}", p.token_count),
                format!("{}", p.mean_nll),
                String::new(),
            ],
            None => [
                row.id.clone(),
                row.source.clone(),
                String::new(),
                String::new(),
                String::new(),
                row.error.clone().unwrap_or_default(),
            ],
        };
        writer.write_record(&record).map_err(|e| Error::invalid_argument(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the sidecar summary as pretty JSON.
pub fn write_profile_summary(profile: &DatasetProfile, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&profile.summary)
        .map_err(|e| Error::invalid_argument(e.to_string()))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockLm;

    fn tlp(logprob: f64, position: usize) -> TokenLogProb {
        TokenLogProb { token: format!("t{}", position), logprob, position }
    }

    #[test]
    fn uniform_ten_gives_ppl_ten() {
        let logprobs: Vec<TokenLogProb> = (0..4).map(|i| tlp(0.1f64.ln(), i)).collect();
        let result = perplexity_of(&logprobs).unwrap();
        assert!((result.ppl - 10.0).abs() < 1e-9);
        assert_eq!(result.token_count, 4);
    }

    #[test]
    fn certain_token_gives_ppl_one() {
        let result = perplexity_of(&[tlp(0.0, 0)]).unwrap();
        assert!((result.ppl - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_token_case() {
        // mean_nll = (ln 2 + ln 4) / 2, ppl = exp of that = 2 * sqrt(2).
        let result = perplexity_of(&[tlp(0.5f64.ln(), 0), tlp(0.25f64.ln(), 1)]).unwrap();
        let expected = 2.0 * 2.0f64.sqrt();
        assert!((result.ppl - expected).abs() < 1e-12, "{}", result.ppl);
        // Independent arithmetic route: product of inverse probabilities
        // to the 1/n power.
        let brute = (1.0_f64 / (0.5 * 0.25)).powf(0.5);
        assert!((result.ppl - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_and_non_finite_inputs_are_rejected() {
        assert!(perplexity_of(&[]).is_err());
        let err = perplexity_of(&[tlp(-1.0, 0), tlp(f64::NAN, 1)]).unwrap_err();
        assert!(err.to_string().contains("position 1"), "got: {}", err);
        assert!(perplexity_of(&[tlp(f64::NEG_INFINITY, 0)]).is_err());
    }

    #[test]
    fn ppl_at_least_one_and_decreasing_in_each_logprob() {
        let base = vec![tlp(-0.7, 0), tlp(-1.2, 1), tlp(-0.1, 2)];
        let ppl0 = perplexity_of(&base).unwrap().ppl;
        assert!(ppl0 >= 1.0);
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i].logprob += 0.05;
            assert!(perplexity_of(&bumped).unwrap().ppl < ppl0);
        }
    }

    #[test]
    fn conditioned_scoring_matches_analytic_table_value() {
        let mock = MockLm::builtin();
        let pair = TextPair::new("p", "hello", "world again", "t");
        let result = response_perplexity(&pair, &mock).unwrap();
        // Conditioning state is "hello"; P(world|hello)=0.5, P(again|world)=0.5.
        let analytic = ((0.5f64.ln() + 0.5f64.ln()) / -2.0).exp();
        assert!((result.ppl - analytic).abs() < 1e-9);
        assert_eq!(result.token_count, 2);

        let again = response_perplexity(&pair, &mock).unwrap();
        assert_eq!(result.ppl.to_bits(), again.ppl.to_bits());
    }

    #[test]
    fn conditioning_on_the_query_matters() {
        let mock = MockLm::builtin();
        let a = TextPair::new("a", "hello", "world", "t");
        let b = TextPair::new("b", "star", "world", "t");
        let ppl_a = response_perplexity(&a, &mock).unwrap().ppl;
        let ppl_b = response_perplexity(&b, &mock).unwrap().ppl;
        assert_ne!(ppl_a, ppl_b);
        // Unconditioned scoring ignores the query entirely.
        let u_a = response_perplexity_with(&a, &mock, Conditioning::None).unwrap().ppl;
        let u_b = response_perplexity_with(&b, &mock, Conditioning::None).unwrap().ppl;
        assert_eq!(u_a, u_b);
    }

    #[test]
    fn oov_response_token_error_names_it() {
        let mock = MockLm::builtin();
        let pair = TextPair::new("p", "hello", "world xyzzy", "t");
        let err = response_perplexity(&pair, &mock).unwrap_err();
        assert!(err.to_string().contains("xyzzy"), "got: {}", err);
    }

    #[test]
    fn sequence_ppl_equals_geometric_mean_of_inverse_probs() {
        // Brute force over every sequence of length <= 4 on a 3-token
        // vocabulary, comparing two algebraic routes.
        let mock = MockLm::from_unigram(&[("x", 0.5), ("y", 0.25), ("z", 0.25)]);
        let vocab = ["x", "y", "z"];
        let mut checked = 0;
        for len in 1..=4usize {
            let mut stack = vec![Vec::<&str>::new()];
            while let Some(prefix) = stack.pop() {
                if prefix.len() == len {
                    let text = prefix.join(" ");
                    let scored = mock.score_tokens("", &text).unwrap();
                    let ppl = perplexity_of(&scored).unwrap().ppl;
                    let product: f64 = prefix
                        .iter()
                        .map(|t| match *t {
                            "x" => 0.5,
                            _ => 0.25,
                        })
                        .product();
                    let geometric = (1.0 / product).powf(1.0 / len as f64);
                    assert!((ppl - geometric).abs() < 1e-9, "{:?}", prefix);
                    checked += 1;
                } else {
                    for t in vocab {
                        let mut next = prefix.clone();
                        next.push(t);
                        stack.push(next);
                    }
                }
            }
        }
        assert_eq!(checked, 3 + 9 + 27 + 81);
    }

    fn profile_of(pairs: Vec<TextPair>, mock: MockLm) -> DatasetProfile {
        let ds = Dataset::from_pairs("t", pairs).unwrap();
        dataset_perplexity_profile(&ds, Arc::new(mock), Conditioning::QueryTemplate, 4, 20)
            .unwrap()
    }

    #[test]
    fn identical_pairs_have_zero_spread() {
        let pairs = (0..5)
            .map(|i| TextPair::new(format!("p{}", i), "hello", "world", "t"))
            .collect();
        let profile = profile_of(pairs, MockLm::builtin());
        let s = &profile.summary;
        assert_eq!(s.count, 5);
        assert_eq!(s.failures, 0);
        assert_eq!(s.q1, s.median);
        assert_eq!(s.median, s.q3);
        assert_eq!(s.min, s.max);
        assert_eq!(s.histogram.len(), 1);
        assert_eq!(s.histogram[0].count, 5);
    }

    #[test]
    fn mean_and_median_of_two_and_eight() {
        // Uniform-probability responses: ppl = 1/p per token.
        let mock = MockLm::from_unigram(&[("a", 0.5), ("b", 0.25), ("c", 0.125), ("d", 0.125)]);
        let pairs = vec![
            TextPair::new("two", "a", "a a", "t"),    // ppl 2.0
            TextPair::new("eight", "a", "c c", "t"),  // ppl 8.0
        ];
        let profile = profile_of(pairs, mock);
        assert!((profile.summary.mean - 5.0).abs() < 1e-9);
        assert!((profile.summary.median - 5.0).abs() < 1e-9);
    }

    #[test]
    fn per_pair_failures_are_recorded_not_fatal() {
        let pairs = vec![
            TextPair::new("ok", "hello", "world", "t"),
            TextPair::new("bad", "hello", "not in vocab", "t"),
        ];
        let profile = profile_of(pairs, MockLm::builtin());
        assert_eq!(profile.summary.count, 1);
        assert_eq!(profile.summary.failures, 1);
        assert!(profile.rows[1].error.is_some());
        assert_eq!(profile.rows[0].id, "ok");
    }

    #[test]
    fn histogram_covers_every_value() {
        let mock = MockLm::builtin();
        let pairs = (0..40)
            .map(|i| {
                let resp = mock.table().random_walk(i, 5);
                TextPair::new(format!("p{}", i), "hello", resp, "t")
            })
            .collect();
        let profile = profile_of(pairs, MockLm::builtin());
        let total: usize = profile.summary.histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, profile.summary.count);
    }
}
