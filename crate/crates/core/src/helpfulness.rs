//! Judge-scored helpfulness: relevance, clarity, comprehensiveness, and
//! usefulness of knowledge, each 0-5, averaged into one score.
//!
//! Each principle has its own rubric (shipped as a data file and embedded
//! here) rendered into a grading prompt around the query and response. The
//! judge's reply is parsed for the first standalone integer inside the
//! scale; one retry appends an instruction to answer with only the
//! integer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::LmBackend;
use crate::dataset::TextPair;
use crate::error::{Error, Result};

pub const RUBRIC_RELEVANCE: &str = include_str!("../data/rubric_relevance.txt");
pub const RUBRIC_CLARITY: &str = include_str!("../data/rubric_clarity.txt");
pub const RUBRIC_COMPREHENSIVENESS: &str = include_str!("../data/rubric_comprehensiveness.txt");
pub const RUBRIC_KNOWLEDGE: &str = include_str!("../data/rubric_knowledge.txt");

const DEFAULT_PREAMBLE: &str = "You are grading a response to a query. Apply the rubric below \
                                and reply with a single integer score.";
const RETRY_SUFFIX: &str = "Reply with only the integer.";

/// The four grading principles, in scoring order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Principle {
    Relevance,
    Clarity,
    Comprehensiveness,
    Knowledge,
}

impl Principle {
    pub const ALL: [Principle; 4] = [
        Principle::Relevance,
        Principle::Clarity,
        Principle::Comprehensiveness,
        Principle::Knowledge,
    ];

    pub fn rubric(self) -> &'static str {
        match self {
            Principle::Relevance => RUBRIC_RELEVANCE,
            Principle::Clarity => RUBRIC_CLARITY,
            Principle::Comprehensiveness => RUBRIC_COMPREHENSIVENESS,
            Principle::Knowledge => RUBRIC_KNOWLEDGE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Principle::Relevance => "relevance",
            Principle::Clarity => "clarity",
            Principle::Comprehensiveness => "comprehensiveness",
            Principle::Knowledge => "knowledge",
        }
    }
}

impl fmt::Display for Principle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Principle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Principle::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid_argument(format!("unknown principle {:?}", s)))
    }
}

/// Per-principle scores plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HelpfulnessScore {
    pub per_principle: BTreeMap<Principle, u8>,
    pub overall: f64,
}

/// Finds the first standalone integer within `[lo, hi]` in a reply.
/// Integers outside the range are skipped, never returned.
pub fn parse_score(reply: &str, lo: i32, hi: i32) -> Result<i32> {
    // \b keeps "42" in "x42" out; multi-digit numbers parse whole.
    let re = regex::Regex::new(r"\b\d{1,3}\b").unwrap();
    for m in re.find_iter(reply) {
        if let Ok(value) = m.as_str().parse::<i32>() {
            if (lo..=hi).contains(&value) {
                return Ok(value);
            }
        }
    }
    Err(Error::ScoreParse { reply: reply.to_string(), lo, hi })
}

/// On-disk reply cache keyed by a content hash of (model, prompt), for
/// cost control on repeated judging. Off by default.
pub struct JudgeCache {
    dir: std::path::PathBuf,
}

impl JudgeCache {
    pub fn new(dir: impl Into<std::path::PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, model: &str, prompt: &str) -> std::path::PathBuf {
        let mut keyed = model.as_bytes().to_vec();
        keyed.push(0);
        keyed.extend_from_slice(prompt.as_bytes());
        self.dir.join(format!("{:016x}.reply", crate::rng::fnv1a64(&keyed)))
    }

    fn get(&self, model: &str, prompt: &str) -> Option<String> {
        std::fs::read_to_string(self.path(model, prompt)).ok()
    }

    fn put(&self, model: &str, prompt: &str, reply: &str) {
        // Best effort; a failed cache write must not fail the scoring.
        let _ = std::fs::write(self.path(model, prompt), reply);
    }
}

/// Renders prompts and drives the judge backend. The preamble wrapping the
/// rubric is configurable; the rubric bodies are fixed data files.
pub struct HelpfulnessJudge {
    preamble: String,
    cache: Option<JudgeCache>,
}

impl Default for HelpfulnessJudge {
    fn default() -> Self {
        Self { preamble: DEFAULT_PREAMBLE.to_string(), cache: None }
    }
}

impl HelpfulnessJudge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_preamble(mut self, preamble: impl Into<String>) -> Self {
        self.preamble = preamble.into();
        self
    }

    pub fn with_cache(mut self, cache: JudgeCache) -> Self {
        self.cache = Some(cache);
        self
    }

    fn judge_call(&self, backend: &dyn LmBackend, prompt: &str) -> Result<String> {
        if let Some(cache) = &self.cache {
            if let Some(reply) = cache.get(backend.model_name(), prompt) {
                return Ok(reply);
            }
        }
        let reply = backend.judge(prompt)?;
        if let Some(cache) = &self.cache {
            cache.put(backend.model_name(), prompt, &reply);
        }
        Ok(reply)
    }

    /// The full grading prompt for one principle.
    pub fn render_prompt(&self, pair: &TextPair, principle: Principle) -> String {
        format!(
            "{}\n\n{}\nQuery: {}\nResponse: {}",
            self.preamble,
            principle.rubric(),
            pair.query,
            pair.response
        )
    }

    /// Scores one principle: render, judge, parse; one retry with an
    /// explicit "integer only" instruction before giving up.
    pub fn score_principle(
        &self,
        pair: &TextPair,
        principle: Principle,
        backend: &dyn LmBackend,
    ) -> Result<u8> {
        let prompt = self.render_prompt(pair, principle);
        let reply = self.judge_call(backend, &prompt)?;
        match parse_score(&reply, 0, 5) {
            Ok(score) => Ok(score as u8),
            Err(_) => {
                let retry_prompt = format!("{}\n{}", prompt, RETRY_SUFFIX);
                let retry = self.judge_call(backend, &retry_prompt)?;
                parse_score(&retry, 0, 5).map(|s| s as u8)
            }
        }
    }

    /// All four principles in order, averaged. Any principle failure fails
    /// the whole score; there are no partial averages.
    pub fn score_helpfulness(
        &self,
        pair: &TextPair,
        backend: &dyn LmBackend,
    ) -> Result<HelpfulnessScore> {
        let mut per_principle = BTreeMap::new();
        for principle in Principle::ALL {
            per_principle.insert(principle, self.score_principle(pair, principle, backend)?);
        }
        let overall =
            per_principle.values().map(|&v| v as f64).sum::<f64>() / Principle::ALL.len() as f64;
        Ok(HelpfulnessScore { per_principle, overall })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockLm, SamplingConfig, TokenLogProb};
    use crate::rng::fnv1a64;
    use std::sync::Mutex;

    /// Judge that replays a scripted list of replies.
    struct ScriptedJudge {
        replies: Mutex<Vec<String>>,
    }

    impl ScriptedJudge {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
            }
        }
    }

    impl LmBackend for ScriptedJudge {
        fn score_tokens(&self, _: &str, _: &str) -> crate::Result<Vec<TokenLogProb>> {
            unimplemented!("judge only")
        }
        fn generate(&self, _: &str, _: &SamplingConfig) -> crate::Result<String> {
            unimplemented!("judge only")
        }
        fn judge(&self, _prompt: &str) -> crate::Result<String> {
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| Error::backend("script exhausted"))
        }
        fn model_name(&self) -> &str {
            "scripted"
        }
    }

    fn pair() -> TextPair {
        TextPair::new("p", "How do magnets work?", "Fields from aligned spins.", "t")
    }

    #[test]
    fn parses_bare_digit_and_decorated_scores() {
        assert_eq!(parse_score("3", 0, 5).unwrap(), 3);
        assert_eq!(parse_score("Score: 4 \u{2014} the text is highly relevant", 0, 5).unwrap(), 4);
        assert_eq!(parse_score("Rating: 5 (detailed harmful instructions)", 1, 5).unwrap(), 5);
        // Out-of-range integers are skipped, not returned.
        assert_eq!(parse_score("8 out of 10, call it 4", 0, 5).unwrap(), 4);
        assert!(parse_score("great response!", 0, 5).is_err());
        assert!(parse_score("0", 1, 5).is_err());
        assert!(parse_score("42", 0, 5).is_err());
    }

    #[test]
    fn unparsable_reply_retries_once_then_carries_the_reply() {
        let judge = ScriptedJudge::new(&["no score here", "score is 2"]);
        let score = HelpfulnessJudge::new().score_principle(&pair(), Principle::Clarity, &judge);
        assert_eq!(score.unwrap(), 2);

        let judge = ScriptedJudge::new(&["great response!", "great response!"]);
        let err = HelpfulnessJudge::new()
            .score_principle(&pair(), Principle::Clarity, &judge)
            .unwrap_err();
        assert!(err.to_string().contains("great response!"), "got: {}", err);
    }

    #[test]
    fn four_equal_scores_average_to_themselves() {
        let judge = ScriptedJudge::new(&["4", "4", "4", "4"]);
        let score = HelpfulnessJudge::new().score_helpfulness(&pair(), &judge).unwrap();
        assert_eq!(score.overall, 4.0);
        assert_eq!(score.per_principle.len(), 4);
    }

    #[test]
    fn mixed_scores_average_exactly() {
        // Ordered relevance, clarity, comprehensiveness, knowledge.
        let judge = ScriptedJudge::new(&["5", "3", "2", "4"]);
        let score = HelpfulnessJudge::new().score_helpfulness(&pair(), &judge).unwrap();
        assert_eq!(score.overall, 3.5);
        assert_eq!(score.per_principle[&Principle::Relevance], 5);
        assert_eq!(score.per_principle[&Principle::Clarity], 3);
        assert_eq!(score.per_principle[&Principle::Comprehensiveness], 2);
        assert_eq!(score.per_principle[&Principle::Knowledge], 4);
        let sum: u8 = score.per_principle.values().sum();
        assert_eq!(score.overall, sum as f64 / 4.0);
    }

    #[test]
    fn principle_failure_fails_the_whole_score() {
        let judge = ScriptedJudge::new(&["5", "nope", "still nope"]);
        assert!(HelpfulnessJudge::new().score_helpfulness(&pair(), &judge).is_err());
    }

    #[test]
    fn mock_judge_scores_are_the_documented_hash_digits() {
        let mock = MockLm::builtin();
        let helper = HelpfulnessJudge::new();
        let p = pair();
        let expected: Vec<u8> = Principle::ALL
            .iter()
            .map(|&pr| (fnv1a64(helper.render_prompt(&p, pr).as_bytes()) % 6) as u8)
            .collect();
        let score = helper.score_helpfulness(&p, &mock).unwrap();
        let got: Vec<u8> = Principle::ALL.iter().map(|pr| score.per_principle[pr]).collect();
        assert_eq!(got, expected);
        // Pure function of the pair: scoring twice is identical.
        let again = helper.score_helpfulness(&p, &mock).unwrap();
        assert_eq!(score, again);
    }

    #[test]
    fn cache_short_circuits_repeat_judging() {
        let dir = tempfile::tempdir().unwrap();
        let cache = JudgeCache::new(dir.path().join("cache")).unwrap();
        let helper = HelpfulnessJudge::new().with_cache(cache);
        let p = pair();

        // Enough replies for one full pass; a second pass would exhaust
        // the script unless every reply comes from the cache.
        let judge = ScriptedJudge::new(&["4", "3", "2", "1"]);
        let first = helper.score_helpfulness(&p, &judge).unwrap();
        let second = helper.score_helpfulness(&p, &judge).unwrap();
        assert_eq!(first, second);

        // A different pair misses the cache and needs the backend again.
        let other = TextPair::new("q", "Different question?", "Different answer.", "t");
        assert!(helper.score_helpfulness(&other, &judge).is_err());
    }

    #[test]
    fn rubric_texts_carry_their_scale_anchors() {
        assert!(RUBRIC_RELEVANCE.starts_with("Scoring Relevance (0-5)"));
        assert!(RUBRIC_RELEVANCE.contains("0 (Not relevant at all)"));
        assert!(RUBRIC_CLARITY.contains("5 (Extremely clear)"));
        assert!(RUBRIC_COMPREHENSIVENESS.contains("(Moderately comprehensive)"));
        assert!(RUBRIC_KNOWLEDGE.contains("Usefulness of Knowledge"));
        for principle in Principle::ALL {
            assert!(!principle.rubric().is_empty());
        }
    }

    proptest::proptest! {
        // Any reply containing exactly one in-range integer parses to it.
        #[test]
        fn parser_returns_the_single_in_range_integer(
            score in 0i32..=5,
            prefix in "[a-zA-Z ,.:]{0,20}",
            suffix in "[a-zA-Z ,.:]{0,20}",
        ) {
            let reply = format!("{} {} {}", prefix, score, suffix);
            proptest::prop_assert_eq!(parse_score(&reply, 0, 5).unwrap(), score);
        }
    }
}
