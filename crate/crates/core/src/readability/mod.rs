//! Readability scoring: how closely a sentence's POS-tag sequence
//! resembles the structures in a reference corpus.
//!
//! A sentence S is tagged, then matched against every corpus sentence x by
//! longest common subsequence over the tag sequences; the score is
//! `max_x lct(T_S, T_x) / |T_S|`, in [0, 1]. Multi-sentence inputs are
//! split on sentence-final punctuation and score the mean of the
//! per-sentence values. The corpus scan prunes sentences whose LCS upper
//! bound `min(|T_x| , |T_S|)` cannot beat the best match so far and stops
//! at a perfect match; both are exact-result optimizations, and the
//! unpruned scan stays available for cross-checking.

mod tagger;

pub use tagger::{split_sentences, tokenize, PosTag, PosTagSeq, Tagger};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

const BUILTIN_CORPUS: &str = include_str!("../../data/reference_corpus.txt");

/// Length of the longest common subsequence of two tag sequences; the
/// classic O(|a|*|b|) dynamic program with a rolling row.
pub fn lct(a: &[PosTag], b: &[PosTag]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0u32; b.len() + 1];
    let mut current = vec![0u32; b.len() + 1];
    for &tag_a in a {
        for (j, &tag_b) in b.iter().enumerate() {
            current[j + 1] = if tag_a == tag_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()] as usize
}

/// A tagged reference sentence.
#[derive(Debug, Clone)]
pub struct CorpusSentence {
    pub tags: Vec<PosTag>,
    pub text: String,
}

/// The reference corpus: one sentence per line, `word/TAG` tokens. The
/// bundled corpus has 200 sentences; a full-scale corpus (tens of
/// thousands of sentences) loads from the same format.
#[derive(Debug, Clone)]
pub struct ReferenceCorpus {
    pub name: String,
    pub tagset: String,
    sentences: Vec<CorpusSentence>,
}

impl ReferenceCorpus {
    pub fn from_tagged_str(name: &str, text: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tags = Vec::new();
            let mut words = Vec::new();
            for token in line.split_whitespace() {
                let Some((word, tag)) = token.rsplit_once('/') else {
                    return Err(Error::invalid_argument(format!(
                        "corpus line {}: token {:?} is not word/TAG",
                        idx + 1,
                        token
                    )));
                };
                tags.push(tag.parse().map_err(|e| {
                    Error::invalid_argument(format!("corpus line {}: {}", idx + 1, e))
                })?);
                words.push(word);
            }
            if !tags.is_empty() {
                sentences.push(CorpusSentence { tags, text: words.join(" ") });
            }
        }
        if sentences.is_empty() {
            return Err(Error::empty("reference corpus"));
        }
        Ok(Self {
            name: name.to_string(),
            tagset: "universal-12".to_string(),
            sentences,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Self::from_tagged_str(&name, &text)
    }

    /// The bundled 200-sentence corpus.
    pub fn builtin() -> Self {
        Self::from_tagged_str("builtin-200", BUILTIN_CORPUS).expect("builtin corpus is valid")
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[CorpusSentence] {
        &self.sentences
    }
}

/// Best corpus match for one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SentenceScore {
    pub value: f64,
    pub best_match_index: usize,
    pub lct_length: usize,
    pub tag_count: usize,
}

/// Readability of a whole text: the mean of its per-sentence scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadabilityScore {
    pub value: f64,
    pub sentences: Vec<SentenceScore>,
}

pub struct ReadabilityScorer {
    tagger: Tagger,
    corpus: ReferenceCorpus,
    pruning: bool,
}

impl ReadabilityScorer {
    pub fn new(tagger: Tagger, corpus: ReferenceCorpus) -> Self {
        Self { tagger, corpus, pruning: true }
    }

    /// Bundled tagger and corpus.
    pub fn builtin() -> Self {
        Self::new(Tagger::builtin(), ReferenceCorpus::builtin())
    }

    pub fn with_pruning(mut self, pruning: bool) -> Self {
        self.pruning = pruning;
        self
    }

    pub fn corpus(&self) -> &ReferenceCorpus {
        &self.corpus
    }

    pub fn tagger(&self) -> &Tagger {
        &self.tagger
    }

    fn score_tags(&self, tags: &[PosTag]) -> SentenceScore {
        let n = tags.len();
        let mut best_lct = 0usize;
        let mut best_index = 0usize;
        for (i, sentence) in self.corpus.sentences.iter().enumerate() {
            if self.pruning {
                // LCS cannot exceed the shorter length; skip sentences that
                // cannot improve on the best match, and stop once perfect.
                if sentence.tags.len().min(n) <= best_lct {
                    continue;
                }
            }
            let l = lct(tags, &sentence.tags);
            if l > best_lct {
                best_lct = l;
                best_index = i;
                if self.pruning && best_lct == n {
                    break;
                }
            }
        }
        SentenceScore {
            value: best_lct as f64 / n as f64,
            best_match_index: best_index,
            lct_length: best_lct,
            tag_count: n,
        }
    }

    /// Readability of `text`: multi-sentence inputs are split and averaged.
    pub fn estimate(&self, text: &str) -> Result<ReadabilityScore> {
        if self.corpus.is_empty() {
            return Err(Error::empty("reference corpus"));
        }
        let sentences = split_sentences(text);
        if sentences.is_empty() {
            return Err(Error::empty("sentence"));
        }
        let mut scores = Vec::with_capacity(sentences.len());
        for sentence in &sentences {
            let seq = self.tagger.pos_tag(sentence)?;
            scores.push(self.score_tags(&seq.tags));
        }
        let value = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
        Ok(ReadabilityScore { value, sentences: scores })
    }
}
