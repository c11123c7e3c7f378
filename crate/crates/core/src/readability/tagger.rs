//! Deterministic lexicon + suffix-rule POS tagger.
//!
//! Tags come from the 12-tag universal set. Lookup order per token:
//! all-punctuation, numeric pattern, lexicon (case-insensitive), suffix
//! rules, NOUN fallback. The bundled lexicon
//! (`data/lexicon.tsv`, `word<TAB>TAG` per line) enumerates closed classes
//! and common open-class words with their inflections. Tagging accuracy
//! only needs to be good enough for structural comparison, not parsing.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.tsv");

/// Universal 12-tag set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    Det,
    Noun,
    Verb,
    Adj,
    Adv,
    Pron,
    Adp,
    Conj,
    Num,
    Prt,
    X,
    Punct,
}

impl PosTag {
    pub const ALL: [PosTag; 12] = [
        PosTag::Det,
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Pron,
        PosTag::Adp,
        PosTag::Conj,
        PosTag::Num,
        PosTag::Prt,
        PosTag::X,
        PosTag::Punct,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            PosTag::Det => "DET",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Adp => "ADP",
            PosTag::Conj => "CONJ",
            PosTag::Num => "NUM",
            PosTag::Prt => "PRT",
            PosTag::X => "X",
            PosTag::Punct => "PUNCT",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.symbol() == s)
            .ok_or_else(|| Error::invalid_argument(format!("unknown POS tag {:?}", s)))
    }
}

/// A sentence's tags, one per word token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosTagSeq {
    pub tags: Vec<PosTag>,
    pub source_sentence: String,
}

fn is_punct_char(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2026}' | '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}' | '\u{2013}'
                | '\u{2014}' | '\u{00bf}' | '\u{00a1}' | '\u{00ab}' | '\u{00bb}'
        )
}

/// Whitespace tokenization with leading/trailing punctuation split into
/// their own tokens. Internal punctuation (don't, well-known) stays put.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in sentence.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punct_char(chars[start]) {
            start += 1;
        }
        while end > start && is_punct_char(chars[end - 1]) {
            end -= 1;
        }
        for &c in &chars[..start] {
            tokens.push(c.to_string());
        }
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}

/// Splits on sentence-final punctuation runs (`.`, `?`, `!`), keeping the
/// terminators with their sentence. Whitespace-only fragments are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut in_terminator = false;
    for c in text.chars() {
        let terminator = matches!(c, '.' | '?' | '!');
        if in_terminator && !terminator {
            if !current.trim().is_empty() {
                sentences.push(current.trim().to_string());
            }
            current.clear();
        }
        in_terminator = terminator;
        current.push(c);
    }
    if !current.trim().is_empty() {
        sentences.push(current.trim().to_string());
    }
    sentences
}

const SUFFIX_RULES: &[(&str, usize, PosTag)] = &[
    // (suffix, minimum word length, tag), checked in order.
    ("ly", 4, PosTag::Adv),
    ("ing", 5, PosTag::Verb),
    ("ed", 5, PosTag::Verb),
    ("tion", 6, PosTag::Noun),
    ("sion", 6, PosTag::Noun),
    ("ment", 6, PosTag::Noun),
    ("ness", 6, PosTag::Noun),
    ("ship", 6, PosTag::Noun),
    ("hood", 6, PosTag::Noun),
    ("ance", 6, PosTag::Noun),
    ("ence", 6, PosTag::Noun),
    ("ity", 5, PosTag::Noun),
    ("ize", 5, PosTag::Verb),
    ("ise", 5, PosTag::Verb),
    ("ify", 5, PosTag::Verb),
    ("ous", 5, PosTag::Adj),
    ("ful", 5, PosTag::Adj),
    ("less", 6, PosTag::Adj),
    ("able", 6, PosTag::Adj),
    ("ible", 6, PosTag::Adj),
    ("ive", 5, PosTag::Adj),
    ("est", 5, PosTag::Adj),
    ("ic", 5, PosTag::Adj),
    ("al", 5, PosTag::Adj),
];

pub struct Tagger {
    lexicon: HashMap<String, PosTag>,
}

impl Tagger {
    /// The bundled ~7.5k-word lexicon.
    pub fn builtin() -> Self {
        Self::from_lexicon_str(BUILTIN_LEXICON).expect("builtin lexicon is valid")
    }

    pub fn from_lexicon_str(text: &str) -> Result<Self> {
        let mut lexicon = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((word, tag)) = line.split_once('\t') else {
                return Err(Error::invalid_argument(format!(
                    "lexicon line {}: expected word<TAB>TAG",
                    idx + 1
                )));
            };
            lexicon.insert(word.trim().to_lowercase(), tag.trim().parse()?);
        }
        if lexicon.is_empty() {
            return Err(Error::empty("lexicon"));
        }
        Ok(Self { lexicon })
    }

    pub fn from_lexicon_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lexicon_str(&text)
    }

    pub fn lexicon_size(&self) -> usize {
        self.lexicon.len()
    }

    fn tag_word(&self, word: &str) -> PosTag {
        if word.chars().all(is_punct_char) {
            return PosTag::Punct;
        }
        if looks_numeric(word) {
            return PosTag::Num;
        }
        let lower = word.to_lowercase();
        if let Some(&tag) = self.lexicon.get(&lower) {
            return tag;
        }
        for &(suffix, min_len, tag) in SUFFIX_RULES {
            if lower.len() >= min_len && lower.ends_with(suffix) {
                return tag;
            }
        }
        PosTag::Noun
    }

    /// Tags one sentence. Errors only on empty input.
    pub fn pos_tag(&self, sentence: &str) -> Result<PosTagSeq> {
        if sentence.trim().is_empty() {
            return Err(Error::empty("sentence"));
        }
        let tokens = tokenize(sentence);
        let tags = tokens.iter().map(|t| self.tag_word(t)).collect();
        Ok(PosTagSeq { tags, source_sentence: sentence.to_string() })
    }
}

fn looks_numeric(word: &str) -> bool {
    let digits = word.chars().filter(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return false;
    }
    // Digits possibly mixed with separators or an ordinal suffix.
    word.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-' | '+' | '%'))
        || matches!(
            word.to_lowercase()
                .trim_start_matches(|c: char| c.is_ascii_digit()),
            "st" | "nd" | "rd" | "th"
        )
}
