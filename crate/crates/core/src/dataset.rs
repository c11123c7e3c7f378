//! (query, response) records, JSONL persistence, seeded sampling, mixing.
//!
//! The canonical on-disk form is JSONL, UTF-8, one record per line with keys
//! emitted in the fixed order `id, query, response, source, meta`. Files end
//! with a single trailing newline; loaders accept its absence. Unknown
//! top-level fields are folded into `meta` on load, so foreign files survive
//! a round trip with their extra data intact (as strings).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, shuffle};

/// One (query, response) pair; the unit of curation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub id: String,
    pub query: String,
    pub response: String,
    pub source: String,
    /// Open key/value annotations: round counts, score snapshots, fields
    /// carried over from foreign files. Sorted map so serialization is
    /// deterministic.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl TextPair {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        response: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            response: response.into(),
            source: source.into(),
            meta: BTreeMap::new(),
        }
    }
}

/// An ordered collection of pairs. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pairs: Vec<TextPair>,
}

impl Dataset {
    /// Builds a dataset, enforcing the record invariants: ids non-empty and
    /// unique, query/response non-empty after trimming.
    pub fn from_pairs(name: impl Into<String>, pairs: Vec<TextPair>) -> Result<Self> {
        validate_pairs(&pairs)?;
        Ok(Self { name: name.into(), pairs })
    }

    pub fn pairs(&self) -> &[TextPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<TextPair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TextPair> {
        self.pairs.iter()
    }
}

fn validate_pairs(pairs: &[TextPair]) -> Result<()> {
    let mut seen: HashSet<&str> = HashSet::with_capacity(pairs.len());
    let mut duplicates: Vec<&str> = Vec::new();
    let mut empties: Vec<&str> = Vec::new();
    for pair in pairs {
        if pair.id.is_empty() {
            return Err(Error::invalid_dataset("record with empty id"));
        }
        if !seen.insert(&pair.id) && !duplicates.contains(&pair.id.as_str()) {
            duplicates.push(&pair.id);
        }
        if pair.query.trim().is_empty() || pair.response.trim().is_empty() {
            empties.push(&pair.id);
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::invalid_dataset(format!(
            "duplicate ids: {}",
            duplicates.join(", ")
        )));
    }
    if !empties.is_empty() {
        return Err(Error::invalid_dataset(format!(
            "empty query or response in records: {}",
            empties.join(", ")
        )));
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Loads a JSONL dataset, preserving line order. Records missing `id` get a
/// synthesized `"<filename>:<line-number>"` id; missing `source` defaults to
/// the file stem; unknown fields are folded into `meta`.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = file_stem(path);
    let fname = file_name(path);

    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let malformed = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| malformed(format!("invalid JSON: {}", e)))?;
        let serde_json::Value::Object(map) = value else {
            return Err(malformed("record is not a JSON object".to_string()));
        };

        let mut id = None;
        let mut query = None;
        let mut response = None;
        let mut source = None;
        let mut meta = BTreeMap::new();
        for (key, val) in map {
            match key.as_str() {
                "id" | "query" | "response" | "source" => {
                    let serde_json::Value::String(s) = val else {
                        return Err(malformed(format!("field `{}` is not a string", key)));
                    };
                    match key.as_str() {
                        "id" => id = Some(s),
                        "query" => query = Some(s),
                        "response" => response = Some(s),
                        _ => source = Some(s),
                    }
                }
                "meta" => {
                    let serde_json::Value::Object(obj) = val else {
                        return Err(malformed("field `meta` is not an object".to_string()));
                    };
                    for (mk, mv) in obj {
                        meta.insert(mk, json_to_meta_string(mv));
                    }
                }
                // Unknown fields survive the trip through `meta`.
                other => {
                    meta.insert(other.to_string(), json_to_meta_string(val));
                }
            }
        }

        let query = query.ok_or_else(|| malformed("missing field `query`".to_string()))?;
        let response =
            response.ok_or_else(|| malformed("missing field `response`".to_string()))?;
        pairs.push(TextPair {
            id: id.unwrap_or_else(|| format!("{}:{}", fname, lineno)),
            query,
            response,
            source: source.unwrap_or_else(|| stem.clone()),
            meta,
        });
    }

    Dataset::from_pairs(stem, pairs)
}

fn json_to_meta_string(value: serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Serializes one record in the canonical key order.
fn record_to_line(pair: &TextPair) -> String {
    // Struct field order drives the key order in the output.
    serde_json::to_string(pair).expect("record serialization cannot fail")
}

/// Writes the dataset as canonical JSONL with a single trailing newline.
pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for pair in ds.pairs() {
        out.push_str(&record_to_line(pair));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// How much of a dataset to select.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSize {
    /// In (0, 1]; the selection size is `ceil(fraction * len)` so small
    /// datasets never round down to an empty selection.
    Fraction(f64),
    Count(usize),
}

impl SampleSize {
    fn resolve(self, len: usize) -> Result<usize> {
        match self {
            SampleSize::Fraction(f) => {
                if f.is_nan() || f <= 0.0 || f > 1.0 {
                    return Err(Error::invalid_argument(format!(
                        "fraction {} outside (0, 1]",
                        f
                    )));
                }
                Ok(((f * len as f64).ceil() as usize).min(len))
            }
            SampleSize::Count(n) => {
                if n == 0 {
                    return Err(Error::invalid_argument("count must be at least 1"));
                }
                if n > len {
                    return Err(Error::invalid_argument(format!(
                        "count {} exceeds dataset size {}",
                        n, len
                    )));
                }
                Ok(n)
            }
        }
    }
}

/// Selects pairs without replacement via a seeded Fisher-Yates shuffle of
/// the index range, keeping the selection in original relative order. A pure
/// function of `(ds, size, seed)`.
pub fn sample_pairs(ds: &Dataset, size: SampleSize, seed: u64) -> Result<Dataset> {
    let m = size.resolve(ds.len())?;
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    shuffle(&mut indices, seed);
    let mut selected: Vec<usize> = indices.into_iter().take(m).collect();
    selected.sort_unstable();
    let pairs = selected.iter().map(|&i| ds.pairs[i].clone()).collect();
    Dataset::from_pairs(ds.name.clone(), pairs)
}

/// One input to a mix: a file, how much of it to take, and the source label
/// stamped onto the selected pairs. `exclude_ids_from` optionally drops
/// pairs whose id appears in another file before sampling, which is how a
/// curated subset replaces (rather than augments) its originals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixComponent {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_ids_from: Option<PathBuf>,
}

impl MixComponent {
    pub fn size(&self) -> Result<SampleSize> {
        match (self.fraction, self.count) {
            (Some(f), None) => Ok(SampleSize::Fraction(f)),
            (None, Some(n)) => Ok(SampleSize::Count(n)),
            _ => Err(Error::invalid_argument(format!(
                "component {:?} must set exactly one of `fraction` or `count`",
                self.path
            ))),
        }
    }
}

/// A full mix recipe; serializable so it can live in a spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    pub components: Vec<MixComponent>,
    pub seed: u64,
}

/// Loads, samples, and labels every component, then applies one seeded
/// shuffle to the concatenation. Component `i` samples with the sub-seed
/// `derive_seed(spec.seed, &[i])`; the final shuffle uses `spec.seed`
/// itself. Ids colliding across components are prefixed with their source
/// label.
pub fn mix_datasets(spec: &MixSpec) -> Result<Dataset> {
    if spec.components.is_empty() {
        return Err(Error::invalid_argument("mix spec has no components"));
    }
    let mut combined: Vec<TextPair> = Vec::new();
    for (i, component) in spec.components.iter().enumerate() {
        let ds = load_jsonl(&component.path)?;
        let ds = match &component.exclude_ids_from {
            Some(path) => {
                let excluded: HashSet<String> =
                    load_jsonl(path)?.into_pairs().into_iter().map(|p| p.id).collect();
                let kept: Vec<TextPair> = ds
                    .into_pairs()
                    .into_iter()
                    .filter(|p| !excluded.contains(&p.id))
                    .collect();
                Dataset::from_pairs(component.label.clone(), kept)?
            }
            None => ds,
        };
        let sampled = sample_pairs(&ds, component.size()?, derive_seed(spec.seed, &[i as u64]))?;
        for mut pair in sampled.into_pairs() {
            pair.source = component.label.clone();
            combined.push(pair);
        }
    }

    // Prefix the source label onto every id that appears more than once.
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for pair in &combined {
        *counts.entry(pair.id.as_str()).or_default() += 1;
    }
    let colliding: HashSet<String> = counts
        .into_iter()
        .filter(|&(_, n)| n > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    for pair in &mut combined {
        if colliding.contains(&pair.id) {
            pair.id = format!("{}:{}", pair.source, pair.id);
        }
    }

    shuffle(&mut combined, spec.seed);
    Dataset::from_pairs("mix", combined)
}

/// Per-source record counts, for mix reporting.
pub fn source_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for pair in ds.pairs() {
        *counts.entry(pair.source.clone()).or_insert(0) += 1;
    }
    counts
}
