//! Application configuration: backends, curation parameters, data paths.
//!
//! Precedence is flags > config file > built-in defaults. Secrets never
//! appear in the file; HTTP backends name an environment variable that
//! holds the API key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use curator_core::backend::BackendDescriptor;
use curator_core::engine::CurationConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub scoring: BackendDescriptor,
    pub generation: BackendDescriptor,
    pub judge: BackendDescriptor,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub concurrency: usize,
    pub log_level: Option<String>,
    /// Reference corpus for readability (word/TAG lines); builtin if unset.
    pub corpus: Option<PathBuf>,
    /// Tagger lexicon (word<TAB>TAG lines); builtin if unset.
    pub lexicon: Option<PathBuf>,
    /// Refusal phrase list for evaluation; builtin if unset.
    pub refusal_lexicon: Option<PathBuf>,
    /// Directory for cached judge replies; no caching if unset.
    pub judge_cache: Option<PathBuf>,
    pub backends: BackendsConfig,
    pub curation: CurationConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            concurrency: 8,
            log_level: None,
            corpus: None,
            lexicon: None,
            refusal_lexicon: None,
            judge_cache: None,
            backends: BackendsConfig::default(),
            curation: CurationConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Self::default(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Referenced files must exist at startup, not at first use.
    fn validate(&self) -> Result<()> {
        for (label, path) in [
            ("corpus", &self.corpus),
            ("lexicon", &self.lexicon),
            ("refusal_lexicon", &self.refusal_lexicon),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("{} file {} does not exist", label, path.display());
                }
            }
        }
        for (role, descriptor) in [
            ("scoring", &self.backends.scoring),
            ("generation", &self.backends.generation),
            ("judge", &self.backends.judge),
        ] {
            descriptor
                .validate()
                .with_context(|| format!("{} backend configuration", role))?;
            if let Some(table) = &descriptor.mock_table {
                if !table.exists() {
                    bail!("{} backend mock_table {} does not exist", role, table.display());
                }
            }
        }
        self.curation.validate().context("curation configuration")?;
        Ok(())
    }
}
