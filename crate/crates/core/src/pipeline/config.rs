//! Flat `key = value` pipeline configuration with `[section]` headers.
//!
//! ```text
//! [corpus]
//! path = corpus.jsonl
//! split_seed = 7
//!
//! [detect]
//! mock_seed = 42        # or: path = detections.jsonl
//! ```
//!
//! Keys are addressed as `section.key`. Relative paths resolve against the
//! directory of the config file. Command-line overrides use the same
//! `section.key` names.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::corpus::Split;
use crate::generate::{RemoteConfig, DEFAULT_MAX_NEW_TOKENS};
use crate::prompt::PromptOptions;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("config key {0:?} is required")]
    Missing(String),
    #[error("exactly one of detect.path and detect.mock_seed must be set")]
    DetectionSource,
    #[error("{key}: path {path:?} does not exist")]
    MissingPath { key: String, path: PathBuf },
    #[error("reading config {path:?}: {detail}")]
    Io { path: PathBuf, detail: String },
}

const KEYS: &[&str] = &[
    "corpus.path",
    "corpus.split_seed",
    "detect.path",
    "detect.mock_seed",
    "filter.rules",
    "prompt.probability_decimals",
    "prompt.include_bbox",
    "prompt.threshold",
    "prompt.terminator",
    "generate.backend",
    "generate.endpoint",
    "generate.max_new_tokens",
    "generate.timeout_secs",
    "generate.retries",
    "generate.concurrency",
    "evaluate.beta",
    "evaluate.baselines",
    "evaluate.split",
    "output.dir",
    "run.strict",
];

/// Parsed but unvalidated `section.key -> value` entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let syntax = |detail: &str| ConfigError::Syntax {
                line: line_no,
                detail: detail.to_owned(),
            };
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| syntax("unclosed section header"))?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(syntax("bad section name"));
                }
                section = name.to_ascii_lowercase();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let key = key.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(syntax("empty key"));
            }
            let full = if section.is_empty() || key.contains('.') {
                key
            } else {
                format!("{section}.{key}")
            };
            if !KEYS.contains(&full.as_str()) {
                return Err(ConfigError::UnknownKey(full));
            }
            if entries.insert(full.clone(), value.trim().to_owned()).is_some() {
                return Err(syntax(&format!("duplicate key {full:?}")));
            }
        }
        Ok(Self {
            entries,
            base_dir: PathBuf::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
        let mut raw = Self::parse(&text)?;
        raw.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(raw)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    /// Sets or replaces a key; an empty value removes it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().to_ascii_lowercase();
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        if value.trim().is_empty() {
            self.entries.remove(&key);
        } else {
            self.entries.insert(key, value.trim().to_owned());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                    key: key.to_owned(),
                    detail: format!("{v:?}: {e}"),
                })
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base_dir.join(v))
    }
}

/// Only strips `#` comments that start a line or follow whitespace, so
/// values such as `TL;DR` and regex-free strings survive.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectionSource {
    Ingest(PathBuf),
    Mock { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Template,
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSource {
    None,
    Bundled,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    pub split_seed: u64,
    pub detection_source: DetectionSource,
    /// `None` selects the built-in rules.
    pub rules_path: Option<PathBuf>,
    pub prompt: PromptOptions,
    pub backend: BackendConfig,
    pub max_new_tokens: usize,
    pub beta: f64,
    pub baselines: BaselineSource,
    /// Restrict evaluation to one split; `None` evaluates every study.
    pub eval_split: Option<Split>,
    pub output_dir: PathBuf,
    pub strict: bool,
    raw: RawConfig,
}

impl PipelineConfig {
    /// Builds and validates a pipeline configuration.
    pub fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let corpus_path = raw
            .path("corpus.path")
            .ok_or_else(|| ConfigError::Missing("corpus.path".into()))?;
        let split_seed = raw.value("corpus.split_seed")?.unwrap_or(0);

        let detection_source = match (raw.path("detect.path"), raw.value::<u64>("detect.mock_seed")?) {
            (Some(p), None) => DetectionSource::Ingest(p),
            (None, Some(seed)) => DetectionSource::Mock { seed },
            _ => return Err(ConfigError::DetectionSource),
        };

        let rules_path = match raw.get("filter.rules") {
            None | Some("builtin") => None,
            Some(_) => raw.path("filter.rules"),
        };

        let defaults = PromptOptions::default();
        let prompt = PromptOptions {
            probability_decimals: raw
                .value("prompt.probability_decimals")?
                .unwrap_or(defaults.probability_decimals),
            include_bbox: raw.value("prompt.include_bbox")?.unwrap_or(defaults.include_bbox),
            threshold: raw.value("prompt.threshold")?.unwrap_or(defaults.threshold),
            terminator: raw.get("prompt.terminator").map_or(defaults.terminator, str::to_owned),
        };
        prompt.validate().map_err(|e| ConfigError::InvalidValue {
            key: "prompt".into(),
            detail: e.to_string(),
        })?;

        let backend = match raw.get("generate.backend").unwrap_or("template") {
            "template" => BackendConfig::Template,
            "remote" => {
                let endpoint = raw
                    .get("generate.endpoint")
                    .ok_or_else(|| ConfigError::Missing("generate.endpoint".into()))?;
                let mut remote = RemoteConfig::new(endpoint);
                if let Some(secs) = raw.value::<f64>("generate.timeout_secs")? {
                    if secs.is_nan() || secs <= 0.0 {
                        return Err(invalid("generate.timeout_secs", "must be positive"));
                    }
                    remote.timeout =
                        Duration::try_from_secs_f64(secs).map_err(|_| invalid("generate.timeout_secs", "too large"))?;
                }
                remote.retries = raw.value("generate.retries")?.unwrap_or(remote.retries);
                remote.concurrency = raw.value("generate.concurrency")?.unwrap_or(remote.concurrency);
                if remote.concurrency == 0 {
                    return Err(invalid("generate.concurrency", "must be at least 1"));
                }
                BackendConfig::Remote(remote)
            }
            other => return Err(invalid("generate.backend", &format!("unknown backend {other:?}"))),
        };
        let max_new_tokens = raw.value("generate.max_new_tokens")?.unwrap_or(DEFAULT_MAX_NEW_TOKENS);
        if max_new_tokens == 0 {
            return Err(invalid("generate.max_new_tokens", "must be at least 1"));
        }

        let beta: f64 = raw.value("evaluate.beta")?.unwrap_or(1.0);
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("evaluate.beta", "must be positive"));
        }
        let baselines = match raw.get("evaluate.baselines") {
            None | Some("none") => BaselineSource::None,
            Some("builtin") => BaselineSource::Bundled,
            Some(_) => BaselineSource::File(raw.path("evaluate.baselines").expect("key present")),
        };
        let eval_split = match raw.get("evaluate.split") {
            None | Some("all") => None,
            Some(s) => Some(s.parse().map_err(|e: String| invalid("evaluate.split", &e))?),
        };

        let output_dir = raw
            .path("output.dir")
            .ok_or_else(|| ConfigError::Missing("output.dir".into()))?;
        let strict = raw.value("run.strict")?.unwrap_or(false);

        let config = Self {
            corpus_path,
            split_seed,
            detection_source,
            rules_path,
            prompt,
            backend,
            max_new_tokens,
            beta,
            baselines,
            eval_split,
            output_dir,
            strict,
            raw,
        };
        config.check_paths()?;
        Ok(config)
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let mut paths = vec![("corpus.path", &self.corpus_path)];
        if let DetectionSource::Ingest(p) = &self.detection_source {
            paths.push(("detect.path", p));
        }
        if let Some(p) = &self.rules_path {
            paths.push(("filter.rules", p));
        }
        if let BaselineSource::File(p) = &self.baselines {
            paths.push(("evaluate.baselines", p));
        }
        for (key, path) in paths {
            if !path.exists() {
                return Err(ConfigError::MissingPath {
                    key: key.into(),
                    path: path.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_raw(RawConfig::load(path)?)
    }

    /// Raw key/value entries as given (after overrides).
    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        self.raw.entries()
    }
}

fn invalid(key: &str, detail: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_owned(),
        detail: detail.to_owned(),
    }
}
