//! End-to-end pipeline: corpus → split → parse → filter → detections →
//! prompts → generation → evaluation.
//!
//! Each stage is a plain function over in-memory records so the CLI
//! subcommands and [`run_pipeline`] share one implementation. A run writes
//! every stage output plus `manifest.json` into the output directory.

mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, parse_report, split_corpus, ParsedReportRecord, SectionName, Split, StudyRecord};
use crate::detect::{self, ingest_detections, mock_detect, DetectionSet};
use crate::filter::{filter_findings, load_rules, FilterRuleSet, FilteredFindingsRecord};
use crate::generate::{
    generate_batch, GeneratedFindings, GenerationBackend, GenerationRequest, RemoteBackend, TemplateBackend,
};
use crate::prompt::{build_prompt, render_training_pair, Prompt, PromptOptions, PromptRecord};
use crate::records;
use crate::rouge::{
    evaluate_corpus, parse_baselines, render_comparison, ComparisonRow, CorpusScore, EvalPair, ScoreRecord,
    BUNDLED_BASELINES,
};

pub use config::{BackendConfig, BaselineSource, ConfigError, DetectionSource, PipelineConfig, RawConfig};

pub const TOOL_NAME: &str = "radfind";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Corpus,
    Split,
    Parse,
    Filter,
    Detect,
    Prompt,
    Generate,
    Evaluate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::Split => "split",
            Stage::Parse => "parse",
            Stage::Filter => "filter",
            Stage::Detect => "detect",
            Stage::Prompt => "prompt",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

/// Error classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    Validation,
    Runtime,
    Backend,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 1,
            ErrorClass::Runtime => 2,
            ErrorClass::Backend => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed{}: {message}", .record.as_ref().map(|r| format!(" at {r}")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub class: ErrorClass,
    pub message: String,
    /// Study id or line that triggered the failure, when known.
    pub record: Option<String>,
}

impl PipelineError {
    pub fn new(stage: Stage, class: ErrorClass, message: impl fmt::Display) -> Self {
        Self {
            stage,
            class,
            message: message.to_string(),
            record: None,
        }
    }

    fn at(mut self, record: impl Into<String>) -> Self {
        self.record = Some(record.into());
        self
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::new(Stage::Config, ErrorClass::Validation, e)
    }
}

/// A single record that failed a stage without aborting the batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIssue {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

impl RecordIssue {
    fn into_error(self) -> PipelineError {
        let record = self.study_id.clone().or_else(|| self.line.map(|l| format!("line {l}")));
        let mut err = PipelineError::new(self.stage, ErrorClass::Runtime, self.message);
        err.record = record;
        err
    }
}

fn line_of(e: &corpus::CorpusError) -> Option<usize> {
    match e {
        corpus::CorpusError::MalformedRecord { line, .. } | corpus::CorpusError::DuplicateStudy { line, .. } => {
            Some(*line)
        }
        corpus::CorpusError::IoFailure(_) => None,
    }
}

/// Reads corpus records, collecting per-line failures instead of aborting.
pub fn read_corpus_lenient<R: std::io::Read>(reader: R) -> Result<(Vec<StudyRecord>, Vec<RecordIssue>), PipelineError> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for item in corpus::corpus_records(reader) {
        match item {
            Ok(r) => records.push(r),
            Err(corpus::CorpusError::IoFailure(e)) => {
                return Err(PipelineError::new(Stage::Corpus, ErrorClass::Runtime, e))
            }
            Err(e) => issues.push(RecordIssue {
                stage: Stage::Corpus,
                study_id: None,
                line: line_of(&e),
                message: e.to_string(),
            }),
        }
    }
    Ok((records, issues))
}

pub fn parse_stage(records: &[StudyRecord]) -> (Vec<ParsedReportRecord>, Vec<RecordIssue>) {
    let mut parsed = Vec::with_capacity(records.len());
    let mut issues = Vec::new();
    for r in records {
        match parse_report(&r.study_id, &r.report_text) {
            Ok(report) => parsed.push(report.to_record()),
            Err(e) => issues.push(RecordIssue {
                stage: Stage::Parse,
                study_id: Some(r.study_id.clone()),
                line: None,
                message: e.to_string(),
            }),
        }
    }
    (parsed, issues)
}

/// Filters the Findings sentences of each parsed report. Reports without a
/// Findings section get an empty reference.
pub fn filter_stage(parsed: &[ParsedReportRecord], rules: &FilterRuleSet) -> Vec<FilteredFindingsRecord> {
    parsed
        .iter()
        .map(|p| {
            let sentences = p
                .sentences
                .get(&SectionName::Findings)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let outcome = filter_findings(sentences, rules);
            FilteredFindingsRecord {
                study_id: p.study_id.clone(),
                text: outcome.text,
                rule_set_version: rules.version().to_owned(),
                decisions: outcome.decisions,
            }
        })
        .collect()
}

pub fn mock_detect_stage<'a>(study_ids: impl IntoIterator<Item = &'a str>, seed: u64) -> Vec<DetectionSet> {
    study_ids.into_iter().map(|id| mock_detect(id, seed)).collect()
}

/// Orders detection sets like `study_ids`; studies without detections get
/// an empty set. Returns the number of sets for unknown studies dropped.
pub fn align_detections(study_ids: &[&str], sets: Vec<DetectionSet>) -> (Vec<DetectionSet>, usize) {
    let mut by_id: HashMap<String, DetectionSet> = sets.into_iter().map(|s| (s.study_id.clone(), s)).collect();
    let aligned: Vec<DetectionSet> = study_ids
        .iter()
        .map(|id| by_id.remove(*id).unwrap_or_else(|| DetectionSet::empty(*id)))
        .collect();
    (aligned, by_id.len())
}

pub fn prompt_stage(sets: &[DetectionSet], options: &PromptOptions) -> Vec<Prompt> {
    sets.iter().map(|s| build_prompt(s, options)).collect()
}

pub fn build_backend(config: &BackendConfig, terminator: &str) -> Result<Box<dyn GenerationBackend>, PipelineError> {
    Ok(match config {
        BackendConfig::Template => Box::new(TemplateBackend::new(terminator)),
        BackendConfig::Remote(remote) => Box::new(
            RemoteBackend::new(remote.clone())
                .map_err(|e| PipelineError::new(Stage::Generate, ErrorClass::Backend, e))?,
        ),
    })
}

/// Generates findings for every prompt. Backend failures abort the stage;
/// prompts the backend cannot interpret are reported per record.
pub fn generate_stage(
    prompts: &[PromptRecord],
    backend: &dyn GenerationBackend,
    max_new_tokens: usize,
    concurrency: usize,
) -> Result<(Vec<GeneratedFindings>, Vec<RecordIssue>), PipelineError> {
    let jobs: Vec<(String, GenerationRequest)> = prompts
        .iter()
        .map(|p| {
            (
                p.study_id.clone(),
                GenerationRequest::new(p.prompt.clone(), p.study_id.clone()).with_max_new_tokens(max_new_tokens),
            )
        })
        .collect();
    let mut generated = Vec::with_capacity(jobs.len());
    let mut issues = Vec::new();
    for ((study_id, _), result) in jobs.iter().zip(generate_batch(&jobs, backend, concurrency)) {
        match result {
            Ok(g) => generated.push(g),
            Err(e) if e.is_backend_failure() => {
                return Err(PipelineError::new(Stage::Generate, ErrorClass::Backend, e).at(study_id.clone()))
            }
            Err(e) => issues.push(RecordIssue {
                stage: Stage::Generate,
                study_id: Some(study_id.clone()),
                line: None,
                message: e.to_string(),
            }),
        }
    }
    Ok((generated, issues))
}

/// Reference text used for evaluation (the `text` of a filter record).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub study_id: String,
    pub text: String,
    #[serde(default)]
    pub rule_set_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub score: CorpusScore,
    pub scores: Vec<ScoreRecord>,
    pub summary: String,
    /// References with no generated hypothesis; scored against an empty one.
    pub missing_hypotheses: usize,
}

pub struct EvaluationInput<'a> {
    pub generated: &'a [GeneratedFindings],
    pub references: &'a [ReferenceRecord],
    pub beta: f64,
    pub prompt_options_version: &'a str,
    pub baselines: &'a [ComparisonRow],
    /// Only these studies are evaluated when set.
    pub only: Option<&'a HashSet<String>>,
}

pub fn evaluate_stage(input: EvaluationInput<'_>) -> Result<EvaluationReport, PipelineError> {
    let hyps: HashMap<&str, &GeneratedFindings> = input.generated.iter().map(|g| (g.study_id.as_str(), g)).collect();
    let mut missing = 0;
    let pairs: Vec<EvalPair> = input
        .references
        .iter()
        .filter(|r| input.only.map_or(true, |ids| ids.contains(&r.study_id)))
        .map(|r| {
            let hyp = hyps.get(r.study_id.as_str()).map_or_else(
                || {
                    missing += 1;
                    ""
                },
                |g| g.text.as_str(),
            );
            EvalPair::new(r.study_id.clone(), hyp, r.text.clone())
        })
        .collect();
    let rule_version = input
        .references
        .iter()
        .find_map(|r| r.rule_set_version.clone())
        .unwrap_or_default();
    let score = evaluate_corpus(&pairs, input.beta, &rule_version, input.prompt_options_version)
        .map_err(|e| PipelineError::new(Stage::Evaluate, ErrorClass::Runtime, e))?;
    let scores = score
        .per_study
        .iter()
        .map(|(id, s)| ScoreRecord {
            study_id: id.clone(),
            score: *s,
        })
        .collect();
    let backend = input.generated.first().map_or("none", |g| g.backend.as_str());
    let summary = render_summary(&score, input.beta, backend, input.baselines);
    Ok(EvaluationReport {
        score,
        scores,
        summary,
        missing_hypotheses: missing,
    })
}

pub fn render_summary(score: &CorpusScore, beta: f64, backend: &str, baselines: &[ComparisonRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "ROUGE-L (beta = {beta}): mean F = {:.6} over {} studies\n",
        score.mean_f, score.n
    ));
    if !score.empty_references.is_empty() {
        out.push_str(&format!(
            "empty references excluded: {} ({})\n",
            score.empty_references.len(),
            score.empty_references.join(", ")
        ));
    }
    out.push_str(&format!("rule set: {}\n", score.rule_set_version));
    out.push_str(&format!("prompt options: {}\n\n", score.prompt_options_version));
    let mut rows = baselines.to_vec();
    rows.push(ComparisonRow::new(format!("this run ({backend})"), score.mean_f));
    out.push_str(&render_comparison(&rows));
    out
}

pub fn load_baseline_rows(source: &BaselineSource) -> Result<Vec<ComparisonRow>, PipelineError> {
    let err = |e| PipelineError::new(Stage::Evaluate, ErrorClass::Validation, e);
    match source {
        BaselineSource::None => Ok(Vec::new()),
        BaselineSource::Bundled => parse_baselines(BUNDLED_BASELINES).map_err(err),
        BaselineSource::File(p) => crate::rouge::load_baselines(p).map_err(err),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub stage: Stage,
    pub class: ErrorClass,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureInfo>,
    pub config: BTreeMap<String, String>,
    pub rule_set_version: Option<String>,
    pub prompt_options_version: String,
    pub counts: BTreeMap<String, usize>,
    pub mean_rouge_l: Option<f64>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

struct Run<'a> {
    config: &'a PipelineConfig,
    manifest: RunManifest,
    issues: Vec<RecordIssue>,
}

impl Run<'_> {
    fn count(&mut self, key: &str, n: usize) {
        self.manifest.counts.insert(key.to_owned(), n);
    }

    fn write<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<(), PipelineError> {
        let path = self.config.output_dir.join(name);
        records::write_records_to_path(&path, records)
            .map_err(|e| PipelineError::new(Stage::Output, ErrorClass::Runtime, format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(name.to_owned());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), PipelineError> {
        let path = self.config.output_dir.join(name);
        fs::write(&path, text)
            .map_err(|e| PipelineError::new(Stage::Output, ErrorClass::Runtime, format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(name.to_owned());
        Ok(())
    }

    /// Records per-record failures; any failure aborts a strict run.
    fn absorb(&mut self, issues: Vec<RecordIssue>) -> Result<(), PipelineError> {
        if self.config.strict {
            if let Some(first) = issues.into_iter().next() {
                return Err(first.into_error());
            }
            return Ok(());
        }
        self.issues.extend(issues);
        Ok(())
    }

    fn stages(&mut self) -> Result<(), PipelineError> {
        let config = self.config;
        let file = File::open(&config.corpus_path).map_err(|e| {
            PipelineError::new(
                Stage::Corpus,
                ErrorClass::Runtime,
                format!("{}: {e}", config.corpus_path.display()),
            )
        })?;
        let (records, issues) = read_corpus_lenient(file)?;
        self.count("corpus_errors", issues.len());
        self.absorb(issues)?;
        self.count("reports", records.len());

        let records = split_corpus(records, config.split_seed);
        self.write("splits.jsonl", &records)?;

        let (parsed, issues) = parse_stage(&records);
        self.count("parse_errors", issues.len());
        self.absorb(issues)?;
        self.write("parsed.jsonl", &parsed)?;

        let rules = load_rules(config.rules_path.as_deref())
            .map_err(|e| PipelineError::new(Stage::Filter, ErrorClass::Validation, e))?;
        self.manifest.rule_set_version = Some(rules.version().to_owned());
        let filtered = filter_stage(&parsed, &rules);
        self.count("filtered", filtered.len());
        self.count(
            "filtered_empty",
            filtered.iter().filter(|f| f.text.trim().is_empty()).count(),
        );
        self.write("filtered.jsonl", &filtered)?;

        let ids: Vec<&str> = records.iter().map(|r| r.study_id.as_str()).collect();
        let sets = match &config.detection_source {
            DetectionSource::Mock { seed } => mock_detect_stage(ids.iter().copied(), *seed),
            DetectionSource::Ingest(path) => {
                let sets =
                    ingest_detections(path).map_err(|e| PipelineError::new(Stage::Detect, ErrorClass::Runtime, e))?;
                let (aligned, dropped) = align_detections(&ids, sets);
                self.count("detections_unmatched", dropped);
                aligned
            }
        };
        self.count("detection_sets", sets.len());
        let rows: Vec<detect::DetectionRecord> = sets.iter().flat_map(detect::detection_records).collect();
        self.write("detections.jsonl", &rows)?;

        let prompts = prompt_stage(&sets, &config.prompt);
        let prompt_records: Vec<PromptRecord> = prompts.iter().map(PromptRecord::from).collect();
        self.count("prompts", prompt_records.len());
        self.write("prompts.jsonl", &prompt_records)?;

        let splits: HashMap<&str, Option<Split>> = records.iter().map(|r| (r.study_id.as_str(), r.split)).collect();
        let pairs: Vec<TrainingPairRecord> = prompts
            .iter()
            .zip(&filtered)
            .filter(|(p, _)| splits.get(p.study_id.as_str()) == Some(&Some(Split::Train)))
            .filter_map(|(p, f)| {
                render_training_pair(p, &f.text).ok().map(|text| TrainingPairRecord {
                    study_id: p.study_id.clone(),
                    text,
                })
            })
            .collect();
        self.count("training_pairs", pairs.len());
        self.write("training_pairs.jsonl", &pairs)?;

        let backend = build_backend(&config.backend, &config.prompt.terminator)?;
        let concurrency = match &config.backend {
            BackendConfig::Template => 1,
            BackendConfig::Remote(r) => r.concurrency,
        };
        let (generated, issues) =
            generate_stage(&prompt_records, backend.as_ref(), config.max_new_tokens, concurrency)?;
        self.count("generation_errors", issues.len());
        self.absorb(issues)?;
        self.count("generations", generated.len());
        self.write("generations.jsonl", &generated)?;

        let references: Vec<ReferenceRecord> = filtered
            .iter()
            .map(|f| ReferenceRecord {
                study_id: f.study_id.clone(),
                text: f.text.clone(),
                rule_set_version: Some(f.rule_set_version.clone()),
            })
            .collect();
        let only: Option<HashSet<String>> = config.eval_split.map(|split| {
            records
                .iter()
                .filter(|r| r.split == Some(split))
                .map(|r| r.study_id.clone())
                .collect()
        });
        let baselines = load_baseline_rows(&config.baselines)?;
        let report = evaluate_stage(EvaluationInput {
            generated: &generated,
            references: &references,
            beta: config.beta,
            prompt_options_version: &self.manifest.prompt_options_version,
            baselines: &baselines,
            only: only.as_ref(),
        })?;
        self.count("evaluated", report.score.n);
        self.count("empty_references", report.score.empty_references.len());
        self.count("missing_hypotheses", report.missing_hypotheses);
        self.manifest.mean_rouge_l = Some(report.score.mean_f);
        self.write("scores.jsonl", &report.scores)?;
        self.write_text("summary.txt", &report.summary)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPairRecord {
    pub study_id: String,
    pub text: String,
}

/// Runs every stage, writing outputs and `manifest.json` to the output
/// directory. On failure the outputs written so far are kept and the
/// manifest records the failing stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    fs::create_dir_all(&config.output_dir).map_err(|e| {
        PipelineError::new(
            Stage::Output,
            ErrorClass::Runtime,
            format!("{}: {e}", config.output_dir.display()),
        )
    })?;
    let mut run = Run {
        config,
        manifest: RunManifest {
            tool: TOOL_NAME.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            status: RunStatus::Ok,
            failure: None,
            config: config.snapshot().clone(),
            rule_set_version: None,
            prompt_options_version: config.prompt.version_tag(),
            counts: BTreeMap::new(),
            mean_rouge_l: None,
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        },
        issues: Vec::new(),
    };
    let result = run.stages();
    if !run.issues.is_empty() || result.is_err() {
        let issues = std::mem::take(&mut run.issues);
        run.count("issues", issues.len());
        // Best effort: the primary error, if any, is what gets reported.
        let _ = run.write("issues.jsonl", &issues);
    }
    if let Err(e) = &result {
        run.manifest.status = RunStatus::Failed;
        run.manifest.failure = Some(FailureInfo {
            stage: e.stage,
            class: e.class,
            message: e.message.clone(),
            record: e.record.clone(),
        });
    }
    run.manifest.finished_unix_ms = now_ms();
    write_manifest(&config.output_dir, &run.manifest)?;
    result.map(|()| run.manifest)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), PipelineError> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    File::create(&path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| PipelineError::new(Stage::Output, ErrorClass::Runtime, format!("{}: {e}", path.display())))
}
