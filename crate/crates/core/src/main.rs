use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use radfind::corpus::{split_corpus, ParsedReportRecord, Split};
use radfind::detect::{detection_records, DetectionIngest, DetectionRecord};
use radfind::filter::{load_rules, FilteredFindingsRecord};
use radfind::generate::{GeneratedFindings, RemoteConfig, DEFAULT_MAX_NEW_TOKENS};
use radfind::pipeline::{
    self, align_detections, build_backend, evaluate_stage, BackendConfig, BaselineSource, ErrorClass, EvaluationInput,
    PipelineConfig, PipelineError, RawConfig, RecordIssue, ReferenceRecord, Stage,
};
use radfind::prompt::{PromptOptions, PromptRecord, DEFAULT_TERMINATOR};
use radfind::records;

#[derive(Parser)]
#[command(name = "radfind", version, about = "Chest X-ray findings generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// Input record file (default: stdin).
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Output record file (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Abort on the first malformed record.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse corpus records into report sections and sentences.
    Parse {
        #[command(flatten)]
        io: Io,
    },
    /// Assign train/validation/test splits (70:10:20).
    Split {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ignore splits already present in the input.
        #[arg(long)]
        reassign: bool,
    },
    /// Filter Findings sentences of parsed reports.
    Filter {
        #[command(flatten)]
        io: Io,
        /// Rules file; the built-in rules are used when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Emit seeded mock detections for every study in a corpus.
    DetectMock {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        seed: u64,
    },
    /// Build prompts from detection records.
    Prompt {
        #[command(flatten)]
        io: Io,
        /// Corpus whose studies receive prompts, in corpus order; studies
        /// without detections get the empty prompt.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        options: PromptArgs,
    },
    /// Generate findings for prompt records.
    Generate {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
        #[arg(long, default_value = DEFAULT_TERMINATOR)]
        terminator: String,
    },
    /// Score generated findings against filtered references.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Literature rows to merge into the comparison (`builtin` for the bundled table).
        #[arg(long)]
        baselines: Option<String>,
        /// Write per-study scores here.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long)]
        prompt_options_version: Option<String>,
        /// Corpus with split assignments, used with --split.
        #[arg(long, requires = "split")]
        splits: Option<PathBuf>,
        #[arg(long, requires = "splits")]
        split: Option<Split>,
    },
    /// Run the whole pipeline from a config file.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// Override a config key: `section.key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        mock_seed: Option<u64>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, default_value_t = 2)]
    probability_decimals: u32,
    #[arg(long)]
    include_bbox: bool,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value = DEFAULT_TERMINATOR)]
    terminator: String,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, default_value = "template")]
    backend: String,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

fn validation(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorClass::Validation, e)
}

fn runtime(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorClass::Runtime, e)
}

fn open_input(path: Option<&Path>, stage: Stage) -> Result<Box<dyn Read>, PipelineError> {
    match path {
        Some(p) => File::open(p)
            .map(|f| Box::new(f) as Box<dyn Read>)
            .map_err(|e| runtime(stage, format!("{}: {e}", p.display()))),
        None => Ok(Box::new(io::stdin().lock())),
    }
}

fn write_output<T: Serialize>(path: Option<&Path>, rows: &[T], stage: Stage) -> Result<(), PipelineError> {
    let result = match path {
        Some(p) => records::write_records_to_path(p, rows),
        None => records::write_records(io::stdout().lock(), rows),
    };
    result.map_err(|e| runtime(stage, e))
}

fn report_issue(issue: &RecordIssue) {
    eprintln!("{}", records::encode(issue));
}

/// Logs per-record issues to stderr; in strict mode the first one aborts.
fn handle_issues(issues: Vec<RecordIssue>, strict: bool) -> Result<(), PipelineError> {
    for issue in &issues {
        report_issue(issue);
    }
    match issues.into_iter().next() {
        Some(first) if strict => {
            let mut err = runtime(first.stage, first.message);
            err.record = first.study_id.or(first.line.map(|l| format!("line {l}")));
            Err(err)
        }
        _ => Ok(()),
    }
}

fn decode_lenient<T: DeserializeOwned>(
    reader: impl Read,
    stage: Stage,
) -> Result<(Vec<T>, Vec<RecordIssue>), PipelineError> {
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    for line in records::lines(reader) {
        let line = line.map_err(|e| runtime(stage, e))?;
        match records::decode::<T>(&line) {
            Ok(row) => rows.push(row),
            Err(detail) => issues.push(RecordIssue {
                stage,
                study_id: None,
                line: Some(line.number),
                message: format!("malformed record: {detail}"),
            }),
        }
    }
    Ok((rows, issues))
}

fn read_corpus_arg(path: Option<&Path>, strict: bool) -> Result<Vec<radfind::corpus::StudyRecord>, PipelineError> {
    let (records, issues) = pipeline::read_corpus_lenient(open_input(path, Stage::Corpus)?)?;
    handle_issues(issues, strict)?;
    Ok(records)
}

fn backend_config(args: &BackendArgs) -> Result<BackendConfig, PipelineError> {
    match args.backend.as_str() {
        "template" => Ok(BackendConfig::Template),
        "remote" => {
            let endpoint = args
                .endpoint
                .clone()
                .ok_or_else(|| validation(Stage::Config, "--endpoint is required for the remote backend"))?;
            if args.timeout_secs.is_nan() || args.timeout_secs <= 0.0 {
                return Err(validation(Stage::Config, "--timeout-secs must be positive"));
            }
            let mut remote = RemoteConfig::new(endpoint);
            remote.timeout = Duration::try_from_secs_f64(args.timeout_secs)
                .map_err(|_| validation(Stage::Config, "--timeout-secs is too large"))?;
            remote.retries = args.retries;
            remote.concurrency = args.concurrency.max(1);
            Ok(BackendConfig::Remote(remote))
        }
        other => Err(validation(Stage::Config, format!("unknown backend {other:?}"))),
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Parse { io } => {
            let records = read_corpus_arg(io.input.as_deref(), io.strict)?;
            let (parsed, issues) = pipeline::parse_stage(&records);
            handle_issues(issues, io.strict)?;
            write_output(io.output.as_deref(), &parsed, Stage::Parse)
        }
        Command::Split { io, seed, reassign } => {
            let mut records = read_corpus_arg(io.input.as_deref(), io.strict)?;
            if reassign {
                records.iter_mut().for_each(|r| r.split = None);
            }
            let records = split_corpus(records, seed);
            write_output(io.output.as_deref(), &records, Stage::Split)
        }
        Command::Filter { io, rules } => {
            let rules = load_rules(rules.as_deref()).map_err(|e| validation(Stage::Filter, e))?;
            let (parsed, issues) =
                decode_lenient::<ParsedReportRecord>(open_input(io.input.as_deref(), Stage::Filter)?, Stage::Filter)?;
            handle_issues(issues, io.strict)?;
            let filtered: Vec<FilteredFindingsRecord> = pipeline::filter_stage(&parsed, &rules);
            write_output(io.output.as_deref(), &filtered, Stage::Filter)
        }
        Command::DetectMock { io, seed } => {
            let records = read_corpus_arg(io.input.as_deref(), io.strict)?;
            let sets = pipeline::mock_detect_stage(records.iter().map(|r| r.study_id.as_str()), seed);
            let rows: Vec<DetectionRecord> = sets.iter().flat_map(detection_records).collect();
            write_output(io.output.as_deref(), &rows, Stage::Detect)
        }
        Command::Prompt { io, corpus, options } => {
            let options = PromptOptions {
                probability_decimals: options.probability_decimals,
                include_bbox: options.include_bbox,
                threshold: options.threshold,
                terminator: options.terminator,
            };
            options.validate().map_err(|e| validation(Stage::Prompt, e))?;
            let mut ingest = DetectionIngest::default();
            let mut issues = Vec::new();
            for line in records::lines(open_input(io.input.as_deref(), Stage::Detect)?) {
                let line = line.map_err(|e| runtime(Stage::Detect, e))?;
                if let Err(e) = ingest.push_line(&line) {
                    issues.push(RecordIssue {
                        stage: Stage::Detect,
                        study_id: None,
                        line: Some(line.number),
                        message: e.to_string(),
                    });
                }
            }
            handle_issues(issues, io.strict)?;
            let mut sets = ingest.finish();
            if let Some(corpus) = corpus {
                let records = read_corpus_arg(Some(&corpus), io.strict)?;
                let ids: Vec<&str> = records.iter().map(|r| r.study_id.as_str()).collect();
                sets = align_detections(&ids, sets).0;
            }
            let prompts: Vec<PromptRecord> = pipeline::prompt_stage(&sets, &options)
                .iter()
                .map(PromptRecord::from)
                .collect();
            write_output(io.output.as_deref(), &prompts, Stage::Prompt)
        }
        Command::Generate {
            io,
            backend,
            max_new_tokens,
            terminator,
        } => {
            if max_new_tokens == 0 {
                return Err(validation(Stage::Config, "--max-new-tokens must be at least 1"));
            }
            let config = backend_config(&backend)?;
            let concurrency = match &config {
                BackendConfig::Template => 1,
                BackendConfig::Remote(r) => r.concurrency,
            };
            let backend = build_backend(&config, &terminator)?;
            let (prompts, issues) =
                decode_lenient::<PromptRecord>(open_input(io.input.as_deref(), Stage::Generate)?, Stage::Generate)?;
            handle_issues(issues, io.strict)?;
            let (generated, issues) =
                pipeline::generate_stage(&prompts, backend.as_ref(), max_new_tokens, concurrency)?;
            handle_issues(issues, io.strict)?;
            write_output(io.output.as_deref(), &generated, Stage::Generate)
        }
        Command::Evaluate {
            generated,
            references,
            beta,
            baselines,
            scores_out,
            prompt_options_version,
            splits,
            split,
        } => {
            let (generated, issues) =
                decode_lenient::<GeneratedFindings>(open_input(Some(&generated), Stage::Evaluate)?, Stage::Evaluate)?;
            handle_issues(issues, false)?;
            let (references, issues) =
                decode_lenient::<ReferenceRecord>(open_input(Some(&references), Stage::Evaluate)?, Stage::Evaluate)?;
            handle_issues(issues, false)?;
            let source = match baselines.as_deref() {
                None | Some("none") => BaselineSource::None,
                Some("builtin") => BaselineSource::Bundled,
                Some(p) => BaselineSource::File(PathBuf::from(p)),
            };
            let rows = pipeline::load_baseline_rows(&source)?;
            let only: Option<HashSet<String>> = match (splits, split) {
                (Some(path), Some(split)) => Some(
                    read_corpus_arg(Some(&path), false)?
                        .into_iter()
                        .filter(|r| r.split == Some(split))
                        .map(|r| r.study_id)
                        .collect(),
                ),
                _ => None,
            };
            let version = prompt_options_version.unwrap_or_else(|| PromptOptions::default().version_tag());
            let report = evaluate_stage(EvaluationInput {
                generated: &generated,
                references: &references,
                beta,
                prompt_options_version: &version,
                baselines: &rows,
                only: only.as_ref(),
            })?;
            if let Some(path) = scores_out {
                write_output(Some(&path), &report.scores, Stage::Evaluate)?;
            }
            io::stdout()
                .lock()
                .write_all(report.summary.as_bytes())
                .map_err(|e| runtime(Stage::Output, e))
        }
        Command::Run {
            config,
            overrides,
            output_dir,
            mock_seed,
            detections,
            backend,
            endpoint,
            strict,
        } => {
            let mut raw = RawConfig::load(&config)?;
            let cwd = |p: PathBuf| -> String {
                std::env::current_dir()
                    .map(|d| d.join(&p))
                    .unwrap_or(p)
                    .display()
                    .to_string()
            };
            let mut sets: Vec<(String, String)> = Vec::new();
            for kv in overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| validation(Stage::Config, format!("override {kv:?} is not KEY=VALUE")))?;
                sets.push((k.trim().to_owned(), v.trim().to_owned()));
            }
            if let Some(dir) = output_dir {
                sets.push(("output.dir".into(), cwd(dir)));
            }
            if let Some(seed) = mock_seed {
                sets.push(("detect.mock_seed".into(), seed.to_string()));
            }
            if let Some(path) = detections {
                sets.push(("detect.path".into(), cwd(path)));
            }
            if let Some(b) = backend {
                sets.push(("generate.backend".into(), b));
            }
            if let Some(e) = endpoint {
                sets.push(("generate.endpoint".into(), e));
            }
            if strict {
                sets.push(("run.strict".into(), "true".into()));
            }
            for (k, v) in sets {
                raw.set(&k, &v)?;
            }
            let config = PipelineConfig::from_raw(raw)?;
            let manifest = pipeline::run_pipeline(&config)?;
            let summary =
                fs::read_to_string(config.output_dir.join("summary.txt")).map_err(|e| runtime(Stage::Output, e))?;
            print!("{summary}");
            eprintln!(
                "{}",
                records::encode(&serde_json::json!({
                    "status": manifest.status,
                    "output_dir": config.output_dir.display().to_string(),
                    "counts": manifest.counts,
                }))
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                records::encode(&serde_json::json!({
                    "error": e.class,
                    "stage": e.stage,
                    "message": e.message,
                    "record": e.record,
                }))
            );
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
