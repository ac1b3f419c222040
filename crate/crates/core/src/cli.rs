//! Command-line driver. Each stage persists its outputs in the run directory
//! so later stages can be re-run without querying the model again.
//!
//! Run directory layout:
//!
//! ```text
//! scrubbed_notes.jsonl, scrub_findings.jsonl      scrub
//! raw/<note_id>.txt, records.jsonl,
//! extract_log.jsonl, extract_manifest.json        extract
//! concepts.jsonl, postprocess_diagnostics.json,
//! similarity_records.jsonl, embeddings.jsonl,
//! report.{csv,json,md}, manifest.json              evaluate
//! ```
//!
//! Exit codes: 0 success, 1 run finished below its success threshold or
//! failed midway, 2 bad input or configuration, 3 backend authentication
//! failure.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, corpus_stats, scrub_phi, to_jsonl, Category, ClinicalNote};
use crate::eval_ner::{evaluate_ner, Pooling};
use crate::eval_semantic::{
    evaluate_semantic_records, parse_thresholds, CachedEmbedder, EmbeddingProvider, HttpEmbedder,
    PairingMode, SemanticEvalConfig, StubEmbedder, DEFAULT_EMBEDDING_MODEL,
};
use crate::extraction::{
    extract_corpus, BackendConfig, ChatBackend, ExtractionRecord, HttpChatBackend, MockBackend,
    MockStep, NoteOutcome, PromptTemplate, DEFAULT_MODEL_ID,
};
use crate::postprocess::{postprocess_all, LexiconSet};
use crate::report::{assemble, parse_json, render, ReportFormat, RunManifest};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const EMBEDDING_CACHE_FILE: &str = "embeddings.jsonl";
const EXTRACT_MANIFEST_FILE: &str = "extract_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Auth(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Input(_) => 2,
            CliError::Auth(_) => 3,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "sdoh",
    version,
    about = "Zero-shot clinical note extraction and scoring"
)]
pub struct Cli {
    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replace phone numbers, dates and MRN-like numbers in a notes file.
    Scrub(ScrubArgs),
    /// Prompt the chat model for every note and parse the replies.
    Extract(ExtractArgs),
    /// Post-process extracted records and score them against gold.
    Evaluate(EvaluateArgs),
    /// Count gold annotations per category and subtype.
    Stats(StatsArgs),
    /// Re-render an evaluated run's report in another format.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScrubArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Maximum requests in flight.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// JSONL replies to serve instead of calling a remote backend.
    #[arg(long)]
    pub mock_backend: Option<PathBuf>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Fraction of notes that must parse for exit status 0.
    #[arg(long)]
    pub min_success: Option<f64>,
    /// File holding a replacement system prompt.
    #[arg(long)]
    pub system_prompt: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Csv,
    Json,
    Markdown,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingArg {
    PerSpan,
    WholeCell,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
    #[arg(long, value_parser = ["micro", "macro"])]
    pub pooling: Option<String>,
    /// Comma-separated, strictly increasing, in (0, 1].
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Use the deterministic hash embedder with this seed.
    #[arg(long, conflicts_with = "embedding_url")]
    pub stub_embedder: Option<u64>,
    /// Remote embeddings endpoint.
    #[arg(long)]
    pub embedding_url: Option<String>,
    #[arg(long)]
    pub embedding_model: Option<String>,
    #[arg(long, value_enum)]
    pub semantic_mode: Option<PairingArg>,
    #[arg(long)]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Also write stats.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

/// Optional settings file. Keys mirror the long flags with underscores.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub notes: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub lexicons: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub parallel: Option<usize>,
    pub pooling: Option<String>,
    pub thresholds: Option<Vec<f64>>,
    pub format: Option<FormatArg>,
    pub mock_backend: Option<PathBuf>,
    pub stub_embedder: Option<u64>,
    pub min_success: Option<f64>,
    pub system_prompt: Option<PathBuf>,
    pub embedding_model: Option<String>,
    pub semantic_mode: Option<PairingArg>,
    pub backend: Option<BackendConfig>,
    pub embedding_backend: Option<BackendConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
    }
}

fn require_file(role: &str, path: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::Input(format!("--{role} is required")))?;
    if !path.is_file() {
        return Err(CliError::Input(format!(
            "{role} file not found: {}",
            path.display()
        )));
    }
    Ok(path)
}

fn optional_file(role: &str, path: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    path.map(|p| require_file(role, Some(p))).transpose()
}

fn require_out_dir(path: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = path.ok_or_else(|| CliError::Input("--out-dir is required".into()))?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|e| io_err(path, e))
}

/// Maps a note id to a file name: `[A-Za-z0-9_-]` and inner dots pass
/// through, every other byte becomes `%XX`.
pub fn note_file_name(note_id: &str) -> String {
    let mut out = String::with_capacity(note_id.len() + 4);
    for (i, b) in note_id.bytes().enumerate() {
        let plain = b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && i > 0);
        if plain {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.is_empty() {
        out.push('%');
    }
    out.push_str(".txt");
    out
}

fn run_timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    fixed
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

// ---------------------------------------------------------------- scrub

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrubSummary {
    pub notes: usize,
    pub findings: usize,
}

pub fn cmd_scrub(notes_path: &Path, out_dir: &Path) -> Result<ScrubSummary, CliError> {
    let notes = corpus::load_corpus(notes_path).map_err(input_err)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut scrubbed = Vec::with_capacity(notes.len());
    let mut log = String::new();
    let mut total = 0;
    for note in notes {
        let (text, findings) = scrub_phi(&note.text);
        for f in &findings {
            log.push_str(
                &json!({"note_id": note.note_id, "kind": f.kind, "offset": f.offset, "len": f.len})
                    .to_string(),
            );
            log.push('\n');
        }
        total += findings.len();
        scrubbed.push(ClinicalNote {
            note_id: note.note_id,
            text,
        });
    }
    write(&out_dir.join("scrubbed_notes.jsonl"), to_jsonl(&scrubbed))?;
    write(&out_dir.join("scrub_findings.jsonl"), log)?;
    Ok(ScrubSummary {
        notes: scrubbed.len(),
        findings: total,
    })
}

// -------------------------------------------------------------- extract

pub enum BackendChoice {
    Mock(PathBuf),
    Remote(BackendConfig),
}

pub struct ExtractConfig {
    pub notes_path: PathBuf,
    pub out_dir: PathBuf,
    pub backend: BackendChoice,
    pub retry: BackendConfig,
    pub template: PromptTemplate,
    pub model_id: String,
    pub parallel: usize,
    pub min_success: f64,
}

impl ExtractConfig {
    /// Merges flags over the config file and validates every path and
    /// setting. Nothing touches the network here.
    pub fn resolve(args: ExtractArgs, file: FileConfig) -> Result<Self, CliError> {
        let notes_path = require_file("notes", args.notes.or(file.notes))?;
        let mock = optional_file("mock-backend", args.mock_backend.or(file.mock_backend))?;
        let prompt_file =
            optional_file("system-prompt", args.system_prompt.or(file.system_prompt))?;

        let mut backend = file.backend.unwrap_or_default();
        if let Some(url) = args.backend_url {
            backend.endpoint_url = url;
        }
        if let Some(name) = args.api_key_env {
            backend.api_key_env_name = name;
        }
        if let Some(n) = args.max_retries {
            backend.max_retries = n;
        }
        if let Some(t) = args.timeout {
            backend.timeout = Duration::try_from_secs_f64(t).map_err(input_err)?;
        }
        backend.validate().map_err(input_err)?;

        let temperature = args.temperature.or(file.temperature).unwrap_or(0.0);
        let template = match prompt_file {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                PromptTemplate::new(text, temperature)
            }
            None => PromptTemplate::new(crate::extraction::DEFAULT_SYSTEM_PROMPT, temperature),
        }
        .map_err(input_err)?;

        let min_success = args.min_success.or(file.min_success).unwrap_or(1.0);
        if !(0.0..=1.0).contains(&min_success) {
            return Err(CliError::Input(format!(
                "--min-success {min_success} outside [0, 1]"
            )));
        }
        let parallel = args.parallel.or(file.parallel).unwrap_or(4);
        if parallel == 0 {
            return Err(CliError::Input("--parallel must be at least 1".into()));
        }
        let out_dir = require_out_dir(args.out_dir.or(file.out_dir))?;

        let choice = match mock {
            Some(p) => BackendChoice::Mock(p),
            None => {
                if std::env::var(&backend.api_key_env_name).map_or(true, |k| k.is_empty()) {
                    return Err(CliError::Input(format!(
                        "environment variable {} is not set",
                        backend.api_key_env_name
                    )));
                }
                BackendChoice::Remote(backend.clone())
            }
        };
        Ok(ExtractConfig {
            notes_path,
            out_dir,
            backend: choice,
            retry: backend,
            template,
            model_id: args
                .model
                .or(file.model)
                .unwrap_or_else(|| DEFAULT_MODEL_ID.into()),
            parallel,
            min_success,
        })
    }
}

#[derive(Deserialize)]
struct MockEntry {
    note_id: String,
    #[serde(default)]
    reply: Option<String>,
    #[serde(default)]
    steps: Option<Vec<MockStep>>,
}

/// Builds a mock from a JSONL fixture. Each line names a `note_id` and gives
/// either a `reply` string or a `steps` script (`{"reply": ".."}`,
/// `"transient"`, `"auth"`). The id `*` sets the reply for unlisted notes.
pub fn load_mock_backend(path: &Path, notes: &[ClinicalNote]) -> Result<MockBackend, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let by_id: HashMap<&str, &str> = notes
        .iter()
        .map(|n| (n.note_id.as_str(), n.text.as_str()))
        .collect();
    let mut backend = MockBackend::new();
    let mut fallback = None;
    for (idx, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = |m: String| CliError::Input(format!("{}:{}: {m}", path.display(), idx + 1));
        let entry: MockEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let steps = match (entry.reply, entry.steps) {
            (Some(r), None) => vec![MockStep::Reply(r)],
            (None, Some(s)) if !s.is_empty() => s,
            _ => return Err(bad("need exactly one of reply or a non-empty steps".into())),
        };
        if entry.note_id == "*" {
            match steps.as_slice() {
                [MockStep::Reply(r)] => fallback = Some(r.clone()),
                _ => return Err(bad("the * entry takes a plain reply".into())),
            }
            continue;
        }
        let text = by_id
            .get(entry.note_id.as_str())
            .ok_or_else(|| bad(format!("unknown note_id {:?}", entry.note_id)))?;
        backend = backend.with_script(*text, steps);
    }
    Ok(match fallback {
        Some(f) => backend.with_fallback(f),
        None => backend,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractSummary {
    pub total: usize,
    pub parsed: usize,
    pub unparseable: usize,
    pub failed: usize,
    pub skipped: usize,
    pub success_fraction: f64,
    pub meets_threshold: bool,
}

#[derive(Serialize, Deserialize)]
struct ExtractManifest {
    toolkit_version: String,
    model_id: String,
    temperature: f64,
    prompt_hash: String,
    notes_hash: String,
    min_success: f64,
}

pub fn cmd_extract(cfg: &ExtractConfig) -> Result<ExtractSummary, CliError> {
    let notes = corpus::load_corpus(&cfg.notes_path).map_err(input_err)?;
    let backend: Box<dyn ChatBackend> = match &cfg.backend {
        BackendChoice::Mock(p) => Box::new(load_mock_backend(p, &notes)?),
        BackendChoice::Remote(b) => Box::new(HttpChatBackend::new(b).map_err(input_err)?),
    };
    let outcomes = extract_corpus(
        &notes,
        &cfg.template,
        &cfg.model_id,
        backend.as_ref(),
        &cfg.retry.retry_policy(),
        cfg.parallel,
    );

    let raw_dir = cfg.out_dir.join("raw");
    if raw_dir.exists() {
        fs::remove_dir_all(&raw_dir).map_err(|e| io_err(&raw_dir, e))?;
    }
    fs::create_dir_all(&raw_dir).map_err(|e| io_err(&raw_dir, e))?;

    let mut records: Vec<ExtractionRecord> = Vec::new();
    let mut log = String::new();
    let mut summary = ExtractSummary {
        total: notes.len(),
        parsed: 0,
        unparseable: 0,
        failed: 0,
        skipped: 0,
        success_fraction: 0.0,
        meets_threshold: false,
    };
    let mut auth_failure = None;
    for (note, outcome) in notes.iter().zip(&outcomes) {
        let entry = match outcome {
            NoteOutcome::Parsed { raw, parsed } => {
                summary.parsed += 1;
                write(&raw_dir.join(note_file_name(&note.note_id)), &raw.raw_text)?;
                records.push(parsed.record.clone());
                json!({"note_id": note.note_id, "status": "parsed", "attempts": raw.attempt_count, "diagnostics": parsed.diagnostics})
            }
            NoteOutcome::Unparseable { raw, error } => {
                summary.unparseable += 1;
                write(&raw_dir.join(note_file_name(&note.note_id)), &raw.raw_text)?;
                json!({"note_id": note.note_id, "status": "unparseable", "attempts": raw.attempt_count, "error": error.to_string()})
            }
            NoteOutcome::Failed(e) => {
                summary.failed += 1;
                if matches!(e, crate::extraction::ExtractError::Auth(_)) {
                    auth_failure.get_or_insert_with(|| e.to_string());
                }
                json!({"note_id": note.note_id, "status": "failed", "error": e.to_string()})
            }
            NoteOutcome::Skipped => {
                summary.skipped += 1;
                json!({"note_id": note.note_id, "status": "skipped"})
            }
        };
        log.push_str(&entry.to_string());
        log.push('\n');
    }
    write(&cfg.out_dir.join(RECORDS_FILE), to_jsonl(&records))?;
    write(&cfg.out_dir.join("extract_log.jsonl"), log)?;
    let manifest = ExtractManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        model_id: cfg.model_id.clone(),
        temperature: cfg.template.temperature,
        prompt_hash: sha256_hex(cfg.template.system_message.as_bytes()),
        notes_hash: file_hash(&cfg.notes_path)?,
        min_success: cfg.min_success,
    };
    write(
        &cfg.out_dir.join(EXTRACT_MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;

    if let Some(msg) = auth_failure {
        return Err(CliError::Auth(format!("aborted: {msg}")));
    }
    summary.success_fraction = if notes.is_empty() {
        1.0
    } else {
        summary.parsed as f64 / notes.len() as f64
    };
    summary.meets_threshold = summary.success_fraction >= cfg.min_success;
    Ok(summary)
}

// ------------------------------------------------------------- evaluate

pub enum EmbedderChoice {
    Stub(u64),
    Remote {
        config: BackendConfig,
        model_id: String,
    },
}

pub struct EvaluateConfig {
    pub gold_path: PathBuf,
    pub out_dir: PathBuf,
    pub lexicon_path: Option<PathBuf>,
    pub pooling: Pooling,
    pub semantic: SemanticEvalConfig,
    pub embedder: EmbedderChoice,
}

impl EvaluateConfig {
    pub fn resolve(args: EvaluateArgs, file: FileConfig) -> Result<Self, CliError> {
        let gold_path = require_file("gold", args.gold.or(file.gold))?;
        let lexicon_path = optional_file("lexicons", args.lexicons.or(file.lexicons))?;
        let out_dir = args
            .out_dir
            .or(file.out_dir)
            .ok_or_else(|| CliError::Input("--out-dir is required".into()))?;
        let records = out_dir.join(RECORDS_FILE);
        if !records.is_file() {
            return Err(CliError::Input(format!(
                "{} not found; run extract first",
                records.display()
            )));
        }
        let pooling = match args.pooling.or(file.pooling) {
            Some(p) => p.parse().map_err(input_err)?,
            None => Pooling::Micro,
        };
        let thresholds = match (args.thresholds, file.thresholds) {
            (Some(s), _) => parse_thresholds(&s).map_err(input_err)?,
            (None, Some(v)) => v,
            (None, None) => SemanticEvalConfig::default().thresholds,
        };
        let mode = match args.semantic_mode.or(file.semantic_mode) {
            Some(PairingArg::WholeCell) => PairingMode::WholeCell,
            _ => PairingMode::PerSpan,
        };
        let model_id = args
            .embedding_model
            .or(file.embedding_model)
            .unwrap_or_else(|| DEFAULT_EMBEDDING_MODEL.into());
        let semantic = SemanticEvalConfig {
            thresholds,
            model_id: model_id.clone(),
            mode,
        };
        semantic.validate().map_err(input_err)?;
        // The report has fixed columns for these two.
        for theta in [0.8, 0.9] {
            if !semantic.thresholds.contains(&theta) {
                return Err(CliError::Input(format!(
                    "--thresholds must include {theta} (report columns)"
                )));
            }
        }

        let embedder = match (args.stub_embedder, args.embedding_url) {
            (Some(seed), _) => EmbedderChoice::Stub(seed),
            (None, Some(url)) => {
                let mut config = file.embedding_backend.unwrap_or_default();
                config.endpoint_url = url;
                if let Some(name) = args.api_key_env {
                    config.api_key_env_name = name;
                }
                EmbedderChoice::Remote { config, model_id }
            }
            (None, None) => match (file.stub_embedder, file.embedding_backend) {
                (Some(seed), _) => EmbedderChoice::Stub(seed),
                (None, Some(config)) => EmbedderChoice::Remote { config, model_id },
                (None, None) => {
                    return Err(CliError::Input(
                        "choose an embedder: --stub-embedder <seed> or --embedding-url <url>"
                            .into(),
                    ))
                }
            },
        };
        if let EmbedderChoice::Remote { config, .. } = &embedder {
            config.validate().map_err(input_err)?;
        }
        Ok(EvaluateConfig {
            gold_path,
            out_dir,
            lexicon_path,
            pooling,
            semantic,
            embedder,
        })
    }
}

fn load_records(path: &Path) -> Result<Vec<ExtractionRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub rows: usize,
    pub concepts: usize,
    pub uncategorized: usize,
}

pub fn cmd_evaluate(cfg: &EvaluateConfig) -> Result<EvaluateSummary, CliError> {
    let gold = corpus::load_gold(&cfg.gold_path).map_err(input_err)?;
    let records = load_records(&cfg.out_dir.join(RECORDS_FILE))?;
    let lexicons = match &cfg.lexicon_path {
        Some(p) => LexiconSet::load(p).map_err(input_err)?,
        None => LexiconSet::default(),
    };

    let (concepts, diagnostics) = postprocess_all(&records, &lexicons);
    write(&cfg.out_dir.join("concepts.jsonl"), to_jsonl(&concepts))?;
    write(
        &cfg.out_dir.join("postprocess_diagnostics.json"),
        serde_json::to_string_pretty(&diagnostics).expect("diagnostics serialize") + "\n",
    )?;

    let ner = evaluate_ner(&gold, &concepts, cfg.pooling);

    let provider: Box<dyn EmbeddingProvider> = match &cfg.embedder {
        EmbedderChoice::Stub(seed) => Box::new(StubEmbedder::new(*seed)),
        EmbedderChoice::Remote { config, model_id } => {
            Box::new(HttpEmbedder::new(config, model_id.clone()).map_err(input_err)?)
        }
    };
    let embedder = CachedEmbedder::new(provider.as_ref());
    let cache_path = cfg.out_dir.join(EMBEDDING_CACHE_FILE);
    embedder
        .load(&cache_path)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let semantic = evaluate_semantic_records(&gold, &concepts, &cfg.semantic, &embedder)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    embedder
        .save(&cache_path)
        .map_err(|e| CliError::Failed(e.to_string()))?;

    let mut sim_log = String::new();
    for (cell, (_, recs)) in &semantic {
        for r in recs {
            sim_log.push_str(&json!({"cell": cell.to_string(), "gold_text": r.gold_text, "predicted_text": r.predicted_text, "s": r.s}).to_string());
            sim_log.push('\n');
        }
    }
    write(&cfg.out_dir.join("similarity_records.jsonl"), sim_log)?;
    let semantic_scores = semantic.into_iter().map(|(c, (s, _))| (c, s)).collect();

    let stats = corpus_stats(&gold);
    let rows =
        assemble(&ner, &semantic_scores, &stats).map_err(|e| CliError::Failed(e.to_string()))?;

    let mut manifest = RunManifest::new();
    let extract_manifest = cfg.out_dir.join(EXTRACT_MANIFEST_FILE);
    if let Ok(text) = fs::read_to_string(&extract_manifest) {
        if let Ok(m) = serde_json::from_str::<ExtractManifest>(&text) {
            manifest.corpus_hashes.insert("notes".into(), m.notes_hash);
            manifest.prompt_hash = Some(m.prompt_hash);
            manifest.model_id = Some(m.model_id);
            manifest.temperature = Some(m.temperature);
        }
    }
    manifest
        .corpus_hashes
        .insert("gold".into(), file_hash(&cfg.gold_path)?);
    manifest.corpus_hashes.insert(
        "records".into(),
        file_hash(&cfg.out_dir.join(RECORDS_FILE))?,
    );
    manifest.lexicon_hash = Some(lexicons.content_hash());
    manifest.embedding_model_id = Some(embedder.model_id().to_string());
    manifest.pooling = Some(cfg.pooling.to_string());
    manifest.thresholds = cfg.semantic.thresholds.clone();
    manifest.pairing_mode = Some(
        match cfg.semantic.mode {
            PairingMode::PerSpan => "per_span",
            PairingMode::WholeCell => "whole_cell",
        }
        .into(),
    );
    manifest.timestamp = Some(run_timestamp());

    for format in [
        ReportFormat::Csv,
        ReportFormat::Json,
        ReportFormat::Markdown,
    ] {
        write(
            &cfg.out_dir.join(format.file_name()),
            render(&rows, &manifest, format),
        )?;
    }
    write(
        &cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;

    Ok(EvaluateSummary {
        rows: rows.len(),
        concepts: concepts.len(),
        uncategorized: diagnostics.uncategorized.len(),
    })
}

// ---------------------------------------------------------------- stats

pub fn render_stats(gold_path: &Path, format: ReportFormat) -> Result<String, CliError> {
    let gold = corpus::load_gold(gold_path).map_err(input_err)?;
    let stats = corpus_stats(&gold);
    Ok(match format {
        ReportFormat::Json => {
            let rows: Vec<_> = stats
                .rows()
                .into_iter()
                .map(|(cell, n)| json!({"category": cell.category, "subtype": cell.subtype, "count": n}))
                .collect();
            let totals: BTreeMap<_, _> = Category::ALL
                .iter()
                .map(|c| (c.as_str(), stats.category_total(*c)))
                .collect();
            serde_json::to_string_pretty(&json!({"cells": rows, "category_totals": totals}))
                .expect("stats serialize")
                + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::from("category,subtype,count\n");
            for (cell, n) in stats.rows() {
                out.push_str(&format!(
                    "{},{},{n}\n",
                    cell.category,
                    cell.subtype.map(|s| s.as_str()).unwrap_or("")
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Type | Sub-type | Count |\n|---|---|---:|\n");
            for (cell, n) in stats.rows() {
                let sub = cell.subtype.map(|s| s.label()).unwrap_or("-");
                out.push_str(&format!("| {} | {sub} | {n} |\n", cell.category.label()));
            }
            out
        }
    })
}

// --------------------------------------------------------------- report

pub fn cmd_report(out_dir: &Path, format: ReportFormat) -> Result<String, CliError> {
    let path = out_dir.join(ReportFormat::Json.file_name());
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("{}: {e}; run evaluate first", path.display())))?;
    let doc = parse_json(&text).map_err(input_err)?;
    Ok(render(&doc.rows, &doc.manifest, format))
}

// -------------------------------------------------------------- dispatch

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Scrub(a) => {
            let notes = require_file("notes", a.notes.or(file.notes))?;
            let out = require_out_dir(a.out_dir.or(file.out_dir))?;
            let s = cmd_scrub(&notes, &out)?;
            eprintln!("scrubbed {} notes, {} findings", s.notes, s.findings);
            Ok(())
        }
        Command::Extract(a) => {
            let cfg = ExtractConfig::resolve(a, file)?;
            let s = cmd_extract(&cfg)?;
            eprintln!(
                "extracted {}/{} notes ({} unparseable, {} failed)",
                s.parsed, s.total, s.unparseable, s.failed
            );
            if s.meets_threshold {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "success fraction {:.3} below required {:.3}",
                    s.success_fraction, cfg.min_success
                )))
            }
        }
        Command::Evaluate(a) => {
            let cfg = EvaluateConfig::resolve(a, file)?;
            let s = cmd_evaluate(&cfg)?;
            eprintln!(
                "wrote {} report rows from {} concepts ({} uncategorized)",
                s.rows, s.concepts, s.uncategorized
            );
            Ok(())
        }
        Command::Stats(a) => {
            let gold = require_file("gold", a.gold.or(file.gold))?;
            let format = a.format.or(file.format).unwrap_or(FormatArg::Markdown);
            let text = render_stats(&gold, format.into())?;
            if let Some(dir) = a.out_dir {
                let dir = require_out_dir(Some(dir))?;
                write(
                    &dir.join("stats.json"),
                    render_stats(&gold, ReportFormat::Json)?,
                )?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Report(a) => {
            let dir = a
                .out_dir
                .or(file.out_dir)
                .ok_or_else(|| CliError::Input("--out-dir is required".into()))?;
            let format = a.format.or(file.format).unwrap_or(FormatArg::Markdown);
            print!("{}", cmd_report(&dir, format.into())?);
            Ok(())
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
