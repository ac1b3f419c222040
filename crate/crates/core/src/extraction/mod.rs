//! Zero-shot prompting of a chat model and parsing of its labeled reply.

mod backend;
mod parse;

pub(crate) use backend::truncate;
pub use backend::{
    chat_request_body, with_retry, BackendConfig, BackendError, ChatBackend, ConfigError,
    HttpChatBackend, MockBackend, MockStep, RetryPolicy, DEFAULT_API_KEY_ENV, MAX_RETRIES_LIMIT,
};
pub use parse::{
    parse_output, parse_output_with_diagnostics, ExtractionRecord, ParseDiagnostics, ParseError,
    Parsed,
};

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, ClinicalNote};

pub const DEFAULT_MODEL_ID: &str = "gpt-3.5-turbo";

/// Default system instruction: annotator role, the five labeled output lines,
/// and the `N/A` convention. Nothing else.
pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are an annotator of clinical notes. Extract the age, gender, ethnicity, \
social history and family history of the patient from the note given by the user. \
Output the results in this format, one line each:
Age: <age>
Gender: <gender>
Ethnicity: <ethnicity>
Social History: <social history>
Family History: <family history>
Write N/A when the note does not mention it.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_message: String,
    pub user_message: String,
    pub model_id: String,
    pub temperature: f64,
}

/// System prompt plus sampling settings. Replaceable so that other wordings
/// can be tried against the same parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_message: String,
    pub temperature: f64,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_message: DEFAULT_SYSTEM_PROMPT.to_string(),
            temperature: 0.0,
        }
    }
}

impl PromptTemplate {
    pub fn new(system_message: impl Into<String>, temperature: f64) -> Result<Self, ConfigError> {
        let t = PromptTemplate {
            system_message: system_message.into(),
            temperature,
        };
        t.validate()?;
        Ok(t)
    }

    /// The system message must name every output label (`Age:` ... `Family
    /// History:`) exactly once, and the temperature must lie in [0, 2].
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Temperature(self.temperature));
        }
        for c in Category::ALL {
            let label = format!("{}:", c.label());
            let n = self.system_message.matches(&label).count();
            if n != 1 {
                return Err(ConfigError::Invalid(format!(
                    "system prompt must contain {label:?} exactly once (found {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self, note: &ClinicalNote, model_id: &str) -> ChatRequest {
        ChatRequest {
            system_message: self.system_message.clone(),
            user_message: note.text.clone(),
            model_id: model_id.to_string(),
            temperature: self.temperature,
        }
    }
}

/// Builds the request with the default prompt at temperature 0.
pub fn build_prompt(note: &ClinicalNote, model_id: &str) -> ChatRequest {
    PromptTemplate::default().build(note, model_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExtraction {
    pub note_id: String,
    pub raw_text: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("backend failed after {attempts} attempts (last status {last_status:?}): {message}")]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected after {attempts} attempt(s): {source}")]
    Rejected {
        attempts: u32,
        #[source]
        source: BackendError,
    },
}

pub fn extract(
    note_id: &str,
    request: &ChatRequest,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
) -> Result<RawExtraction, ExtractError> {
    let (result, attempts) = with_retry(retry, || backend.complete(request));
    match result {
        Ok(raw_text) => Ok(RawExtraction {
            note_id: note_id.to_string(),
            raw_text,
            attempt_count: attempts,
        }),
        Err(e @ BackendError::Auth { .. }) => Err(ExtractError::Auth(e.to_string())),
        Err(e) if e.is_retryable() => Err(ExtractError::Exhausted {
            attempts,
            last_status: e.status(),
            message: e.to_string(),
        }),
        Err(source) => Err(ExtractError::Rejected { attempts, source }),
    }
}

/// Outcome for one note of a corpus run.
#[derive(Debug, Clone, PartialEq)]
pub enum NoteOutcome {
    Parsed {
        raw: RawExtraction,
        parsed: Parsed,
    },
    Unparseable {
        raw: RawExtraction,
        error: ParseError,
    },
    Failed(ExtractError),
    /// Not attempted because the run aborted on an authentication failure.
    Skipped,
}

/// Prompts, extracts and parses every note with at most `parallel` requests
/// in flight. Outcomes come back in corpus order regardless of completion
/// order. An authentication failure stops new requests from being issued.
pub fn extract_corpus(
    notes: &[ClinicalNote],
    template: &PromptTemplate,
    model_id: &str,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    parallel: usize,
) -> Vec<NoteOutcome> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<NoteOutcome>>> = notes.iter().map(|_| Mutex::new(None)).collect();

    let worker = || loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let idx = next.fetch_add(1, Ordering::SeqCst);
        let Some(note) = notes.get(idx) else { break };
        let request = template.build(note, model_id);
        let outcome = match extract(&note.note_id, &request, backend, retry) {
            Ok(raw) => match parse_output_with_diagnostics(&raw) {
                Ok(parsed) => NoteOutcome::Parsed { raw, parsed },
                Err(error) => NoteOutcome::Unparseable { raw, error },
            },
            Err(e) => {
                if matches!(e, ExtractError::Auth(_)) {
                    abort.store(true, Ordering::SeqCst);
                }
                NoteOutcome::Failed(e)
            }
        };
        *slots[idx].lock().expect("slot lock") = Some(outcome);
    };

    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, notes.len().max(1)) {
            s.spawn(worker);
        }
    });

    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .unwrap_or(NoteOutcome::Skipped)
        })
        .collect()
}
