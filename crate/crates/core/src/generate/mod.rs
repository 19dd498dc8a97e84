//! Generation backends behind one contract.
//!
//! Outputs are capped at `max_new_tokens` whitespace tokens. The cap is
//! applied locally regardless of backend, so every backend produces records
//! of the same shape.

mod remote;
mod template;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptError;

pub use remote::{RemoteBackend, RemoteConfig, RemoteRequest, RemoteResponse};
pub use template::{template_generate, TemplateBackend, CLEAR_SENTENCE};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 128;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend protocol error: {0}")]
    BackendProtocolError(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl GenerateError {
    /// True for failures caused by the remote service rather than the input.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            GenerateError::BackendUnreachable(_) | GenerateError::BackendProtocolError(_) | GenerateError::Timeout(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub request_id: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, request_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            request_id: request_id.into(),
        }
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: usize) -> Self {
        self.max_new_tokens = max_new_tokens;
        self
    }

    fn validate(&self) -> Result<(), GenerateError> {
        if self.max_new_tokens < 1 {
            return Err(GenerateError::InvalidRequest(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.prompt.trim().is_empty() {
            return Err(GenerateError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }
}

/// Output record of the `generate` stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedFindings {
    pub study_id: String,
    pub text: String,
    pub backend: String,
    pub token_count: usize,
}

pub trait GenerationBackend: Send + Sync {
    /// Short identifier recorded in every output.
    fn name(&self) -> &str;

    /// Raw completion for a request, before the token cap is applied.
    fn complete(&self, request: &GenerationRequest) -> Result<String, GenerateError>;
}

/// Whitespace-delimited token count.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Trims `text` and cuts it after its `max_tokens`-th whitespace token,
/// keeping the original spacing of what remains.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let text = text.trim();
    if max_tokens == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_token = false;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_token {
                in_token = false;
                if seen == max_tokens {
                    return &text[..idx];
                }
            }
        } else if !in_token {
            in_token = true;
            seen += 1;
        }
    }
    text
}

pub fn generate(
    study_id: &str,
    request: &GenerationRequest,
    backend: &dyn GenerationBackend,
) -> Result<GeneratedFindings, GenerateError> {
    request.validate()?;
    let raw = backend.complete(request)?;
    let text = truncate_tokens(&raw, request.max_new_tokens).to_owned();
    Ok(GeneratedFindings {
        study_id: study_id.to_owned(),
        token_count: count_tokens(&text),
        text,
        backend: backend.name().to_owned(),
    })
}

/// Runs requests on at most `concurrency` worker threads. Results come back
/// in input order.
pub fn generate_batch(
    jobs: &[(String, GenerationRequest)],
    backend: &dyn GenerationBackend,
    concurrency: usize,
) -> Vec<Result<GeneratedFindings, GenerateError>> {
    let workers = concurrency.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(|(id, req)| generate(id, req, backend)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, req)) = jobs.get(i) else { break };
                if tx.send((i, generate(id, req, backend))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<GeneratedFindings, GenerateError>>> = (0..jobs.len()).map(|_| None).collect();
    for (i, result) in rx {
        slots[i] = Some(result);
    }
    slots
        .into_iter()
        .map(|r| r.expect("every job produces a result"))
        .collect()
}
