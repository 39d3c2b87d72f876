//! Text generation and retrieval clients.
//!
//! Every model call (policy, evaluator, refiner) goes through
//! [`LanguageModel`]; every search goes through [`Retriever`]. HTTP clients,
//! an in-memory lexical index and deterministic mocks implement them.

mod chat;
mod lexical;
pub mod mock;
mod remote;

use std::future::Future;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::Document;

pub use chat::ChatClient;
pub use lexical::{CorpusError, CorpusRecord, LexicalIndex};
pub use remote::{RetrievalServiceClient, WebSearchClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub stop_sequences: Vec<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>, max_tokens: u32) -> Self {
        Self { messages, stop_sequences: Vec::new(), max_tokens, temperature: 0.0, seed: None }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return Err(BackendError::InvalidRequest("system prompt must be the first message".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Content of the last message with the given role.
    pub fn last(&self, role: Role) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == role).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopSequence,
    MaxTokens,
    EndOfMessage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    /// Continuation text, excluding any matched stop sequence.
    pub text: String,
    pub stop_reason: StopReason,
    pub matched_stop: Option<String>,
    /// Completion tokens consumed, as reported or estimated by the backend.
    pub tokens_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub query: String,
    pub top_k: usize,
}

impl RetrievalRequest {
    pub fn new(query: impl Into<String>, top_k: usize) -> Self {
        Self { query: query.into(), top_k }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock script exhausted")]
    MockExhausted,
    #[error("lexical index was built over an empty corpus")]
    EmptyCorpus,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

impl BackendError {
    /// Transport-class failures: network problems and exhausted mocks.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::MockExhausted)
    }
}

#[async_trait]
pub trait LanguageModel: Send + Sync {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

#[async_trait]
pub trait Retriever: Send + Sync {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError>;
}

#[async_trait]
impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req).await
    }
}

#[async_trait]
impl<T: Retriever + ?Sized> Retriever for std::sync::Arc<T> {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        (**self).retrieve(req).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying transport failures with exponential backoff.
    /// Protocol errors are returned immediately.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> Result<T, BackendError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let mut attempt = 0;
        loop {
            match op().await {
                Err(e) if e.is_transport() && attempt < self.max_retries => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying after transport failure");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Reads a secret from the environment.
pub(crate) fn env_secret(var: &str) -> Result<String, BackendError> {
    std::env::var(var).map_err(|_| BackendError::MissingCredential(var.to_string()))
}

/// Drops empty documents and assigns ranks 1..k.
pub(crate) fn rank_documents(docs: impl IntoIterator<Item = Document>, top_k: usize) -> Vec<Document> {
    docs.into_iter()
        .filter(|d| !d.content.trim().is_empty())
        .take(top_k)
        .enumerate()
        .map(|(i, mut d)| {
            d.rank = i as u32 + 1;
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn request_validation() {
        let ok = GenerationRequest::new(vec![Message::system("s"), Message::user("u")], 1);
        assert!(ok.validate().is_ok());
        assert!(GenerationRequest::new(vec![], 1).validate().is_err());
        assert!(GenerationRequest::new(vec![Message::user("u")], 0).validate().is_err());
        let late_system = GenerationRequest::new(vec![Message::user("u"), Message::system("s")], 4);
        assert!(late_system.validate().is_err());
    }

    #[tokio::test]
    async fn retries_transport_but_not_protocol() {
        let policy = RetryPolicy { max_retries: 2, base_delay: Duration::from_millis(1) };
        let calls = AtomicU32::new(0);
        let res: Result<(), _> = policy
            .run(|| async {
                calls.fetch_add(1, Ordering::SeqCst);
                Err(BackendError::Transport("down".into()))
            })
            .await;
        assert!(res.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        calls.store(0, Ordering::SeqCst);
        let res: Result<(), _> = policy
            .run(|| async {
                calls.fetch_add(1, Ordering::SeqCst);
                Err(BackendError::Protocol("bad".into()))
            })
            .await;
        assert!(res.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        calls.store(0, Ordering::SeqCst);
        let res = policy
            .run(|| async {
                if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                    Err(BackendError::Transport("blip".into()))
                } else {
                    Ok(7)
                }
            })
            .await;
        assert_eq!(res.unwrap(), 7);
    }
}
