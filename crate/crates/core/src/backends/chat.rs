use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{
    env_secret, BackendError, GenerationRequest, GenerationResult, LanguageModel, RetryPolicy, StopReason,
};

/// Client for the OpenAI-compatible chat-completions contract.
#[derive(Debug, Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    /// Reads the bearer token from `var` (conventionally `LLM_API_KEY`).
    pub fn with_api_key_from_env(self, var: &str) -> Result<Self, BackendError> {
        Ok(self.with_api_key(env_secret(var)?))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    async fn send_once(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": req.messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let mut builder = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        check_status(status, &text)?;
        parse_chat_response(&text, req)
    }
}

/// 408, 429 and 5xx are treated as transient; other non-2xx statuses are
/// contract failures.
pub(crate) fn check_status(status: reqwest::StatusCode, body: &str) -> Result<(), BackendError> {
    if status.is_success() {
        return Ok(());
    }
    let snippet: String = body.chars().take(200).collect();
    let msg = format!("HTTP {status}: {snippet}");
    if status.is_server_error()
        || status == reqwest::StatusCode::TOO_MANY_REQUESTS
        || status == reqwest::StatusCode::REQUEST_TIMEOUT
    {
        Err(BackendError::Transport(msg))
    } else {
        Err(BackendError::Protocol(msg))
    }
}

#[async_trait]
impl LanguageModel for ChatClient {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        self.retry.run(|| self.send_once(req)).await
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    /// vLLM-style field naming the stop string that fired.
    #[serde(default)]
    stop_reason: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    completion_tokens: Option<u32>,
}

pub(crate) fn parse_chat_response(
    body: &str,
    req: &GenerationRequest,
) -> Result<GenerationResult, BackendError> {
    let resp: ChatResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("unexpected chat response: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let mut text = choice
        .message
        .content
        .ok_or_else(|| BackendError::Protocol("choices[0].message.content missing".into()))?;
    let tokens_used = resp
        .usage
        .and_then(|u| u.completion_tokens)
        .unwrap_or_else(|| text.chars().count().div_ceil(4) as u32);

    // Some servers echo the stop string; normalise to the exclusive form.
    if let Some(stop) = req.stop_sequences.iter().find(|s| text.ends_with(s.as_str())) {
        let stop = stop.clone();
        text.truncate(text.len() - stop.len());
        return Ok(GenerationResult {
            text,
            stop_reason: StopReason::StopSequence,
            matched_stop: Some(stop),
            tokens_used,
        });
    }

    let (stop_reason, matched_stop) = match choice.finish_reason.as_deref() {
        Some("length") => (StopReason::MaxTokens, None),
        Some("stop") => {
            let reported = choice
                .stop_reason
                .as_ref()
                .and_then(|v| v.as_str())
                .filter(|s| req.stop_sequences.iter().any(|x| x == s))
                .map(str::to_string);
            match reported.or_else(|| infer_stop(&text, &req.stop_sequences)) {
                Some(stop) => (StopReason::StopSequence, Some(stop)),
                None => (StopReason::EndOfMessage, None),
            }
        }
        _ => (StopReason::EndOfMessage, None),
    };
    Ok(GenerationResult { text, stop_reason, matched_stop, tokens_used })
}

/// For closing-tag stop sequences, picks the one whose opening tag is left
/// unclosed at the latest position in `text`.
fn infer_stop(text: &str, stops: &[String]) -> Option<String> {
    stops
        .iter()
        .filter_map(|stop| {
            let name = stop.strip_prefix("</")?.strip_suffix('>')?;
            let open = format!("<{name}>");
            let at = text.rfind(&open)?;
            (!text[at..].contains(stop.as_str())).then_some((at, stop))
        })
        .max_by_key(|(at, _)| *at)
        .map(|(_, s)| s.clone())
}
