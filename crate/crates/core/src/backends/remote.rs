use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::chat::check_status;
use super::{env_secret, rank_documents, BackendError, RetrievalRequest, Retriever, RetryPolicy};
use crate::transcript::{DocSource, Document};

/// Client for a retrieval service speaking
/// `POST /retrieve {"query", "top_k"} -> {"documents": [{id, title, content, score}]}`.
#[derive(Debug, Clone)]
pub struct RetrievalServiceClient {
    http: reqwest::Client,
    base_url: String,
    retry: RetryPolicy,
}

impl RetrievalServiceClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { http: reqwest::Client::new(), base_url: base_url.into(), retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self) -> String {
        format!("{}/retrieve", self.base_url.trim_end_matches('/'))
    }

    async fn send_once(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        let resp = self
            .http
            .post(self.url())
            .json(&json!({ "query": req.query, "top_k": req.top_k }))
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        check_status(status, &body)?;
        parse_service_response(&body, req.top_k)
    }
}

#[derive(Deserialize)]
struct ServiceResponse {
    documents: Vec<ServiceDocument>,
}

#[derive(Deserialize)]
struct ServiceDocument {
    #[serde(default)]
    id: String,
    #[serde(default)]
    title: String,
    content: String,
    #[allow(dead_code)]
    #[serde(default)]
    score: Option<f64>,
}

pub(crate) fn parse_service_response(body: &str, top_k: usize) -> Result<Vec<Document>, BackendError> {
    let resp: ServiceResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("unexpected retrieval response: {e}")))?;
    Ok(rank_documents(
        resp.documents.into_iter().map(|d| Document {
            id: d.id,
            title: d.title,
            content: d.content,
            source: DocSource::RetrievalService,
            rank: 0,
        }),
        top_k,
    ))
}

#[async_trait]
impl Retriever for RetrievalServiceClient {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        if req.top_k == 0 {
            return Err(BackendError::InvalidRequest("top_k must be >= 1".into()));
        }
        self.retry.run(|| self.send_once(req)).await
    }
}

/// Web-search client for Serper-style JSON APIs:
/// `POST {endpoint} {"q", "num"}` with an `X-API-KEY` header, answering
/// `{"organic": [{title, link, snippet}]}`. Snippets become document content.
#[derive(Debug, Clone)]
pub struct WebSearchClient {
    http: reqwest::Client,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

impl WebSearchClient {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
        }
    }

    /// Uses the key in `SEARCH_API_KEY` (or another variable).
    pub fn from_env(endpoint: impl Into<String>, var: &str) -> Result<Self, BackendError> {
        Ok(Self::new(endpoint, env_secret(var)?))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    async fn send_once(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .header("X-API-KEY", &self.api_key)
            .json(&json!({ "q": req.query, "num": req.top_k }))
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        check_status(status, &body)?;
        parse_web_response(&body, req.top_k)
    }
}

#[derive(Deserialize)]
struct WebResponse {
    #[serde(default)]
    organic: Vec<WebResult>,
}

#[derive(Deserialize)]
struct WebResult {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
}

pub(crate) fn parse_web_response(body: &str, top_k: usize) -> Result<Vec<Document>, BackendError> {
    let resp: WebResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("unexpected search response: {e}")))?;
    Ok(rank_documents(
        resp.organic.into_iter().map(|r| Document {
            id: r.link,
            title: r.title,
            content: r.snippet,
            source: DocSource::WebSearch,
            rank: 0,
        }),
        top_k,
    ))
}

#[async_trait]
impl Retriever for WebSearchClient {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        if req.top_k == 0 {
            return Err(BackendError::InvalidRequest("top_k must be >= 1".into()));
        }
        self.retry.run(|| self.send_once(req)).await
    }
}
