use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};

use querywise::agent_loop::{run_rollout, AgentOptions};
use querywise::backends::{
    BackendError, ChatClient, GenerationRequest, LanguageModel, Message, RetrievalRequest,
    RetrievalServiceClient, Retriever, RetryPolicy, StopReason, WebSearchClient,
};
use querywise::transcript::{DocSource, Step};

#[derive(Default)]
struct Stub {
    replies: Mutex<VecDeque<(u16, String)>>,
    seen: Mutex<Vec<(HeaderMap, Value)>>,
}

impl Stub {
    fn reply(&self, status: u16, body: impl Into<String>) {
        self.replies.lock().unwrap().push_back((status, body.into()));
    }

    fn seen(&self) -> Vec<(HeaderMap, Value)> {
        self.seen.lock().unwrap().clone()
    }
}

async fn handle(State(stub): State<Arc<Stub>>, headers: HeaderMap, body: String) -> (StatusCode, String) {
    let parsed = serde_json::from_str(&body).unwrap_or(Value::Null);
    stub.seen.lock().unwrap().push((headers, parsed));
    let (status, body) = stub.replies.lock().unwrap().pop_front().unwrap_or((500, "no reply queued".into()));
    (StatusCode::from_u16(status).unwrap(), body)
}

async fn serve() -> (String, Arc<Stub>) {
    let stub = Arc::new(Stub::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(handle))
        .route("/retrieve", post(handle))
        .route("/search", post(handle))
        .with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), stub)
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries, base_delay: Duration::from_millis(1) }
}

fn chat_body(content: &str, finish: &str, extra: Value) -> String {
    let mut choice = json!({"message": {"role": "assistant", "content": content}, "finish_reason": finish});
    if let Value::Object(map) = extra {
        choice.as_object_mut().unwrap().extend(map);
    }
    json!({"choices": [choice], "usage": {"completion_tokens": 7}}).to_string()
}

fn agent_request() -> GenerationRequest {
    let mut req = GenerationRequest::new(vec![Message::system("sys"), Message::user("question")], 128);
    req.stop_sequences = vec!["</search>".into(), "</answer>".into()];
    req.temperature = 0.5;
    req.seed = Some(42);
    req
}

#[tokio::test]
async fn chat_request_carries_contract_fields() {
    let (base, stub) = serve().await;
    stub.reply(200, chat_body("<search> q", "stop", json!({"stop_reason": "</search>"})));
    let client =
        ChatClient::new(format!("{base}/v1/chat/completions"), "policy-model").with_api_key("secret");
    let out = client.generate(&agent_request()).await.unwrap();
    assert_eq!(out.text, "<search> q");
    assert_eq!(out.stop_reason, StopReason::StopSequence);
    assert_eq!(out.matched_stop.as_deref(), Some("</search>"));
    assert_eq!(out.tokens_used, 7);

    let (headers, body) = &stub.seen()[0];
    assert_eq!(headers["authorization"], "Bearer secret");
    assert_eq!(body["model"], "policy-model");
    assert_eq!(body["max_tokens"], 128);
    assert_eq!(body["seed"], 42);
    assert_eq!(body["stop"], json!(["</search>", "</answer>"]));
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "question");
}

#[tokio::test]
async fn chat_retries_transient_statuses_only() {
    let (base, stub) = serve().await;
    stub.reply(503, "busy");
    stub.reply(429, "slow down");
    stub.reply(200, chat_body("<answer> \\boxed{x}", "stop", json!({})));
    let client = ChatClient::new(format!("{base}/v1/chat/completions"), "m").with_retry(fast_retry(2));
    let out = client.generate(&agent_request()).await.unwrap();
    assert_eq!(out.matched_stop.as_deref(), Some("</answer>"));
    assert_eq!(stub.seen().len(), 3);

    stub.reply(400, "bad request");
    let err = client.generate(&agent_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");
    assert_eq!(stub.seen().len(), 4);
}

#[tokio::test]
async fn chat_gives_up_after_retry_budget() {
    let (base, stub) = serve().await;
    for _ in 0..3 {
        stub.reply(500, "down");
    }
    let client = ChatClient::new(format!("{base}/v1/chat/completions"), "m").with_retry(fast_retry(1));
    let err = client.generate(&agent_request()).await.unwrap_err();
    assert!(err.is_transport());
    assert_eq!(stub.seen().len(), 2);
}

#[tokio::test]
async fn chat_echoed_stop_and_length_finish() {
    let (base, stub) = serve().await;
    stub.reply(200, chat_body("<search> q </search>", "stop", json!({})));
    stub.reply(200, chat_body("<think> long", "length", json!({})));
    let client = ChatClient::new(format!("{base}/v1/chat/completions"), "m");
    let out = client.generate(&agent_request()).await.unwrap();
    assert_eq!(out.text, "<search> q ");
    assert_eq!(out.matched_stop.as_deref(), Some("</search>"));
    let out = client.generate(&agent_request()).await.unwrap();
    assert_eq!(out.stop_reason, StopReason::MaxTokens);
}

#[tokio::test]
async fn chat_malformed_body_is_protocol_error() {
    let (base, stub) = serve().await;
    stub.reply(200, "{\"choices\": []}");
    let client = ChatClient::new(format!("{base}/v1/chat/completions"), "m").with_retry(fast_retry(3));
    let err = client.generate(&agent_request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)));
    assert_eq!(stub.seen().len(), 1);
}

#[tokio::test]
async fn unreachable_server_is_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = ChatClient::new(format!("http://{addr}/v1/chat/completions"), "m").with_retry(fast_retry(0));
    assert!(client.generate(&agent_request()).await.unwrap_err().is_transport());
}

#[tokio::test]
async fn retrieval_service_ranks_and_caps() {
    let (base, stub) = serve().await;
    stub.reply(
        200,
        json!({"documents": [
            {"id": "a", "title": "A", "content": "alpha", "score": 2.0},
            {"id": "b", "title": "B", "content": "   ", "score": 1.5},
            {"id": "c", "title": "C", "content": "gamma", "score": 1.0},
            {"id": "d", "title": "D", "content": "delta", "score": 0.1}
        ]})
        .to_string(),
    );
    let client = RetrievalServiceClient::new(format!("{base}/"));
    let docs = client.retrieve(&RetrievalRequest::new("who", 2)).await.unwrap();
    let ids: Vec<_> = docs.iter().map(|d| (d.id.as_str(), d.rank)).collect();
    assert_eq!(ids, [("a", 1), ("c", 2)]);
    assert!(docs.iter().all(|d| d.source == DocSource::RetrievalService));
    assert_eq!(stub.seen()[0].1, json!({"query": "who", "top_k": 2}));

    assert!(matches!(
        client.retrieve(&RetrievalRequest::new("who", 0)).await,
        Err(BackendError::InvalidRequest(_))
    ));
}

#[tokio::test]
async fn retrieval_service_status_mapping() {
    let (base, stub) = serve().await;
    stub.reply(502, "gateway");
    stub.reply(200, json!({"documents": []}).to_string());
    let client = RetrievalServiceClient::new(&base).with_retry(fast_retry(1));
    assert!(client.retrieve(&RetrievalRequest::new("q", 3)).await.unwrap().is_empty());

    stub.reply(404, "missing");
    let err = client.retrieve(&RetrievalRequest::new("q", 3)).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)));
}

#[tokio::test]
async fn web_search_sends_key_and_maps_snippets() {
    let (base, stub) = serve().await;
    stub.reply(
        200,
        json!({"organic": [
            {"title": "Kevin McCarthy (actor)", "link": "https://example.org/actor", "snippet": "born February 15, 1914"},
            {"title": "Empty", "link": "https://example.org/empty", "snippet": ""}
        ]})
        .to_string(),
    );
    let client = WebSearchClient::new(format!("{base}/search"), "k-123");
    let docs = client.retrieve(&RetrievalRequest::new("kevin mccarthy actor", 5)).await.unwrap();
    assert_eq!(docs.len(), 1);
    assert_eq!(docs[0].id, "https://example.org/actor");
    assert_eq!(docs[0].content, "born February 15, 1914");
    assert_eq!(docs[0].source, DocSource::WebSearch);
    let (headers, body) = &stub.seen()[0];
    assert_eq!(headers["x-api-key"], "k-123");
    assert_eq!(body, &json!({"q": "kevin mccarthy actor", "num": 5}));
}

#[tokio::test]
async fn web_search_without_key_fails_fast() {
    let err = WebSearchClient::from_env("http://127.0.0.1:9/search", "QUERYWISE_TEST_UNSET_KEY").unwrap_err();
    assert!(matches!(err, BackendError::MissingCredential(v) if v == "QUERYWISE_TEST_UNSET_KEY"));
}

#[tokio::test]
async fn rollout_over_http_backends() {
    let (base, stub) = serve().await;
    stub.reply(
        200,
        chat_body(
            "<think> look it up </think>\n<search> mona lisa painter",
            "stop",
            json!({"stop_reason": "</search>"}),
        ),
    );
    stub.reply(
        200,
        json!({"documents": [{"id": "1", "title": "Mona Lisa", "content": "painted by Leonardo"}]})
            .to_string(),
    );
    stub.reply(
        200,
        chat_body(
            "<think> found </think>\n<answer> \\boxed{Leonardo da Vinci}",
            "stop",
            json!({"stop_reason": "</answer>"}),
        ),
    );
    let policy = ChatClient::new(format!("{base}/v1/chat/completions"), "m");
    let retriever = RetrievalServiceClient::new(&base);
    let t = run_rollout("Who painted the Mona Lisa?", &policy, &retriever, &AgentOptions::default())
        .await
        .unwrap();
    assert!(!t.truncated);
    assert_eq!(t.boxed_answer(), Some("Leonardo da Vinci"));
    let Step::Search(s) = &t.steps[0] else { panic!("expected search") };
    assert_eq!(s.query, "mona lisa painter");
    assert_eq!(s.observation.as_ref().unwrap().documents[0].title, "Mona Lisa");

    // the second policy call sees the first round as an assistant prefix
    let seen = stub.seen();
    let prefix = seen[2].1["messages"][2]["content"].as_str().unwrap();
    assert!(prefix.contains("<search> mona lisa painter </search>"));
    assert!(prefix.contains("<result>"));
}
