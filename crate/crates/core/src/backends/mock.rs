//! Deterministic backends for tests and offline pipeline runs.
//!
//! Mock models count one token per character of output.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{
    BackendError, GenerationRequest, GenerationResult, LanguageModel, RetrievalRequest, Retriever, Role,
    StopReason,
};
use crate::metrics::normalize_answer;
use crate::transcript::{scan_blocks, BlockKind, Document};

/// Applies stop sequences and the token budget to a scripted completion the
/// way a real server would.
pub fn complete_from_script(script: &str, req: &GenerationRequest) -> GenerationResult {
    let first_stop = req
        .stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| script.find(s.as_str()).map(|at| (at, s)))
        .min_by_key(|(at, _)| *at);
    let (text, mut stop_reason, mut matched_stop) = match first_stop {
        Some((at, stop)) => (&script[..at], StopReason::StopSequence, Some(stop.clone())),
        None => (script, StopReason::EndOfMessage, None),
    };
    let budget = req.max_tokens as usize;
    let mut text = text.to_string();
    if text.chars().count() > budget {
        text = text.chars().take(budget).collect();
        stop_reason = StopReason::MaxTokens;
        matched_stop = None;
    }
    let tokens_used = text.chars().count() as u32;
    GenerationResult { text, stop_reason, matched_stop, tokens_used }
}

/// Replies from a fixed queue, one entry per call.
#[derive(Debug, Default)]
pub struct ScriptedModel {
    queue: Mutex<VecDeque<String>>,
}

impl ScriptedModel {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { queue: Mutex::new(responses.into_iter().map(Into::into).collect()) }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

#[async_trait]
impl LanguageModel for ScriptedModel {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let next = self.queue.lock().unwrap().pop_front();
        next.map(|s| complete_from_script(&s, req)).ok_or(BackendError::MockExhausted)
    }
}

type ReplyFn = dyn Fn(&GenerationRequest) -> Option<String> + Send + Sync;

/// Replies with the output of a closure over the request; `None` maps to
/// [`BackendError::MockExhausted`].
pub struct FnModel {
    reply: Box<ReplyFn>,
}

impl FnModel {
    pub fn new(reply: impl Fn(&GenerationRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        Self { reply: Box::new(reply) }
    }
}

#[async_trait]
impl LanguageModel for FnModel {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        (self.reply)(req).map(|s| complete_from_script(&s, req)).ok_or(BackendError::MockExhausted)
    }
}

/// One captured model call.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub request: GenerationRequest,
    pub output: Option<String>,
}

/// Wraps a model and records every request with the text it produced.
pub struct RecordingModel<M> {
    inner: M,
    calls: Mutex<Vec<RecordedCall>>,
}

impl<M> RecordingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn take_calls(&self) -> Vec<RecordedCall> {
        std::mem::take(&mut *self.calls.lock().unwrap())
    }
}

#[async_trait]
impl<M: LanguageModel> LanguageModel for RecordingModel<M> {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let out = self.inner.generate(req).await;
        self.calls
            .lock()
            .unwrap()
            .push(RecordedCall { request: req.clone(), output: out.as_ref().ok().map(|r| r.text.clone()) });
        out
    }
}

/// Returns canned documents per query (exact match after trimming); unknown
/// queries get the fallback list. Selected call numbers fail with a
/// transport error.
#[derive(Debug, Default)]
pub struct ScriptedRetriever {
    by_query: HashMap<String, Vec<Document>>,
    fallback: Vec<Document>,
    fail_calls: HashSet<usize>,
    calls: Mutex<usize>,
}

impl ScriptedRetriever {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_query(mut self, query: &str, docs: Vec<Document>) -> Self {
        self.by_query.insert(query.trim().to_string(), docs);
        self
    }

    pub fn with_fallback(mut self, docs: Vec<Document>) -> Self {
        self.fallback = docs;
        self
    }

    /// Makes the `n`-th call (0-based) fail.
    pub fn failing_on(mut self, n: usize) -> Self {
        self.fail_calls.insert(n);
        self
    }

    pub fn call_count(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

#[async_trait]
impl Retriever for ScriptedRetriever {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        let n = {
            let mut calls = self.calls.lock().unwrap();
            *calls += 1;
            *calls - 1
        };
        if self.fail_calls.contains(&n) {
            return Err(BackendError::Transport(format!("scripted failure on call {n}")));
        }
        let docs = self.by_query.get(req.query.trim()).unwrap_or(&self.fallback);
        Ok(docs
            .iter()
            .take(req.top_k)
            .enumerate()
            .map(|(i, d)| Document { rank: i as u32 + 1, ..d.clone() })
            .collect())
    }
}

/// 64-bit FNV-1a over a seed and a list of text parts.
pub fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(&seed.to_le_bytes());
    for p in parts {
        feed(p.as_bytes());
        feed(&[0xff]);
    }
    h
}

fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    let Some(start) = prompt.find(header) else {
        return "";
    };
    let rest = &prompt[start + header.len()..];
    let end = rest.find("\n### ").unwrap_or(rest.len());
    rest[..end].trim()
}

fn content_words(text: &str) -> Vec<String> {
    normalize_answer(text).split_whitespace().filter(|w| w.len() > 2).map(str::to_string).collect()
}

fn last_block(text: &str, kind: BlockKind) -> Option<String> {
    let open = text.rfind(kind.open_tag())?;
    scan_blocks(&text[open..]).ok()?.into_iter().find(|b| b.kind == kind).map(|b| b.body)
}

/// Seeded stand-in for a search policy. Decisions are a pure function of the
/// seeds (own and per-request), the question and the trajectory so far, so
/// concurrent use stays deterministic. It searches with a window of question
/// words and answers with the title of the latest retrieved document.
#[derive(Debug, Clone)]
pub struct SeededPolicy {
    pub seed: u64,
}

impl SeededPolicy {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn script(&self, request_seed: Option<u64>, question: &str, prefix: &str) -> String {
        let rounds = prefix.matches("<search>").count();
        let salt = request_seed.map(|s| s.to_string()).unwrap_or_default();
        let h = stable_hash(self.seed, &[&salt, question, prefix]);
        let answer_now = rounds >= 1 && (h % 100) < 30 + 15 * rounds as u64;
        let words = content_words(question);
        if answer_now || words.is_empty() || rounds >= 8 {
            let answer = last_block(prefix, BlockKind::Result)
                .and_then(|r| {
                    let start = r.find('"')? + 1;
                    let len = r[start..].find('"')?;
                    Some(r[start..start + len].to_string())
                })
                .unwrap_or_else(|| "unknown".to_string());
            return format!(
                "<think> Based on what I found, the answer is {answer}. </think>\n<answer> The final answer is \\boxed{{{answer}}}. </answer>"
            );
        }
        let width = 2 + (h >> 20) as usize % 2;
        let start = (h >> 8) as usize % words.len();
        let query = (0..width.min(words.len()))
            .map(|i| words[(start + i) % words.len()].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        format!("<think> I should look up {query}. </think>\n<search> {query} </search>")
    }
}

#[async_trait]
impl LanguageModel for SeededPolicy {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let question = req.last(Role::User).unwrap_or_default();
        let prefix = req.last(Role::Assistant).unwrap_or_default();
        Ok(complete_from_script(&self.script(req.seed, question, prefix), req))
    }
}

/// Seeded stand-in for the usefulness evaluator: a round is useful when its
/// result contains every word of the golden answer; otherwise a seeded coin
/// decides with probability 1/4.
#[derive(Debug, Clone)]
pub struct SeededJudge {
    pub seed: u64,
}

impl SeededJudge {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

#[async_trait]
impl LanguageModel for SeededJudge {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let prompt = req.last(Role::User).unwrap_or_default();
        let golden = section(prompt, "### Golden answer");
        let context = section(prompt, "### Agent's search process up to the current search round");
        let result = last_block(context, BlockKind::Result).unwrap_or_default();
        let result_norm = format!(" {} ", normalize_answer(&result));
        let golden_words = content_words(golden);
        let covered =
            !golden_words.is_empty() && golden_words.iter().all(|w| result_norm.contains(&format!(" {w} ")));
        let (score, why) = if covered {
            (1, "the query result contains the expected information")
        } else if stable_hash(self.seed, &[context]).is_multiple_of(4) {
            (1, "the query intent is necessary and the result addresses it")
        } else {
            (0, "the query result does not contain the expected information")
        };
        let script = format!("<answer> {score} </answer>\n<explanation> {why} </explanation>");
        Ok(complete_from_script(&script, req))
    }
}

/// Seeded stand-in for the query refiner: extends the current query with a
/// question word it lacks, or falls back to the full question.
#[derive(Debug, Clone)]
pub struct SeededRefiner {
    pub seed: u64,
}

impl SeededRefiner {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

#[async_trait]
impl LanguageModel for SeededRefiner {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let prompt = req.last(Role::User).unwrap_or_default();
        let question = section(prompt, "### User's question");
        let context = section(prompt, "### Agent's search process up to the current search round");
        let query = last_block(context, BlockKind::Search).unwrap_or_default();
        let have: HashSet<String> = content_words(&query).into_iter().collect();
        let missing: Vec<String> =
            content_words(question).into_iter().filter(|w| !have.contains(w)).collect();
        let refined = if missing.is_empty() {
            question.to_string()
        } else {
            let pick = stable_hash(self.seed, &[question, &query]) as usize % missing.len();
            format!("{} {}", query.trim(), missing[pick])
        };
        let script = format!(
            "<search> {refined} </search>\n<explanation> added missing intent to the query </explanation>"
        );
        Ok(complete_from_script(&script, req))
    }
}
