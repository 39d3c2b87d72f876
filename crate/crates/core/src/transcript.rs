//! Tagged trajectory grammar.
//!
//! Agent output is a sequence of `<think>`, `<search>`, `<result>` and
//! `<answer>` blocks. A well-formed transcript cycles through
//! `think? search result` rounds and ends with at most one `think? answer`.
//! Text between blocks is tolerated and dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default marker that separates documents inside a `<result>` body.
pub const DEFAULT_DOC_DELIMITER: &str = "result:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocSource {
    LocalCorpus,
    RetrievalService,
    WebSearch,
    /// Recovered from a `<result>` body of a third-party transcript.
    Transcript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    pub source: DocSource,
    /// 1-based position within its retrieval round.
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(rename = "raw_result_text")]
    pub raw_text: String,
    #[serde(default)]
    pub documents: Vec<Document>,
}

impl Observation {
    /// Observation recorded when the retrieval backend failed for a round.
    pub fn error_sentinel(reason: &str) -> Self {
        Self { raw_text: format!("search error: {reason}"), documents: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStep {
    #[serde(default)]
    pub thought: String,
    pub query: String,
    /// `None` only for a trailing search whose result has not been produced yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerStep {
    #[serde(default)]
    pub thought: String,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxed_answer: Option<String>,
}

impl AnswerStep {
    pub fn new(thought: impl Into<String>, answer_text: impl Into<String>) -> Self {
        let answer_text = answer_text.into();
        let boxed_answer = extract_boxed(&answer_text);
        Self { thought: thought.into(), answer_text, boxed_answer }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Step {
    Search(SearchStep),
    Answer(AnswerStep),
}

impl Step {
    pub fn as_search(&self) -> Option<&SearchStep> {
        match self {
            Step::Search(s) => Some(s),
            Step::Answer(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_answer: Option<String>,
    /// Set when generation stopped before an answer was produced.
    pub truncated: bool,
    /// A closing `<think>` block that no search or answer followed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trailing_thought: Option<String>,
}

impl Trajectory {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            id: None,
            question: question.into(),
            steps: Vec::new(),
            golden_answer: None,
            truncated: true,
            trailing_thought: None,
        }
    }

    pub fn search_round_count(&self) -> usize {
        self.search_steps().count()
    }

    pub fn search_steps(&self) -> impl Iterator<Item = &SearchStep> {
        self.steps.iter().filter_map(Step::as_search)
    }

    pub fn answer(&self) -> Option<&AnswerStep> {
        match self.steps.last() {
            Some(Step::Answer(a)) => Some(a),
            _ => None,
        }
    }

    pub fn boxed_answer(&self) -> Option<&str> {
        self.answer().and_then(|a| a.boxed_answer.as_deref())
    }

    /// Checks the structural invariants: a single trailing answer step and
    /// `truncated` set exactly when no answer exists.
    pub fn is_consistent(&self) -> bool {
        let answers = self.steps.iter().filter(|s| matches!(s, Step::Answer(_))).count();
        let answer_last = matches!(self.steps.last(), Some(Step::Answer(_)));
        let queries_ok = self.search_steps().all(|s| !s.query.trim().is_empty());
        answers <= 1 && (answers == 0 || answer_last) && self.truncated == (answers == 0) && queries_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Think,
    Search,
    Result,
    Answer,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] =
        [BlockKind::Think, BlockKind::Search, BlockKind::Result, BlockKind::Answer];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Think => "think",
            BlockKind::Search => "search",
            BlockKind::Result => "result",
            BlockKind::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            BlockKind::Think => "<think>",
            BlockKind::Search => "<search>",
            BlockKind::Result => "<result>",
            BlockKind::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            BlockKind::Think => "</think>",
            BlockKind::Search => "</search>",
            BlockKind::Result => "</result>",
            BlockKind::Answer => "</answer>",
        }
    }
}

/// One tag pair with its whitespace-trimmed body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub kind: BlockKind,
    pub body: String,
    /// Byte offset of the opening tag in the source text.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedTranscript {
    #[error("<{tag}> opened at byte {offset} is never closed")]
    Unclosed { tag: &'static str, offset: usize },
    #[error("closing </{tag}> at byte {offset} has no opening tag")]
    StrayClose { tag: &'static str, offset: usize },
    #[error("<{inner}> nested inside <{outer}> at byte {offset}")]
    Nested { outer: &'static str, inner: &'static str, offset: usize },
    #[error("<{tag}> at byte {offset} is out of order, expected {expected}")]
    OutOfOrder { tag: &'static str, offset: usize, expected: &'static str },
    #[error("empty search query at byte {offset}")]
    EmptyQuery { offset: usize },
    #[error("search block at byte {offset} holds more than one query")]
    MultipleQueries { offset: usize },
}

fn tag_at(text: &str, pos: usize) -> Option<(BlockKind, bool)> {
    let rest = &text[pos..];
    BlockKind::ALL.into_iter().find_map(|kind| {
        if rest.starts_with(kind.open_tag()) {
            Some((kind, true))
        } else if rest.starts_with(kind.close_tag()) {
            Some((kind, false))
        } else {
            None
        }
    })
}

/// Splits text into tag blocks. Tags are case-sensitive; glue text between
/// blocks is skipped.
pub fn scan_blocks(text: &str) -> Result<Vec<Block>, MalformedTranscript> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('<') {
        let at = pos + rel;
        let Some((kind, is_open)) = tag_at(text, at) else {
            pos = at + 1;
            continue;
        };
        if !is_open {
            return Err(MalformedTranscript::StrayClose { tag: kind.name(), offset: at });
        }
        let body_start = at + kind.open_tag().len();
        let Some(close_rel) = text[body_start..].find(kind.close_tag()) else {
            return Err(MalformedTranscript::Unclosed { tag: kind.name(), offset: at });
        };
        let body = &text[body_start..body_start + close_rel];
        if let Some((inner_at, inner)) =
            body.match_indices('<').find_map(|(i, _)| tag_at(body, i).map(|(k, _)| (i, k)))
        {
            return Err(MalformedTranscript::Nested {
                outer: kind.name(),
                inner: inner.name(),
                offset: body_start + inner_at,
            });
        }
        blocks.push(Block { kind, body: body.trim().to_string(), offset: at });
        pos = body_start + close_rel + kind.close_tag().len();
    }
    Ok(blocks)
}

/// Validates a search block body as a single non-empty query.
pub fn validate_query(body: &str, offset: usize) -> Result<String, MalformedTranscript> {
    let query = body.trim();
    if query.is_empty() {
        return Err(MalformedTranscript::EmptyQuery { offset });
    }
    if query.lines().filter(|l| !l.trim().is_empty()).count() > 1 {
        return Err(MalformedTranscript::MultipleQueries { offset });
    }
    Ok(query.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    /// Marker separating documents inside a `<result>` body.
    pub doc_delimiter: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { doc_delimiter: DEFAULT_DOC_DELIMITER.to_string() }
    }
}

pub fn parse_trajectory(raw: &str, question: &str) -> Result<Trajectory, MalformedTranscript> {
    parse_trajectory_with(raw, question, &ParseOptions::default())
}

pub fn parse_trajectory_with(
    raw: &str,
    question: &str,
    opts: &ParseOptions,
) -> Result<Trajectory, MalformedTranscript> {
    enum State {
        Open,
        Thought(String),
        AwaitResult,
        Done,
    }

    let mut traj = Trajectory::new(question);
    let mut state = State::Open;

    for block in scan_blocks(raw)? {
        let (tag, offset) = (block.kind.name(), block.offset);
        let out_of_order = |expected| MalformedTranscript::OutOfOrder { tag, offset, expected };
        state = match (state, block.kind) {
            (State::Done, _) => return Err(out_of_order("nothing after <answer>")),
            (State::AwaitResult, BlockKind::Result) => {
                let documents = split_documents(&block.body, &opts.doc_delimiter);
                if let Some(Step::Search(step)) = traj.steps.last_mut() {
                    step.observation = Some(Observation { raw_text: block.body, documents });
                }
                State::Open
            }
            (State::AwaitResult, _) => return Err(out_of_order("<result>")),
            (State::Open, BlockKind::Think) => State::Thought(block.body),
            (State::Thought(_), BlockKind::Think) => return Err(out_of_order("<search> or <answer>")),
            (State::Open | State::Thought(_), BlockKind::Result) => {
                return Err(out_of_order("<think>, <search> or <answer>"))
            }
            (prev @ (State::Open | State::Thought(_)), BlockKind::Search) => {
                let thought = match prev {
                    State::Thought(t) => t,
                    _ => String::new(),
                };
                let query = validate_query(&block.body, offset)?;
                traj.steps.push(Step::Search(SearchStep { thought, query, observation: None }));
                State::AwaitResult
            }
            (prev @ (State::Open | State::Thought(_)), BlockKind::Answer) => {
                let thought = match prev {
                    State::Thought(t) => t,
                    _ => String::new(),
                };
                traj.steps.push(Step::Answer(AnswerStep::new(thought, block.body)));
                State::Done
            }
        };
    }

    match state {
        State::Done => traj.truncated = false,
        State::Thought(t) => traj.trailing_thought = Some(t),
        State::Open | State::AwaitResult => {}
    }
    Ok(traj)
}

/// Splits a `<result>` body into documents on `delimiter` occurrences that
/// start the text or follow whitespace. A leading quoted span in each chunk
/// becomes the document title.
pub fn split_documents(raw: &str, delimiter: &str) -> Vec<Document> {
    let mut cuts = Vec::new();
    if !delimiter.is_empty() {
        for (i, _) in raw.match_indices(delimiter) {
            let boundary = raw[..i].chars().next_back().is_none_or(char::is_whitespace);
            if boundary {
                cuts.push(i);
            }
        }
    }

    let mut chunks = Vec::new();
    let mut start = 0;
    for cut in cuts {
        chunks.push(&raw[start..cut]);
        start = cut + delimiter.len();
    }
    chunks.push(&raw[start..]);

    chunks
        .into_iter()
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .enumerate()
        .map(|(i, chunk)| {
            let (title, content) = split_title(chunk);
            Document {
                id: String::new(),
                title: title.to_string(),
                content: if content.is_empty() { title } else { content }.to_string(),
                source: DocSource::Transcript,
                rank: i as u32 + 1,
            }
        })
        .collect()
}

fn split_title(chunk: &str) -> (&str, &str) {
    for (open, close) in [("\"", "\""), ("\u{201c}", "\u{201d}")] {
        if let Some(rest) = chunk.strip_prefix(open) {
            if let Some(end) = rest.find(close) {
                return (rest[..end].trim(), rest[end + close.len()..].trim());
            }
        }
    }
    ("", chunk)
}

/// Formats retrieved documents into a `<result>` body, clipping each
/// document's content to `char_budget` characters. Returns the body together
/// with the clipped documents as recorded in the observation.
pub fn format_documents(docs: &[Document], char_budget: usize) -> Observation {
    let documents: Vec<Document> = docs
        .iter()
        .map(|d| {
            let mut d = d.clone();
            if d.content.chars().count() > char_budget {
                d.content = d.content.chars().take(char_budget).collect::<String>();
                d.content.truncate(d.content.trim_end().len());
            }
            d
        })
        .collect();
    let raw_text = documents
        .iter()
        .map(|d| {
            if d.title.is_empty() {
                format!("{DEFAULT_DOC_DELIMITER} {}", d.content)
            } else {
                format!("{DEFAULT_DOC_DELIMITER} \"{}\" {}", d.title, d.content)
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    Observation { raw_text, documents }
}

fn push_block(out: &mut String, kind: BlockKind, body: &str) {
    out.push_str(kind.open_tag());
    out.push(' ');
    out.push_str(body);
    out.push(' ');
    out.push_str(kind.close_tag());
    out.push('\n');
}

fn render_step(out: &mut String, step: &Step) {
    match step {
        Step::Search(s) => {
            if !s.thought.is_empty() {
                push_block(out, BlockKind::Think, &s.thought);
            }
            push_block(out, BlockKind::Search, &s.query);
            if let Some(obs) = &s.observation {
                push_block(out, BlockKind::Result, &obs.raw_text);
            }
        }
        Step::Answer(a) => {
            if !a.thought.is_empty() {
                push_block(out, BlockKind::Think, &a.thought);
            }
            push_block(out, BlockKind::Answer, &a.answer_text);
        }
    }
}

pub fn render_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for step in steps {
        render_step(&mut out, step);
    }
    out
}

/// Canonical tagged text for a trajectory, one block per line.
pub fn render_trajectory(t: &Trajectory) -> String {
    let mut out = render_steps(&t.steps);
    if let Some(thought) = &t.trailing_thought {
        push_block(&mut out, BlockKind::Think, thought);
    }
    out
}

/// Rendered history through search round `index`. With `include_result`
/// false the round's `<result>` block is left out.
pub fn render_history(t: &Trajectory, index: usize, include_result: bool) -> String {
    let upto = (index + 1).min(t.steps.len());
    let mut out = render_steps(&t.steps[..upto.saturating_sub(1)]);
    if let Some(step) = t.steps.get(index) {
        match (step, include_result) {
            (Step::Search(s), false) => {
                render_step(&mut out, &Step::Search(SearchStep { observation: None, ..s.clone() }))
            }
            _ => render_step(&mut out, step),
        }
    }
    out
}

/// Content of the last `\boxed{...}` in `text`, with simple LaTeX spacing and
/// text wrappers removed. `None` when absent or unbalanced.
pub fn extract_boxed(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let start = text.rfind(MARKER)? + MARKER.len();
    let inner = balanced_body(&text[start..])?;
    Some(clean_latex(inner))
}

/// Given text just after an opening brace, returns everything up to the
/// matching closing brace. Backslash-escaped braces do not count.
fn balanced_body(text: &str) -> Option<&str> {
    let mut depth = 1usize;
    let mut chars = text.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => {
                chars.next();
            }
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn clean_latex(s: &str) -> String {
    const WRAPPERS: [&str; 4] = ["\\text{", "\\textbf{", "\\mathrm{", "\\mbox{"];
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    'outer: while !rest.is_empty() {
        for w in WRAPPERS {
            if let Some(after) = rest.strip_prefix(w) {
                if let Some(body) = balanced_body(after) {
                    out.push_str(&clean_latex(body));
                    rest = &after[body.len() + 1..];
                    continue 'outer;
                }
            }
        }
        if let Some(after) = rest.strip_prefix("\\ ").or_else(|| rest.strip_prefix("\\,")) {
            out.push(' ');
            rest = after;
            continue;
        }
        let c = rest.chars().next().unwrap_or_default();
        out.push(if c == '~' { ' ' } else { c });
        rest = &rest[c.len_utf8()..];
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Format reward: 1 when the text satisfies the grammar and ends in an
/// answer carrying a non-empty boxed expression.
pub fn check_format(raw: &str) -> u8 {
    match parse_trajectory(raw, "") {
        Ok(t) => u8::from(t.boxed_answer().is_some_and(|b| !b.is_empty())),
        Err(_) => 0,
    }
}

/// Format reward of a structured trajectory, computed on its rendering.
pub fn format_reward(t: &Trajectory) -> u8 {
    check_format(&render_trajectory(t))
}
