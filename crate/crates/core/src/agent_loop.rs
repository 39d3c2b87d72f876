//! Thought–action–observation loop.
//!
//! Each turn the policy continues the rendered trajectory until it closes a
//! `<search>` or `<answer>` block. Searches are executed by the engine and
//! their documents appended as a `<result>` block; the model never writes
//! results itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, GenerationRequest, GenerationResult, LanguageModel, Message, RetrievalRequest, Retriever,
};
use crate::prompts::agent_system_prompt;
use crate::transcript::{
    format_documents, render_trajectory, scan_blocks, validate_query, AnswerStep, BlockKind, Observation,
    SearchStep, Step, Trajectory,
};

pub const STOP_SEQUENCES: [&str; 2] = ["</search>", "</answer>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutLimits {
    pub max_tool_calls: u32,
    pub max_output_tokens: u32,
}

impl RolloutLimits {
    /// Budget used while collecting training rollouts.
    pub const TRAINING: RolloutLimits = RolloutLimits { max_tool_calls: 5, max_output_tokens: 8192 };
    /// Budget used at inference time.
    pub const INFERENCE: RolloutLimits = RolloutLimits { max_tool_calls: 10, max_output_tokens: 16384 };

    pub fn validate(&self) -> Result<(), String> {
        if self.max_tool_calls == 0 {
            return Err("max_tool_calls must be >= 1".into());
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptions {
    pub limits: RolloutLimits,
    /// Documents requested per search round.
    pub top_k: usize,
    /// Per-document character budget inside `<result>`.
    pub observation_char_budget: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            limits: RolloutLimits::INFERENCE,
            top_k: 5,
            observation_char_budget: 1500,
            temperature: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("policy backend failed after {} steps: {source}", partial.steps.len())]
    Backend {
        #[source]
        source: BackendError,
        partial: Box<Trajectory>,
    },
    #[error("cannot resume: {0}")]
    InvalidPrefix(String),
}

impl RolloutError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            RolloutError::Backend { partial, .. } => Some(partial),
            RolloutError::InvalidPrefix(_) => None,
        }
    }
}

/// What one policy turn amounted to.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Turn {
    Search {
        thought: String,
        query: String,
    },
    Answer(AnswerStep),
    /// No complete action: length cut-off, missing tags or a grammar error.
    Incomplete {
        thought: Option<String>,
    },
}

fn interpret_turn(res: &GenerationResult) -> Turn {
    let mut text = res.text.clone();
    if let Some(stop) = &res.matched_stop {
        text.push_str(stop);
    }
    let Ok(blocks) = scan_blocks(&text) else {
        return Turn::Incomplete { thought: None };
    };
    let (thought, action) = match blocks.as_slice() {
        [t, a] if t.kind == BlockKind::Think => (t.body.clone(), Some(a)),
        [a] if a.kind != BlockKind::Think => (String::new(), Some(a)),
        [t] => (t.body.clone(), None),
        _ => return Turn::Incomplete { thought: None },
    };
    match action.map(|a| (a.kind, a)) {
        Some((BlockKind::Search, block)) => match validate_query(&block.body, block.offset) {
            Ok(query) => Turn::Search { thought, query },
            Err(_) => Turn::Incomplete { thought: None },
        },
        Some((BlockKind::Answer, block)) => Turn::Answer(AnswerStep::new(thought, block.body.clone())),
        Some(_) => Turn::Incomplete { thought: None },
        None => Turn::Incomplete { thought: Some(thought) },
    }
}

fn turn_request(traj: &Trajectory, max_tokens: u32, opts: &AgentOptions) -> GenerationRequest {
    let mut messages = vec![Message::system(agent_system_prompt()), Message::user(traj.question.clone())];
    let prefix = render_trajectory(traj);
    if !prefix.is_empty() {
        messages.push(Message::assistant(prefix));
    }
    GenerationRequest {
        messages,
        stop_sequences: STOP_SEQUENCES.iter().map(|s| s.to_string()).collect(),
        max_tokens,
        temperature: opts.temperature,
        seed: opts.seed,
    }
}

async fn observe(retriever: &dyn Retriever, query: &str, opts: &AgentOptions) -> Observation {
    match retriever.retrieve(&RetrievalRequest::new(query, opts.top_k)).await {
        Ok(docs) => format_documents(&docs, opts.observation_char_budget),
        Err(e) => {
            tracing::warn!(query, error = %e, "retrieval failed; recording error observation");
            Observation::error_sentinel(&e.to_string())
        }
    }
}

async fn drive(
    mut traj: Trajectory,
    policy: &dyn LanguageModel,
    retriever: &dyn Retriever,
    opts: &AgentOptions,
) -> Result<Trajectory, RolloutError> {
    traj.truncated = true;
    traj.trailing_thought = None;
    let max_calls = opts.limits.max_tool_calls as usize;
    let mut tokens_used: u32 = 0;

    loop {
        if let Some(Step::Search(step)) = traj.steps.last_mut() {
            if step.observation.is_none() {
                step.observation = Some(observe(retriever, &step.query, opts).await);
            }
        }

        let remaining = opts.limits.max_output_tokens.saturating_sub(tokens_used);
        if remaining == 0 {
            return Ok(traj);
        }
        let req = turn_request(&traj, remaining, opts);
        let res = match policy.generate(&req).await {
            Ok(res) => res,
            Err(source) => return Err(RolloutError::Backend { source, partial: Box::new(traj) }),
        };
        tokens_used = tokens_used.saturating_add(res.tokens_used);

        match interpret_turn(&res) {
            Turn::Search { thought, query } => {
                if traj.search_round_count() >= max_calls {
                    return Ok(traj);
                }
                traj.steps.push(Step::Search(SearchStep { thought, query, observation: None }));
            }
            Turn::Answer(answer) => {
                traj.steps.push(Step::Answer(answer));
                traj.truncated = false;
                return Ok(traj);
            }
            Turn::Incomplete { thought } => {
                traj.trailing_thought = thought.filter(|t| !t.is_empty());
                return Ok(traj);
            }
        }
    }
}

/// Runs a fresh rollout for `question`.
pub async fn run_rollout(
    question: &str,
    policy: &dyn LanguageModel,
    retriever: &dyn Retriever,
    opts: &AgentOptions,
) -> Result<Trajectory, RolloutError> {
    drive(Trajectory::new(question), policy, retriever, opts).await
}

/// Continues a trajectory whose last step is a search without an
/// observation (typically a refined query). Earlier steps are kept verbatim
/// and count against the tool-call budget.
pub async fn resume_rollout(
    prefix: Trajectory,
    policy: &dyn LanguageModel,
    retriever: &dyn Retriever,
    opts: &AgentOptions,
) -> Result<Trajectory, RolloutError> {
    match prefix.steps.last() {
        Some(Step::Search(s)) if s.observation.is_none() => {}
        _ => {
            return Err(RolloutError::InvalidPrefix(
                "prefix must end with a search step awaiting its result".into(),
            ))
        }
    }
    let earlier = &prefix.steps[..prefix.steps.len() - 1];
    if earlier.iter().any(|s| !matches!(s, Step::Search(SearchStep { observation: Some(_), .. }))) {
        return Err(RolloutError::InvalidPrefix(
            "steps before the resumed query must be completed searches".into(),
        ));
    }
    drive(prefix, policy, retriever, opts).await
}

/// Builds the resumption prefix for replacing the query of search step
/// `index` with `query`.
pub fn prefix_with_query(source: &Trajectory, index: usize, query: &str) -> Option<Trajectory> {
    let Some(Step::Search(step)) = source.steps.get(index) else {
        return None;
    };
    let mut prefix = source.clone();
    prefix.steps.truncate(index);
    prefix.steps.push(Step::Search(SearchStep {
        thought: step.thought.clone(),
        query: query.trim().to_string(),
        observation: None,
    }));
    prefix.truncated = true;
    prefix.trailing_thought = None;
    Some(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{ScriptedModel, ScriptedRetriever};
    use crate::backends::{CorpusRecord, LexicalIndex, StopReason};
    use crate::transcript::{DocSource, Document};

    fn opts(max_tool_calls: u32) -> AgentOptions {
        AgentOptions {
            limits: RolloutLimits { max_tool_calls, max_output_tokens: 16384 },
            ..AgentOptions::default()
        }
    }

    fn corpus() -> LexicalIndex {
        LexicalIndex::from_records(vec![
            CorpusRecord { id: "1".into(), title: "Zebra".into(), content: "striped savanna animal".into() },
            CorpusRecord {
                id: "2".into(),
                title: "Quartz".into(),
                content: "hard crystalline mineral".into(),
            },
            CorpusRecord { id: "3".into(), title: "Violin".into(), content: "string instrument".into() },
        ])
        .unwrap()
    }

    fn doc(id: &str, content: &str) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            content: content.into(),
            source: DocSource::LocalCorpus,
            rank: 1,
        }
    }

    #[tokio::test]
    async fn search_then_answer() {
        let policy = ScriptedModel::new([
            "<think>need facts</think><search>quartz mineral</search>",
            "<think>got it</think><answer>The final answer is \\boxed{Quartz}</answer>",
        ]);
        let t = run_rollout("what mineral?", &policy, &corpus(), &opts(5)).await.unwrap();
        assert_eq!(t.search_round_count(), 1);
        assert!(matches!(t.steps[1], Step::Answer(_)));
        assert!(!t.truncated);
        assert!(t.is_consistent());
        let obs = t.steps[0].as_search().unwrap().observation.as_ref().unwrap();
        assert_eq!(obs.documents[0].id, "2");
        assert!(obs.raw_text.starts_with("result: \"Quartz\""));
        assert_eq!(t.boxed_answer(), Some("Quartz"));
    }

    #[tokio::test]
    async fn tool_call_limit_truncates() {
        let policy = ScriptedModel::new((0..10).map(|i| format!("<think>t{i}</think><search>q{i}</search>")));
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("a", "text")]);
        let t = run_rollout("q", &policy, &retriever, &opts(5)).await.unwrap();
        assert_eq!(t.search_round_count(), 5);
        assert!(t.truncated);
        // five searches plus the one discarded turn
        assert_eq!(policy.remaining(), 4);
        assert_eq!(retriever.call_count(), 5);
    }

    #[tokio::test]
    async fn retrieval_failure_becomes_sentinel() {
        let policy =
            ScriptedModel::new(["<search>a</search>", "<search>b</search>", "<answer>\\boxed{x}</answer>"]);
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("a", "text")]).failing_on(1);
        let t = run_rollout("q", &policy, &retriever, &opts(5)).await.unwrap();
        let obs = t.steps[1].as_search().unwrap().observation.as_ref().unwrap();
        assert!(obs.raw_text.starts_with("search error: "));
        assert!(obs.documents.is_empty());
        assert!(!t.truncated);
    }

    #[tokio::test]
    async fn untagged_turn_stops_loop() {
        let policy = ScriptedModel::new(["I refuse to use tags", "<answer>\\boxed{x}</answer>"]);
        let t = run_rollout("q", &policy, &ScriptedRetriever::new(), &opts(5)).await.unwrap();
        assert!(t.truncated);
        assert!(t.steps.is_empty());
        assert_eq!(policy.remaining(), 1);
    }

    #[tokio::test]
    async fn answer_without_box_still_terminates() {
        let policy = ScriptedModel::new(["<think>hm</think><answer>no idea</answer>"]);
        let t = run_rollout("q", &policy, &ScriptedRetriever::new(), &opts(5)).await.unwrap();
        assert!(!t.truncated);
        assert_eq!(t.boxed_answer(), None);
        assert_eq!(crate::transcript::format_reward(&t), 0);
    }

    #[tokio::test]
    async fn output_token_budget_truncates() {
        let policy = ScriptedModel::new(["<think>a long deliberation</think><search>q</search>"]);
        let mut o = opts(5);
        o.limits.max_output_tokens = 10;
        let t = run_rollout("q", &policy, &ScriptedRetriever::new(), &o).await.unwrap();
        assert!(t.truncated);
        assert!(t.steps.is_empty());
    }

    #[tokio::test]
    async fn budget_shared_across_turns() {
        let turn = "<search>q</search>"; // 9 chars before the stop
        let policy = ScriptedModel::new([turn, turn, turn]);
        let mut o = opts(5);
        o.limits.max_output_tokens = 20;
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("a", "text")]);
        let t = run_rollout("q", &policy, &retriever, &o).await.unwrap();
        // 9 + 9 tokens used, third turn has only 2 left and is cut
        assert_eq!(t.search_round_count(), 2);
        assert!(t.truncated);
    }

    #[tokio::test]
    async fn backend_error_carries_partial() {
        let policy = ScriptedModel::new(["<search>q</search>"]);
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("a", "text")]);
        let err = run_rollout("q", &policy, &retriever, &opts(5)).await.unwrap_err();
        match &err {
            RolloutError::Backend { source, partial } => {
                assert!(matches!(source, BackendError::MockExhausted));
                assert_eq!(partial.search_round_count(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn resume_keeps_prefix_and_counts_budget() {
        let policy = ScriptedModel::new(["<search>a</search>", "<search>b</search>", "<search>c</search>"]);
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("a", "text")]);
        let source = run_rollout("q", &policy, &retriever, &opts(2)).await.unwrap();
        assert!(policy.remaining() == 0);
        let prefix = prefix_with_query(&source, 1, "b refined").unwrap();

        // budget already at 2 after the refined round: a further search is dropped
        let policy = ScriptedModel::new(["<search>c</search>"]);
        let t = resume_rollout(prefix.clone(), &policy, &retriever, &opts(2)).await.unwrap();
        assert!(t.truncated);
        assert_eq!(t.search_round_count(), 2);
        assert_eq!(t.steps[0], source.steps[0]);

        // ... unless the next turn answers
        let policy = ScriptedModel::new(["<answer>\\boxed{z}</answer>"]);
        let t = resume_rollout(prefix.clone(), &policy, &retriever, &opts(2)).await.unwrap();
        assert!(!t.truncated);
        let rendered_prefix = render_trajectory(&prefix);
        assert!(render_trajectory(&t).starts_with(&rendered_prefix));
    }

    #[tokio::test]
    async fn resume_rejects_bad_prefix() {
        let t = Trajectory::new("q");
        let err =
            resume_rollout(t, &ScriptedModel::new(Vec::<String>::new()), &ScriptedRetriever::new(), &opts(2))
                .await
                .unwrap_err();
        assert!(matches!(err, RolloutError::InvalidPrefix(_)));
    }

    #[test]
    fn turn_interpretation() {
        let res = |text: &str, stop: Option<&str>| GenerationResult {
            text: text.into(),
            stop_reason: if stop.is_some() { StopReason::StopSequence } else { StopReason::EndOfMessage },
            matched_stop: stop.map(str::to_string),
            tokens_used: 1,
        };
        assert_eq!(
            interpret_turn(&res("<think>a</think><search>q", Some("</search>"))),
            Turn::Search { thought: "a".into(), query: "q".into() }
        );
        assert_eq!(
            interpret_turn(&res("<think>a</think>", None)),
            Turn::Incomplete { thought: Some("a".into()) }
        );
        assert_eq!(
            interpret_turn(&res("<think>a</think><result>x</result>", None)),
            Turn::Incomplete { thought: None }
        );
        assert_eq!(interpret_turn(&res("<search>  ", Some("</search>"))), Turn::Incomplete { thought: None });
    }
}
