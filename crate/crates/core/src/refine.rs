//! Rewriting low-quality queries and regenerating from the rewrite.
//!
//! Every refinement branches from the original trajectory: the prefix
//! before the low-quality step is kept, the step's query is replaced and the
//! policy continues from there.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_loop::{prefix_with_query, resume_rollout, AgentOptions, RolloutError};
use crate::backends::{BackendError, GenerationRequest, LanguageModel, Message, Retriever};
use crate::credit::StepAssessment;
use crate::prompts::{refine_prompt, tag_body};
use crate::transcript::{render_history, Step, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub source_step_index: usize,
    pub original_query: String,
    pub refined_query: String,
    pub refine_explanation: String,
    pub regenerated: Trajectory,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("refiner output has no usable <search> block after retry: {output:?}")]
    RefineParseFailure { output: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("assessments do not line up with the trajectory: {0}")]
    Misaligned(String),
}

impl RefineError {
    /// Parse failures only affect the step at hand; the rest indicate a
    /// backend or input problem.
    pub fn is_parse_failure(&self) -> bool {
        matches!(self, RefineError::RefineParseFailure { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Concurrent refinement branches per trajectory.
    pub max_in_flight: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { max_tokens: 1024, seed: Some(0), max_in_flight: 4 }
    }
}

/// Models and retriever taking part in refinement.
#[derive(Clone, Copy)]
pub struct RefineBackends<'a> {
    pub policy: &'a dyn LanguageModel,
    pub retriever: &'a dyn Retriever,
    pub refiner: &'a dyn LanguageModel,
}

/// Reads the refined query from `<search>` and the optional `<explanation>`.
pub fn parse_refine_output(text: &str) -> Option<(String, String)> {
    let query = tag_body(text, "search")?.split_whitespace().collect::<Vec<_>>().join(" ");
    if query.is_empty() {
        return None;
    }
    let explanation = tag_body(text, "explanation").unwrap_or_default().to_string();
    Some((query, explanation))
}

pub fn refine_request(
    question: &str,
    history: &str,
    feedback: &str,
    cfg: &RefineConfig,
) -> GenerationRequest {
    let mut req = GenerationRequest::new(
        vec![Message::user(refine_prompt(question, history, feedback))],
        cfg.max_tokens,
    );
    req.temperature = 0.0;
    req.seed = cfg.seed;
    req
}

/// Produces a rewritten query from the step's feedback. `history` must stop
/// before the round's `<result>`.
pub async fn refine_query(
    question: &str,
    history: &str,
    feedback: &str,
    refiner: &dyn LanguageModel,
    cfg: &RefineConfig,
) -> Result<(String, String), RefineError> {
    let req = refine_request(question, history, feedback, cfg);
    let mut last = String::new();
    for _ in 0..2 {
        let out = refiner.generate(&req).await?;
        if let Some(parsed) = parse_refine_output(&out.text) {
            return Ok(parsed);
        }
        last = out.text;
    }
    Err(RefineError::RefineParseFailure { output: last })
}

/// Refines the query of one assessed step and regenerates the rest of the
/// trajectory. `Ok(None)` when the refiner returned the original query.
pub async fn refine_step(
    source: &Trajectory,
    assessment: &StepAssessment,
    backends: RefineBackends<'_>,
    agent: &AgentOptions,
    cfg: &RefineConfig,
) -> Result<Option<RefinementOutcome>, RefineError> {
    let index = assessment.step_index;
    let Some(Step::Search(step)) = source.steps.get(index) else {
        return Err(RefineError::Misaligned(format!("step {index} is not a search step")));
    };
    let history = render_history(source, index, false);
    let (refined, explanation) =
        refine_query(&source.question, &history, &assessment.t, backends.refiner, cfg).await?;
    if refined == step.query.trim() {
        tracing::debug!(step = index, "refined query identical to original; skipping");
        return Ok(None);
    }
    let prefix = prefix_with_query(source, index, &refined)
        .ok_or_else(|| RefineError::Misaligned(format!("step {index} is not a search step")))?;
    let regenerated = resume_rollout(prefix, backends.policy, backends.retriever, agent).await?;
    Ok(Some(RefinementOutcome {
        source_step_index: index,
        original_query: step.query.clone(),
        refined_query: refined,
        refine_explanation: explanation,
        regenerated,
    }))
}

/// Result of refining every low-quality step of one trajectory.
#[derive(Debug, Default)]
pub struct RefinementBatch {
    pub outcomes: Vec<RefinementOutcome>,
    /// Steps whose refinement failed, with the error.
    pub failures: Vec<(usize, RefineError)>,
    /// Steps whose refined query equalled the original.
    pub skipped: Vec<usize>,
}

/// Checks that `assessments` hold one entry per search step, in order.
pub fn check_alignment(t: &Trajectory, assessments: &[StepAssessment]) -> Result<(), RefineError> {
    let search_indices: Vec<usize> =
        t.steps.iter().enumerate().filter(|(_, s)| matches!(s, Step::Search(_))).map(|(i, _)| i).collect();
    let assessed: Vec<usize> = assessments.iter().map(|a| a.step_index).collect();
    if search_indices != assessed {
        return Err(RefineError::Misaligned(format!(
            "search steps {search_indices:?} but assessments for {assessed:?}"
        )));
    }
    Ok(())
}

/// Refines each step with `s = 0`, in step order, each branch starting from
/// the original trajectory. A failing branch does not stop the others.
pub async fn refine_and_regenerate(
    t: &Trajectory,
    assessments: &[StepAssessment],
    backends: RefineBackends<'_>,
    agent: &AgentOptions,
    cfg: &RefineConfig,
) -> Result<RefinementBatch, RefineError> {
    check_alignment(t, assessments)?;
    let results: Vec<(usize, Result<Option<RefinementOutcome>, RefineError>)> =
        stream::iter(assessments.iter().filter(|a| a.s == 0))
            .map(|a| async move { (a.step_index, refine_step(t, a, backends, agent, cfg).await) })
            .buffered(cfg.max_in_flight.max(1))
            .collect()
            .await;
    let mut batch = RefinementBatch::default();
    for (index, result) in results {
        match result {
            Ok(Some(outcome)) => batch.outcomes.push(outcome),
            Ok(None) => batch.skipped.push(index),
            Err(e) => {
                tracing::warn!(step = index, error = %e, "refinement failed");
                batch.failures.push((index, e));
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent_loop::RolloutLimits;
    use crate::backends::mock::{FnModel, RecordingModel, ScriptedModel, ScriptedRetriever};
    use crate::credit::NOVEL;
    use crate::transcript::{render_trajectory, DocSource, Document, Observation, SearchStep};

    fn doc(id: &str) -> Document {
        Document {
            id: id.into(),
            title: id.to_uppercase(),
            content: format!("about {id}"),
            source: DocSource::LocalCorpus,
            rank: 1,
        }
    }

    fn source() -> Trajectory {
        let mut t = Trajectory::new("which q?");
        for q in ["alpha", "beta", "gamma"] {
            t.steps.push(Step::Search(SearchStep {
                thought: format!("think {q}"),
                query: q.into(),
                observation: Some(Observation {
                    raw_text: format!("result: about {q}"),
                    documents: vec![doc(q)],
                }),
            }));
        }
        t.steps.push(Step::Answer(crate::transcript::AnswerStep::new("", "\\boxed{x}")));
        t.truncated = false;
        t
    }

    fn assessment(i: usize, s: u8) -> StepAssessment {
        StepAssessment::new(i, (1, NOVEL.into(), 0), (s, format!("feedback {i}")))
    }

    fn agent() -> AgentOptions {
        AgentOptions { limits: RolloutLimits::TRAINING, ..AgentOptions::default() }
    }

    #[test]
    fn refine_output_parsing() {
        assert_eq!(
            parse_refine_output("<search>new q</search><explanation>e</explanation>"),
            Some(("new q".into(), "e".into()))
        );
        assert_eq!(parse_refine_output("<search> a\n b </search>"), Some(("a b".into(), String::new())));
        assert_eq!(parse_refine_output("<search>  </search>"), None);
        assert_eq!(parse_refine_output("rewrite it as: new q"), None);
    }

    #[tokio::test]
    async fn refine_query_retry_and_failure() {
        let cfg = RefineConfig::default();
        let m = ScriptedModel::new(["no tags", "<search>b</search>"]);
        assert_eq!(refine_query("q", "h", "f", &m, &cfg).await.unwrap().0, "b");
        let m = ScriptedModel::new(["no tags", "still none"]);
        assert!(refine_query("q", "h", "f", &m, &cfg).await.unwrap_err().is_parse_failure());
    }

    #[tokio::test]
    async fn two_low_steps_give_two_branches() {
        let t = source();
        let assessments = [assessment(0, 1), assessment(1, 0), assessment(2, 0)];
        let refiner = RecordingModel::new(FnModel::new(|req| {
            let prompt = &req.messages[0].content;
            let q = if prompt.contains("<search> gamma </search>") { "gamma2" } else { "beta2" };
            Some(format!("<search> {q} </search><explanation> sharper </explanation>"))
        }));
        let policy = FnModel::new(|_| Some("<answer>\\boxed{y}</answer>".into()));
        let retriever = ScriptedRetriever::new().with_fallback(vec![doc("z")]);
        let backends = RefineBackends { policy: &policy, retriever: &retriever, refiner: &refiner };
        let cfg = RefineConfig { max_in_flight: 1, ..Default::default() };
        let batch = refine_and_regenerate(&t, &assessments, backends, &agent(), &cfg).await.unwrap();
        assert_eq!(batch.outcomes.len(), 2);
        for o in &batch.outcomes {
            let i = o.source_step_index;
            assert_eq!(o.regenerated.steps[..i], t.steps[..i]);
            let rendered = render_trajectory(&o.regenerated);
            let original_prefix = crate::transcript::render_steps(&t.steps[..i]);
            assert!(rendered.starts_with(&original_prefix));
            assert_ne!(o.refined_query, o.original_query);
            assert_eq!(o.regenerated.boxed_answer(), Some("y"));
        }
        assert_eq!(batch.outcomes[0].refined_query, "beta2");
        assert_eq!(batch.outcomes[1].refined_query, "gamma2");

        // the current round's result never reaches the refiner
        for call in refiner.calls() {
            let prompt = &call.request.messages[0].content;
            if prompt.contains("<search> beta </search>") && !prompt.contains("gamma") {
                assert!(!prompt.contains("about beta"));
                assert!(prompt.contains("about alpha"));
                assert!(prompt.contains("feedback 1"));
            }
        }
    }

    #[tokio::test]
    async fn nothing_to_refine() {
        let t = source();
        let assessments = [assessment(0, 1), assessment(1, 1), assessment(2, 1)];
        let m = ScriptedModel::new(Vec::<String>::new());
        let r = ScriptedRetriever::new();
        let backends = RefineBackends { policy: &m, retriever: &r, refiner: &m };
        let batch = refine_and_regenerate(&t, &assessments, backends, &agent(), &RefineConfig::default())
            .await
            .unwrap();
        assert!(batch.outcomes.is_empty() && batch.failures.is_empty() && batch.skipped.is_empty());
    }

    #[tokio::test]
    async fn identical_refinement_is_skipped_and_failures_isolated() {
        let t = source();
        let assessments = [assessment(0, 0), assessment(1, 0), assessment(2, 1)];
        let refiner = FnModel::new(|req| {
            let prompt = &req.messages[0].content;
            if prompt.contains("<search> beta </search>") {
                Some("garbage".into())
            } else {
                Some("<search> alpha </search>".into())
            }
        });
        let m = ScriptedModel::new(Vec::<String>::new());
        let r = ScriptedRetriever::new();
        let backends = RefineBackends { policy: &m, retriever: &r, refiner: &refiner };
        let batch = refine_and_regenerate(&t, &assessments, backends, &agent(), &RefineConfig::default())
            .await
            .unwrap();
        assert!(batch.outcomes.is_empty());
        assert_eq!(batch.skipped, vec![0]);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].0, 1);
    }

    #[tokio::test]
    async fn misaligned_assessments_rejected() {
        let t = source();
        let m = ScriptedModel::new(Vec::<String>::new());
        let r = ScriptedRetriever::new();
        let backends = RefineBackends { policy: &m, retriever: &r, refiner: &m };
        let err =
            refine_and_regenerate(&t, &[assessment(0, 0)], backends, &agent(), &RefineConfig::default())
                .await
                .unwrap_err();
        assert!(matches!(err, RefineError::Misaligned(_)));
    }
}
