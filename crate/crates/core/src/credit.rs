//! Per-step credit for search queries.
//!
//! A search step earns credit when it is both novel (its documents mostly
//! differ from earlier rounds) and useful (an evaluator model judges that
//! the query and its result advance the question).

use std::collections::HashSet;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, LanguageModel, Message};
use crate::metrics::normalize_answer;
use crate::prompts::{scoring_prompt, tag_body};
use crate::transcript::{render_history, Document, Step, Trajectory};

pub const NOVEL: &str = "the query is novel";
pub const REDUNDANT: &str = "the query is redundant";
pub const UNPARSEABLE: &str = "evaluator output unparseable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocIdentity {
    /// Document id when non-empty, normalized content otherwise.
    #[default]
    ById,
    /// Whitespace-normalized, lowercased content regardless of id.
    ByNormalizedContentHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoveltyParams {
    /// A round is redundant when more than this many of its documents were
    /// already seen.
    pub k_threshold: usize,
    #[serde(default)]
    pub doc_identity: DocIdentity,
}

impl Default for NoveltyParams {
    fn default() -> Self {
        Self { k_threshold: 3, doc_identity: DocIdentity::ById }
    }
}

impl NoveltyParams {
    pub fn validate(&self, top_k: usize) -> Result<(), String> {
        if self.k_threshold >= top_k {
            return Err(format!(
                "k_threshold ({}) must be below top_k ({top_k}) or no round can be redundant",
                self.k_threshold
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFailurePolicy {
    #[default]
    Error,
    /// Score the step 0 with the explanation [`UNPARSEABLE`].
    ScoreZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAssessment {
    pub step_index: usize,
    pub s_novel: u8,
    pub t_novel: String,
    pub s_useful: u8,
    pub t_useful: String,
    pub s: u8,
    pub t: String,
    pub overlap_count: usize,
    /// The evaluator output could not be parsed and the step was scored 0 by policy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub usefulness_unparsed: bool,
}

impl StepAssessment {
    pub fn new(step_index: usize, novelty: (u8, String, usize), usefulness: (u8, String)) -> Self {
        let (s_novel, t_novel, overlap_count) = novelty;
        let (s_useful, t_useful) = usefulness;
        Self {
            step_index,
            s: s_novel & s_useful,
            t: format!("{t_novel} {t_useful}"),
            s_novel,
            t_novel,
            s_useful,
            t_useful,
            overlap_count,
            usefulness_unparsed: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum CreditError {
    #[error("step {0} is not a search step")]
    NotASearchStep(usize),
    #[error("step {index} is out of range for a trajectory of {len} steps")]
    StepOutOfRange { index: usize, len: usize },
    #[error("search step {0} has no observation")]
    MissingObservation(usize),
    #[error("evaluator output unparseable after retry: {output:?}")]
    EvalParseFailure { output: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<CreditError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssessConfig {
    pub novelty: NoveltyParams,
    pub on_parse_failure: EvalFailurePolicy,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Concurrent evaluator calls per trajectory.
    pub max_in_flight: usize,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            novelty: NoveltyParams::default(),
            on_parse_failure: EvalFailurePolicy::Error,
            max_tokens: 1024,
            seed: Some(0),
            max_in_flight: 4,
        }
    }
}

fn identity(doc: &Document, mode: DocIdentity) -> String {
    match mode {
        DocIdentity::ById if !doc.id.is_empty() => format!("id:{}", doc.id),
        _ => {
            let content = doc.content.split_whitespace().collect::<Vec<_>>().join(" ");
            format!("content:{}", content.to_lowercase())
        }
    }
}

fn search_documents(t: &Trajectory, index: usize) -> Result<&[Document], CreditError> {
    match t.steps.get(index) {
        None => Err(CreditError::StepOutOfRange { index, len: t.steps.len() }),
        Some(Step::Answer(_)) => Err(CreditError::NotASearchStep(index)),
        Some(Step::Search(s)) => s
            .observation
            .as_ref()
            .map(|o| o.documents.as_slice())
            .ok_or(CreditError::MissingObservation(index)),
    }
}

/// Counts how many documents of round `index` were already retrieved in an
/// earlier round and compares the count with the threshold.
pub fn novelty_score(
    t: &Trajectory,
    index: usize,
    params: &NoveltyParams,
) -> Result<(u8, String, usize), CreditError> {
    let current = search_documents(t, index)?;
    let seen: HashSet<String> = t.steps[..index]
        .iter()
        .filter_map(Step::as_search)
        .filter_map(|s| s.observation.as_ref())
        .flat_map(|o| o.documents.iter())
        .map(|d| identity(d, params.doc_identity))
        .collect();
    let overlap = current.iter().filter(|d| seen.contains(&identity(d, params.doc_identity))).count();
    Ok(if overlap > params.k_threshold {
        (0, REDUNDANT.to_string(), overlap)
    } else {
        (1, NOVEL.to_string(), overlap)
    })
}

/// Reads `<answer>` 0/1 and a non-empty `<explanation>` from evaluator output.
pub fn parse_score_output(text: &str) -> Option<(u8, String)> {
    let score = match tag_body(text, "answer")? {
        "0" => 0,
        "1" => 1,
        _ => return None,
    };
    let explanation = tag_body(text, "explanation")?;
    if explanation.is_empty() {
        return None;
    }
    Some((score, explanation.to_string()))
}

/// The evaluator request for one step, given the history through that step.
pub fn usefulness_request(
    question: &str,
    golden_answer: &str,
    history: &str,
    cfg: &AssessConfig,
) -> GenerationRequest {
    let mut req = GenerationRequest::new(
        vec![Message::user(scoring_prompt(question, golden_answer, history))],
        cfg.max_tokens,
    );
    req.temperature = 0.0;
    req.seed = cfg.seed;
    req
}

/// Asks the evaluator whether the latest round in `history` is useful.
/// Unparseable output is retried once.
pub async fn usefulness_score(
    question: &str,
    golden_answer: &str,
    history: &str,
    eval: &dyn LanguageModel,
    cfg: &AssessConfig,
) -> Result<(u8, String), CreditError> {
    let req = usefulness_request(question, golden_answer, history, cfg);
    let mut last = String::new();
    for _ in 0..2 {
        let out = eval.generate(&req).await?;
        if let Some(parsed) = parse_score_output(&out.text) {
            return Ok(parsed);
        }
        last = out.text;
    }
    Err(CreditError::EvalParseFailure { output: last })
}

/// Scores search step `index`. Both components always run so the feedback
/// text is complete.
pub async fn assess_step(
    t: &Trajectory,
    index: usize,
    golden_answer: &str,
    eval: &dyn LanguageModel,
    cfg: &AssessConfig,
) -> Result<StepAssessment, CreditError> {
    let novelty = novelty_score(t, index, &cfg.novelty)?;
    let history = render_history(t, index, true);
    let useful = usefulness_score(&t.question, golden_answer, &history, eval, cfg).await;
    match (useful, cfg.on_parse_failure) {
        (Ok(useful), _) => Ok(StepAssessment::new(index, novelty, useful)),
        (Err(CreditError::EvalParseFailure { output }), EvalFailurePolicy::ScoreZero) => {
            tracing::warn!(step = index, output, "scoring unparseable evaluator output as 0");
            let mut a = StepAssessment::new(index, novelty, (0, UNPARSEABLE.to_string()));
            a.usefulness_unparsed = true;
            Ok(a)
        }
        (Err(e), _) => Err(e),
    }
}

/// One assessment per search step, in order. Evaluator calls run
/// concurrently up to `cfg.max_in_flight`.
pub async fn assess_trajectory(
    t: &Trajectory,
    golden_answer: &str,
    eval: &dyn LanguageModel,
    cfg: &AssessConfig,
) -> Result<Vec<StepAssessment>, CreditError> {
    let indices: Vec<usize> =
        t.steps.iter().enumerate().filter(|(_, s)| matches!(s, Step::Search(_))).map(|(i, _)| i).collect();
    stream::iter(indices)
        .map(|i| async move {
            assess_step(t, i, golden_answer, eval, cfg)
                .await
                .map_err(|e| CreditError::AtStep { step: i, source: Box::new(e) })
        })
        .buffered(cfg.max_in_flight.max(1))
        .try_collect()
        .await
}

/// Number of low- and high-quality steps.
pub fn quality_counts(assessments: &[StepAssessment]) -> (usize, usize) {
    let high = assessments.iter().filter(|a| a.s == 1).count();
    (assessments.len() - high, high)
}

/// True when `prediction` matches the golden answer after normalization and
/// is non-empty.
pub(crate) fn answered_correctly(t: &Trajectory, golden: &str) -> u8 {
    match t.boxed_answer() {
        Some(b) if !normalize_answer(b).is_empty() => crate::metrics::exact_match(b, golden),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{RecordingModel, ScriptedModel};
    use crate::transcript::{DocSource, Observation, SearchStep};

    fn doc(id: &str) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            content: format!("content of {id}"),
            source: DocSource::LocalCorpus,
            rank: 1,
        }
    }

    fn round(query: &str, ids: &[&str]) -> Step {
        Step::Search(SearchStep {
            thought: String::new(),
            query: query.into(),
            observation: Some(Observation {
                raw_text: ids.join(" "),
                documents: ids.iter().map(|i| doc(i)).collect(),
            }),
        })
    }

    fn traj(rounds: &[&[&str]]) -> Trajectory {
        let mut t = Trajectory::new("q");
        for (i, ids) in rounds.iter().enumerate() {
            t.steps.push(round(&format!("q{i}"), ids));
        }
        t
    }

    #[test]
    fn novelty_examples() {
        let p = NoveltyParams::default();
        let t = traj(&[&["a", "b", "c", "d", "e"], &["a", "b", "c", "d", "e"], &["a", "b", "x", "y", "z"]]);
        assert_eq!(novelty_score(&t, 0, &p).unwrap(), (1, NOVEL.into(), 0));
        assert_eq!(novelty_score(&t, 1, &p).unwrap(), (0, REDUNDANT.into(), 5));
        assert_eq!(novelty_score(&t, 2, &p).unwrap(), (1, NOVEL.into(), 2));
    }

    #[test]
    fn novelty_identity_modes() {
        let mut t = traj(&[&["a"], &["b"]]);
        // same content under a different id
        if let Step::Search(s) = &mut t.steps[1] {
            s.observation.as_mut().unwrap().documents[0].content = "CONTENT   of a".into();
        }
        let by_id = NoveltyParams { k_threshold: 0, doc_identity: DocIdentity::ById };
        let by_content = NoveltyParams { k_threshold: 0, doc_identity: DocIdentity::ByNormalizedContentHash };
        assert_eq!(novelty_score(&t, 1, &by_id).unwrap().2, 0);
        assert_eq!(novelty_score(&t, 1, &by_content).unwrap().2, 1);
    }

    #[test]
    fn novelty_errors() {
        let mut t = traj(&[&["a"]]);
        t.steps.push(Step::Answer(crate::transcript::AnswerStep::new("", "\\boxed{x}")));
        let p = NoveltyParams::default();
        assert!(matches!(novelty_score(&t, 1, &p), Err(CreditError::NotASearchStep(1))));
        assert!(matches!(novelty_score(&t, 7, &p), Err(CreditError::StepOutOfRange { .. })));
        if let Step::Search(s) = &mut t.steps[0] {
            s.observation = None;
        }
        assert!(matches!(novelty_score(&t, 0, &p), Err(CreditError::MissingObservation(0))));
    }

    #[test]
    fn k_must_be_below_top_k() {
        assert!(NoveltyParams::default().validate(5).is_ok());
        assert!(NoveltyParams { k_threshold: 5, ..Default::default() }.validate(5).is_err());
    }

    #[test]
    fn score_output_parsing() {
        assert_eq!(
            parse_score_output("<answer> 1 </answer><explanation> ok </explanation>"),
            Some((1, "ok".into()))
        );
        assert_eq!(parse_score_output("<answer>2</answer><explanation>x</explanation>"), None);
        assert_eq!(parse_score_output("<answer>1</answer>"), None);
        assert_eq!(parse_score_output("<answer>1</answer><explanation> </explanation>"), None);
        assert_eq!(parse_score_output("looks useful to me"), None);
    }

    #[tokio::test]
    async fn usefulness_retries_once_then_fails() {
        let cfg = AssessConfig::default();
        let eval = ScriptedModel::new(["prose", "<answer>0</answer><explanation>no</explanation>"]);
        assert_eq!(usefulness_score("q", "g", "h", &eval, &cfg).await.unwrap(), (0, "no".to_string()));
        let eval =
            ScriptedModel::new(["prose", "more prose", "<answer>1</answer><explanation>x</explanation>"]);
        let err = usefulness_score("q", "g", "h", &eval, &cfg).await.unwrap_err();
        assert!(matches!(err, CreditError::EvalParseFailure { .. }));
        assert_eq!(eval.remaining(), 1);
    }

    #[tokio::test]
    async fn conjunction_and_feedback() {
        let cases = [(false, 1u8), (false, 0), (true, 1), (true, 0)];
        for (redundant, useful) in cases {
            let t = if redundant { traj(&[&["a"], &["a"]]) } else { traj(&[&["a"], &["b"]]) };
            let cfg = AssessConfig {
                novelty: NoveltyParams { k_threshold: 0, ..Default::default() },
                ..Default::default()
            };
            let eval = ScriptedModel::new([format!(
                "<answer>{useful}</answer><explanation>why {useful}</explanation>"
            )]);
            let a = assess_step(&t, 1, "g", &eval, &cfg).await.unwrap();
            assert_eq!(a.s_novel, u8::from(!redundant));
            assert_eq!(a.s, a.s_novel & useful);
            let expected_head = if redundant { REDUNDANT } else { NOVEL };
            assert_eq!(a.t, format!("{expected_head} why {useful}"));
        }
    }

    #[tokio::test]
    async fn score_zero_policy() {
        let t = traj(&[&["a"]]);
        let eval = ScriptedModel::new(["x", "y"]);
        let cfg = AssessConfig { on_parse_failure: EvalFailurePolicy::ScoreZero, ..Default::default() };
        let a = assess_step(&t, 0, "g", &eval, &cfg).await.unwrap();
        assert_eq!((a.s_useful, a.s), (0, 0));
        assert_eq!(a.t_useful, UNPARSEABLE);
        assert!(a.usefulness_unparsed);
    }

    #[tokio::test]
    async fn repeated_round_with_k_zero() {
        let t = traj(&[&["a"], &["a"], &["b"]]);
        let eval = ScriptedModel::new((0..3).map(|_| "<answer>1</answer><explanation>ok</explanation>"));
        let cfg = AssessConfig {
            novelty: NoveltyParams { k_threshold: 0, ..Default::default() },
            max_in_flight: 1,
            ..Default::default()
        };
        let scores: Vec<u8> =
            assess_trajectory(&t, "g", &eval, &cfg).await.unwrap().iter().map(|a| a.s).collect();
        assert_eq!(scores, vec![1, 0, 1]);
        assert!(assess_trajectory(&Trajectory::new("q"), "g", &eval, &cfg).await.unwrap().is_empty());
    }

    #[tokio::test]
    async fn errors_name_their_step() {
        let t = traj(&[&["a"], &["b"]]);
        let eval = ScriptedModel::new(["<answer>1</answer><explanation>ok</explanation>"]);
        let cfg = AssessConfig { max_in_flight: 1, ..Default::default() };
        let err = assess_trajectory(&t, "g", &eval, &cfg).await.unwrap_err();
        assert!(matches!(err, CreditError::AtStep { step: 1, .. }));
    }

    #[tokio::test]
    async fn later_rounds_never_reach_the_prompt() {
        let full = traj(&[&["a"], &["b"], &["c"]]);
        let reply = "<answer>1</answer><explanation>ok</explanation>";
        let cfg = AssessConfig::default();
        for i in 0..3 {
            let mut cut = full.clone();
            cut.steps.truncate(i + 1);
            let a = RecordingModel::new(ScriptedModel::new([reply]));
            let b = RecordingModel::new(ScriptedModel::new([reply]));
            assess_step(&full, i, "g", &a, &cfg).await.unwrap();
            assess_step(&cut, i, "g", &b, &cfg).await.unwrap();
            assert_eq!(a.calls()[0].request, b.calls()[0].request);
        }
    }
}
