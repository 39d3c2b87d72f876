//! Training-data builders: screened imitation records, preference pairs,
//! rollout groups with shaped rewards, and judge distillation records.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_loop::{run_rollout, AgentOptions, RolloutError};
use crate::backends::{LanguageModel, Retriever};
use crate::credit::{
    answered_correctly, assess_trajectory, parse_score_output, quality_counts, AssessConfig, CreditError,
    StepAssessment,
};
use crate::prompts::agent_system_prompt;
use crate::refine::{
    check_alignment, parse_refine_output, refine_step, RefineBackends, RefineConfig, RefineError,
};
use crate::transcript::{format_reward, render_trajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub lambda_format: f64,
    pub gamma: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub group_size: usize,
    pub max_shared_prefix: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda_format: 0.2,
            gamma: 0.1,
            phi_min: 0.5,
            phi_max: 0.4,
            group_size: 8,
            max_shared_prefix: 4,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |m: &str| Err(CurriculumError::InvalidParams(m.to_string()));
        let finite =
            [self.lambda_format, self.gamma, self.phi_min, self.phi_max].iter().all(|x| x.is_finite());
        if !finite {
            return bad("reward parameters must be finite");
        }
        if self.lambda_format < 0.0 || self.gamma < 0.0 {
            return bad("lambda_format and gamma must be >= 0");
        }
        if !(0.0 <= self.phi_max && self.phi_max <= self.phi_min && self.phi_min <= 1.0) {
            return bad("require 0 <= phi_max <= phi_min <= 1");
        }
        if self.group_size == 0 || self.max_shared_prefix == 0 {
            return bad("group_size and max_shared_prefix must be >= 1");
        }
        if self.max_shared_prefix > self.group_size {
            return bad("max_shared_prefix must not exceed group_size");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid reward parameters: {0}")]
    InvalidParams(String),
    #[error("run {index} has {assessed} assessments for {searches} search steps")]
    MissingAssessment { index: usize, assessed: usize, searches: usize },
    #[error("need at least two candidates, got {0}")]
    FewerThanTwoCandidates(usize),
    #[error("cannot normalize an empty group")]
    EmptyGroup,
}

/// Outcome-dominant reward adjusted by step quality and clamped so every
/// correct trajectory outscores every incorrect one.
pub fn composite_reward(r_outcome: u8, n_wrong: usize, n_correct: usize, p: &RewardParams) -> f64 {
    if r_outcome == 1 {
        (1.0 - p.gamma * n_wrong as f64).max(p.phi_min)
    } else {
        (p.gamma * n_correct as f64).min(p.phi_max)
    }
}

pub fn total_reward(r_composite: f64, r_format: u8, p: &RewardParams) -> f64 {
    r_composite + p.lambda_format * f64::from(r_format)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_outcome: u8,
    pub r_format: u8,
    pub n_wrong: usize,
    pub n_correct: usize,
    pub r_composite: f64,
    pub r_total: f64,
}

impl RewardBreakdown {
    pub fn new(r_outcome: u8, r_format: u8, n_wrong: usize, n_correct: usize, p: &RewardParams) -> Self {
        let r_composite = composite_reward(r_outcome, n_wrong, n_correct, p);
        Self {
            r_outcome,
            r_format,
            n_wrong,
            n_correct,
            r_composite,
            r_total: total_reward(r_composite, r_format, p),
        }
    }

    pub fn for_trajectory(
        t: &Trajectory,
        assessments: &[StepAssessment],
        golden: &str,
        p: &RewardParams,
    ) -> Self {
        let (n_wrong, n_correct) = quality_counts(assessments);
        Self::new(answered_correctly(t, golden), format_reward(t), n_wrong, n_correct, p)
    }
}

/// `(r - mean) / std` with the population standard deviation; all zeros when
/// the rewards are (numerically) identical.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, CurriculumError> {
    if rewards.is_empty() {
        return Err(CurriculumError::EmptyGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A trajectory together with its step assessments and reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessedRun {
    pub trajectory: Trajectory,
    pub assessments: Vec<StepAssessment>,
    pub golden_answer: String,
}

impl AssessedRun {
    fn check(&self, index: usize) -> Result<(), CurriculumError> {
        let searches = self.trajectory.search_round_count();
        if self.assessments.len() != searches {
            return Err(CurriculumError::MissingAssessment {
                index,
                assessed: self.assessments.len(),
                searches,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question: String,
    pub trajectory_text: String,
}

/// Whether a run qualifies for imitation data: well formed, correct, and
/// every search step high quality.
pub fn sft_eligible(run: &AssessedRun, index: usize) -> Result<bool, CurriculumError> {
    run.check(index)?;
    let t = &run.trajectory;
    Ok(format_reward(t) == 1
        && answered_correctly(t, &run.golden_answer) == 1
        && run.assessments.iter().all(|a| a.s == 1))
}

pub fn sft_record(t: &Trajectory) -> SftRecord {
    SftRecord { question: t.question.clone(), trajectory_text: render_trajectory(t) }
}

pub fn filter_sft(runs: &[AssessedRun]) -> Result<Vec<SftRecord>, CurriculumError> {
    let mut out = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        if sft_eligible(run, i)? {
            out.push(sft_record(&run.trajectory));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub outcome: u8,
    pub n_low_quality: usize,
    pub n_high_quality: usize,
    pub search_rounds: usize,
}

impl TrajectoryStats {
    pub fn of(t: &Trajectory, assessments: &[StepAssessment], golden: &str) -> Self {
        let (n_low_quality, n_high_quality) = quality_counts(assessments);
        Self {
            outcome: answered_correctly(t, golden),
            n_low_quality,
            n_high_quality,
            search_rounds: t.search_round_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceRule {
    Outcome,
    FewerLowQuality,
    MoreHighQuality,
    FewerSearchRounds,
}

/// Which rule separates `a` from `b`, and in whose favour. `Greater` means
/// `a` is preferred.
pub fn stage2_decision(a: &TrajectoryStats, b: &TrajectoryStats) -> (Ordering, Option<PreferenceRule>) {
    let outcome = a.outcome.cmp(&b.outcome);
    if outcome != Ordering::Equal {
        return (outcome, Some(PreferenceRule::Outcome));
    }
    let quality = if a.outcome == 1 {
        (b.n_low_quality.cmp(&a.n_low_quality), PreferenceRule::FewerLowQuality)
    } else {
        (a.n_high_quality.cmp(&b.n_high_quality), PreferenceRule::MoreHighQuality)
    };
    if quality.0 != Ordering::Equal {
        return (quality.0, Some(quality.1));
    }
    let rounds = b.search_rounds.cmp(&a.search_rounds);
    if rounds != Ordering::Equal {
        return (rounds, Some(PreferenceRule::FewerSearchRounds));
    }
    (Ordering::Equal, None)
}

/// Total preorder over candidates: correct beats incorrect; among correct,
/// fewer low-quality steps; among incorrect, more high-quality steps; then
/// fewer search rounds.
pub fn stage2_order(a: &TrajectoryStats, b: &TrajectoryStats) -> Ordering {
    stage2_decision(a, b).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub stats: TrajectoryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub chosen_stats: TrajectoryStats,
    pub rejected_stats: TrajectoryStats,
    pub rationale: PreferenceRule,
}

/// Pairs the best candidate with the worst. Among equally ranked candidates
/// the earlier one counts as better. `None` when best and worst are tied.
pub fn build_preference_pairs(
    question: &str,
    candidates: &[Candidate],
) -> Result<Option<PreferencePair>, CurriculumError> {
    if candidates.len() < 2 {
        return Err(CurriculumError::FewerThanTwoCandidates(candidates.len()));
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if stage2_order(&c.stats, &candidates[best].stats) == Ordering::Greater {
            best = i;
        }
        if stage2_order(&c.stats, &candidates[worst].stats) != Ordering::Greater {
            worst = i;
        }
    }
    let (order, rule) = stage2_decision(&candidates[best].stats, &candidates[worst].stats);
    let (Ordering::Greater, Some(rationale)) = (order, rule) else {
        return Ok(None);
    };
    let (chosen, rejected) = (&candidates[best], &candidates[worst]);
    if render_trajectory(&chosen.trajectory) == render_trajectory(&rejected.trajectory) {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        question: question.to_string(),
        chosen: chosen.trajectory.clone(),
        rejected: rejected.trajectory.clone(),
        chosen_stats: chosen.stats,
        rejected_stats: rejected.stats,
        rationale,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    /// System prompt and question separated by a blank line.
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub question: String,
    pub rationale: PreferenceRule,
    pub chosen_stats: TrajectoryStats,
    pub rejected_stats: TrajectoryStats,
}

impl From<&PreferencePair> for DpoRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            prompt: format!("{}\n\n{}", agent_system_prompt(), p.question),
            chosen: render_trajectory(&p.chosen),
            rejected: render_trajectory(&p.rejected),
            question: p.question.clone(),
            rationale: p.rationale,
            chosen_stats: p.chosen_stats,
            rejected_stats: p.rejected_stats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Fresh,
    /// Regenerated from `member` after refining its search step `step`.
    Refinement {
        member: usize,
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub trajectory: Trajectory,
    pub assessments: Vec<StepAssessment>,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question: String,
    pub golden_answer: String,
    pub members: Vec<GroupMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoMemberRecord {
    pub trajectory_text: String,
    pub r_outcome: u8,
    pub r_format: u8,
    pub n_wrong: usize,
    pub n_correct: usize,
    pub r_composite: f64,
    pub r_total: f64,
    pub advantage: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRecord {
    pub question: String,
    pub golden_answer: String,
    pub members: Vec<GrpoMemberRecord>,
}

impl From<&RolloutGroup> for GrpoRecord {
    fn from(g: &RolloutGroup) -> Self {
        Self {
            question: g.question.clone(),
            golden_answer: g.golden_answer.clone(),
            members: g
                .members
                .iter()
                .map(|m| GrpoMemberRecord {
                    trajectory_text: render_trajectory(&m.trajectory),
                    r_outcome: m.breakdown.r_outcome,
                    r_format: m.breakdown.r_format,
                    n_wrong: m.breakdown.n_wrong,
                    n_correct: m.breakdown.n_correct,
                    r_composite: m.breakdown.r_composite,
                    r_total: m.breakdown.r_total,
                    advantage: m.advantage,
                    origin: m.origin,
                })
                .collect(),
        }
    }
}

/// Every backend a rollout group needs.
#[derive(Clone, Copy)]
pub struct StageBackends<'a> {
    pub policy: &'a dyn LanguageModel,
    pub retriever: &'a dyn Retriever,
    pub evaluator: &'a dyn LanguageModel,
    pub refiner: &'a dyn LanguageModel,
}

impl<'a> StageBackends<'a> {
    pub fn refine(&self) -> RefineBackends<'a> {
        RefineBackends { policy: self.policy, retriever: self.retriever, refiner: self.refiner }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageConfig {
    pub reward: RewardParams,
    pub agent: AgentOptions,
    pub assess: AssessConfig,
    pub refine: RefineConfig,
}

impl StageConfig {
    /// Agent options for the `batch`-th fresh rollout of a question.
    fn agent_for_batch(&self, batch: u64) -> AgentOptions {
        AgentOptions { seed: self.agent.seed.map(|s| s.wrapping_add(batch)), ..self.agent.clone() }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
}

#[derive(Debug, Error)]
#[error("rollout group failed with {} members collected: {source}", partial.len())]
pub struct ExpandError {
    #[source]
    pub source: StageError,
    pub partial: Vec<GroupMember>,
}

/// Grows a group of exactly `group_size` trajectories. Each batch starts
/// with a fresh rollout and adds up to `max_shared_prefix - 1` refinements
/// of it, earliest low-quality step first.
pub async fn expand_rollouts(
    question: &str,
    golden_answer: &str,
    backends: StageBackends<'_>,
    cfg: &StageConfig,
) -> Result<RolloutGroup, ExpandError> {
    let p = &cfg.reward;
    let mut members: Vec<GroupMember> = Vec::new();
    let mut batch = 0u64;
    while members.len() < p.group_size {
        if let Err(source) = expand_batch(question, golden_answer, backends, cfg, batch, &mut members).await {
            return Err(ExpandError { source, partial: members });
        }
        batch += 1;
    }

    let rewards: Vec<f64> = members.iter().map(|m| m.breakdown.r_total).collect();
    let advantages =
        group_advantages(&rewards).map_err(|e| ExpandError { source: e.into(), partial: members.clone() })?;
    for (m, a) in members.iter_mut().zip(advantages) {
        m.advantage = a;
    }
    Ok(RolloutGroup { question: question.to_string(), golden_answer: golden_answer.to_string(), members })
}

async fn expand_batch(
    question: &str,
    golden: &str,
    backends: StageBackends<'_>,
    cfg: &StageConfig,
    batch: u64,
    members: &mut Vec<GroupMember>,
) -> Result<(), StageError> {
    let p = &cfg.reward;
    let agent = cfg.agent_for_batch(batch);
    let fresh = run_rollout(question, backends.policy, backends.retriever, &agent).await?;
    let assessments = assess_trajectory(&fresh, golden, backends.evaluator, &cfg.assess).await?;
    let root = members.len();
    members.push(member(fresh.clone(), assessments.clone(), golden, p, Origin::Fresh));

    let budget = (p.max_shared_prefix - 1).min(p.group_size - members.len());
    let mut added = 0;
    for a in assessments.iter().filter(|a| a.s == 0) {
        if added == budget {
            break;
        }
        let outcome = match refine_step(&fresh, a, backends.refine(), &agent, &cfg.refine).await {
            Ok(Some(o)) => o,
            Ok(None) => continue,
            Err(e) if e.is_parse_failure() => {
                tracing::warn!(step = a.step_index, error = %e, "skipping unrefinable step");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let regenerated_assessments =
            assess_trajectory(&outcome.regenerated, golden, backends.evaluator, &cfg.assess).await?;
        members.push(member(
            outcome.regenerated,
            regenerated_assessments,
            golden,
            p,
            Origin::Refinement { member: root, step: a.step_index },
        ));
        added += 1;
    }
    Ok(())
}

fn member(
    trajectory: Trajectory,
    assessments: Vec<StepAssessment>,
    golden: &str,
    p: &RewardParams,
    origin: Origin,
) -> GroupMember {
    let breakdown = RewardBreakdown::for_trajectory(&trajectory, &assessments, golden, p);
    GroupMember { trajectory, assessments, breakdown, advantage: 0.0, origin }
}

/// Whether the policy fails the question on every one of `trials` rollouts
/// (exact match against the golden answer).
pub async fn is_unresolved(
    question: &str,
    golden: &str,
    policy: &dyn LanguageModel,
    retriever: &dyn Retriever,
    agent: &AgentOptions,
    trials: usize,
) -> Result<bool, RolloutError> {
    for trial in 0..trials {
        let opts = AgentOptions {
            seed: agent.seed.map(|s| s.wrapping_add(1_000_003 + trial as u64)),
            ..agent.clone()
        };
        let t = run_rollout(question, policy, retriever, &opts).await?;
        if answered_correctly(&t, golden) == 1 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Preference candidates for one question: the original trajectory first,
/// then each refinement in step order.
pub fn candidates_from(
    original: (&Trajectory, &[StepAssessment]),
    refinements: &[(Trajectory, Vec<StepAssessment>)],
    golden: &str,
) -> Result<Vec<Candidate>, CurriculumError> {
    check_alignment(original.0, original.1).map_err(|_| CurriculumError::MissingAssessment {
        index: 0,
        assessed: original.1.len(),
        searches: original.0.search_round_count(),
    })?;
    let mut out = vec![Candidate {
        trajectory: original.0.clone(),
        stats: TrajectoryStats::of(original.0, original.1, golden),
    }];
    for (t, a) in refinements {
        out.push(Candidate { trajectory: t.clone(), stats: TrajectoryStats::of(t, a, golden) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    Score,
    Refine,
}

/// A teacher call captured for distillation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeCapture {
    pub task: JudgeTask,
    pub filled_prompt: String,
    pub teacher_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeSftRecord {
    pub task: JudgeTask,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JudgeReport {
    pub emitted: usize,
    pub dropped: usize,
}

/// Keeps captures whose teacher output parses for its task.
pub fn build_judge_sft(records: &[JudgeCapture]) -> (Vec<JudgeSftRecord>, JudgeReport) {
    let mut out = Vec::new();
    let mut report = JudgeReport::default();
    for r in records {
        let parses = match r.task {
            JudgeTask::Score => parse_score_output(&r.teacher_output).is_some(),
            JudgeTask::Refine => parse_refine_output(&r.teacher_output).is_some(),
        };
        if parses {
            out.push(JudgeSftRecord {
                task: r.task,
                prompt: r.filled_prompt.clone(),
                completion: r.teacher_output.clone(),
            });
        } else {
            report.dropped += 1;
        }
    }
    report.emitted = out.len();
    (out, report)
}
