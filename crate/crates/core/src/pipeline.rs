//! Batch driver behind the command-line tool: configuration, backend
//! resolution, JSONL input and output, and run reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_loop::{run_rollout, AgentOptions, RolloutLimits};
use crate::backends::mock::{RecordingModel, ScriptedModel, SeededJudge, SeededPolicy, SeededRefiner};
use crate::backends::{
    ChatClient, LanguageModel, LexicalIndex, RetrievalServiceClient, Retriever, WebSearchClient,
};
use crate::credit::{
    assess_trajectory, AssessConfig, CreditError, EvalFailurePolicy, NoveltyParams, StepAssessment,
};
use crate::curriculum::{
    build_judge_sft, build_preference_pairs, candidates_from, expand_rollouts, is_unresolved, sft_eligible,
    sft_record, AssessedRun, CurriculumError, DpoRecord, ExpandError, GrpoRecord, JudgeCapture, JudgeTask,
    RewardParams, StageBackends, StageConfig, StageError,
};
use crate::metrics::{evaluate, EvalRecord, EvalReport};
use crate::refine::{
    refine_and_regenerate, refine_query, RefineBackends, RefineConfig, RefineError, RefinementOutcome,
};
use crate::transcript::{render_history, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// OpenAI-compatible chat-completions endpoint.
    Chat {
        endpoint: String,
        model: String,
        /// Environment variable holding the bearer token; none is sent when unset.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    /// Fixed replies served in order.
    Scripted { responses: Vec<String> },
    /// Deterministic offline stand-in for the role it is configured for.
    Seeded {
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RetrievalConfig {
    /// In-memory BM25 over a JSONL corpus of `{id, title, content}`.
    Lexical {
        corpus: PathBuf,
    },
    Service {
        base_url: String,
    },
    Web {
        endpoint: String,
        #[serde(default = "default_search_key_env")]
        api_key_env: String,
    },
}

fn default_search_key_env() -> String {
    "SEARCH_API_KEY".into()
}

fn default_training() -> RolloutLimits {
    RolloutLimits::TRAINING
}

fn default_inference() -> RolloutLimits {
    RolloutLimits::INFERENCE
}

fn default_top_k() -> usize {
    5
}

fn default_char_budget() -> usize {
    1500
}

fn default_parallelism() -> usize {
    4
}

fn default_temperature() -> f64 {
    1.0
}

fn default_judge_tokens() -> u32 {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub policy: ModelConfig,
    pub evaluator: ModelConfig,
    pub refiner: ModelConfig,
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub novelty: NoveltyParams,
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default = "default_training")]
    pub training_limits: RolloutLimits,
    #[serde(default = "default_inference")]
    pub inference_limits: RolloutLimits,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_char_budget")]
    pub observation_char_budget: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub eval_failure_policy: EvalFailurePolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub policy_temperature: f64,
    #[serde(default = "default_judge_tokens")]
    pub judge_max_tokens: u32,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: {message}", location(file, *line))]
    Input { file: PathBuf, line: Option<usize>, message: String },
    #[error("cannot write {}: {message}", file.display())]
    Output { file: PathBuf, message: String },
}

fn location(file: &Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}", file.display()),
        None => file.display().to_string(),
    }
}

fn config_error(path: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config { path: path.into(), message: message.into() }
}

impl RunConfig {
    /// Parses a JSON config; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. A relative corpus path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Input {
            file: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let RetrievalConfig::Lexical { corpus } = &mut cfg.retrieval {
            if corpus.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *corpus = base.join(&*corpus);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k == 0 {
            return Err(config_error("top_k", "must be >= 1"));
        }
        self.novelty.validate(self.top_k).map_err(|m| config_error("novelty.k_threshold", m))?;
        self.reward.validate().map_err(|e| config_error("reward", e.to_string()))?;
        self.training_limits.validate().map_err(|m| config_error("training_limits", m))?;
        self.inference_limits.validate().map_err(|m| config_error("inference_limits", m))?;
        if self.parallelism == 0 {
            return Err(config_error("parallelism", "must be >= 1"));
        }
        if self.observation_char_budget == 0 {
            return Err(config_error("observation_char_budget", "must be >= 1"));
        }
        if self.policy_temperature.is_nan() || self.policy_temperature < 0.0 {
            return Err(config_error("policy_temperature", "must be >= 0"));
        }
        if self.judge_max_tokens == 0 {
            return Err(config_error("judge_max_tokens", "must be >= 1"));
        }
        Ok(())
    }

    pub fn agent_options(&self, profile: Profile) -> AgentOptions {
        AgentOptions {
            limits: match profile {
                Profile::Training => self.training_limits,
                Profile::Inference => self.inference_limits,
            },
            top_k: self.top_k,
            observation_char_budget: self.observation_char_budget,
            temperature: self.policy_temperature,
            seed: Some(self.seed),
        }
    }

    pub fn assess_config(&self) -> AssessConfig {
        AssessConfig {
            novelty: self.novelty,
            on_parse_failure: self.eval_failure_policy,
            max_tokens: self.judge_max_tokens,
            seed: Some(self.seed),
            max_in_flight: self.parallelism,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            max_tokens: self.judge_max_tokens,
            seed: Some(self.seed),
            max_in_flight: self.parallelism,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            reward: self.reward,
            agent: self.agent_options(Profile::Training),
            assess: self.assess_config(),
            refine: self.refine_config(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Training,
    #[default]
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModelRole {
    Policy,
    Evaluator,
    Refiner,
}

/// The four resolved backends of a run.
#[derive(Clone)]
pub struct Backends {
    pub policy: Arc<dyn LanguageModel>,
    pub evaluator: Arc<dyn LanguageModel>,
    pub refiner: Arc<dyn LanguageModel>,
    pub retriever: Arc<dyn Retriever>,
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            policy: model(&cfg.policy, ModelRole::Policy, cfg.seed, "policy")?,
            evaluator: model(&cfg.evaluator, ModelRole::Evaluator, cfg.seed, "evaluator")?,
            refiner: model(&cfg.refiner, ModelRole::Refiner, cfg.seed, "refiner")?,
            retriever: retriever(&cfg.retrieval)?,
        })
    }

    fn stage(&self) -> StageBackends<'_> {
        StageBackends {
            policy: self.policy.as_ref(),
            retriever: self.retriever.as_ref(),
            evaluator: self.evaluator.as_ref(),
            refiner: self.refiner.as_ref(),
        }
    }
}

fn model(
    cfg: &ModelConfig,
    role: ModelRole,
    run_seed: u64,
    field: &str,
) -> Result<Arc<dyn LanguageModel>, PipelineError> {
    Ok(match cfg {
        ModelConfig::Chat { endpoint, model, api_key_env } => {
            let client = ChatClient::new(endpoint.clone(), model.clone());
            match api_key_env {
                Some(var) => Arc::new(
                    client
                        .with_api_key_from_env(var)
                        .map_err(|e| config_error(&format!("{field}.api_key_env"), e.to_string()))?,
                ),
                None => Arc::new(client),
            }
        }
        ModelConfig::Scripted { responses } => Arc::new(ScriptedModel::new(responses.clone())),
        ModelConfig::Seeded { seed } => {
            let seed = seed.unwrap_or(run_seed);
            match role {
                ModelRole::Policy => Arc::new(SeededPolicy::new(seed)),
                ModelRole::Evaluator => Arc::new(SeededJudge::new(seed)),
                ModelRole::Refiner => Arc::new(SeededRefiner::new(seed)),
            }
        }
    })
}

fn retriever(cfg: &RetrievalConfig) -> Result<Arc<dyn Retriever>, PipelineError> {
    Ok(match cfg {
        RetrievalConfig::Lexical { corpus } => {
            let index = LexicalIndex::from_jsonl(corpus).map_err(|e| PipelineError::Input {
                file: corpus.clone(),
                line: None,
                message: e.to_string(),
            })?;
            if index.is_empty() {
                return Err(PipelineError::Input {
                    file: corpus.clone(),
                    line: None,
                    message: "corpus is empty".into(),
                });
            }
            Arc::new(index)
        }
        RetrievalConfig::Service { base_url } => Arc::new(RetrievalServiceClient::new(base_url.clone())),
        RetrievalConfig::Web { endpoint, api_key_env } => Arc::new(
            WebSearchClient::from_env(endpoint.clone(), api_key_env)
                .map_err(|e| config_error("retrieval.api_key_env", e.to_string()))?,
        ),
    })
}

/// One input question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    #[serde(default, alias = "answer")]
    pub golden_answer: Option<String>,
}

/// Assessment line: the step assessment tagged with its trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub trajectory_id: String,
    #[serde(flatten)]
    pub assessment: StepAssessment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedRecord {
    pub trajectory_id: String,
    #[serde(flatten)]
    pub outcome: RefinementOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub line: usize,
    pub kind: String,
    pub message: String,
}

/// Counts for one run. `retained + excluded + errored == inputs`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub subcommand: String,
    pub inputs: usize,
    pub retained: usize,
    pub excluded: usize,
    pub errored: usize,
    /// Output records discarded after processing (e.g. unparseable teacher output).
    pub dropped: usize,
    pub records_written: usize,
    pub exclusion_reasons: BTreeMap<String, usize>,
    pub error_tallies: BTreeMap<String, usize>,
    /// Non-fatal events such as per-step fallbacks.
    pub notes: BTreeMap<String, usize>,
    pub failures: Vec<RecordFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

impl RunReport {
    /// 0 on full success, 2 when some records errored.
    pub fn exit_code(&self) -> i32 {
        if self.errored > 0 {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Rollout { questions: PathBuf, out: PathBuf, profile: Profile },
    Assess { trajectories: PathBuf, out: PathBuf },
    Refine { trajectories: PathBuf, assessments: PathBuf, out: PathBuf },
    BuildSft { trajectories: PathBuf, assessments: PathBuf, out: PathBuf },
    BuildDpo { questions: PathBuf, out: PathBuf },
    BuildGrpo { questions: PathBuf, out: PathBuf, screen_trials: Option<usize> },
    JudgeDistill { trajectories: PathBuf, out: PathBuf },
    Eval { trajectories: PathBuf, assessments: Option<PathBuf>, out: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rollout { .. } => "rollout",
            Command::Assess { .. } => "assess",
            Command::Refine { .. } => "refine",
            Command::BuildSft { .. } => "build-sft",
            Command::BuildDpo { .. } => "build-dpo",
            Command::BuildGrpo { .. } => "build-grpo",
            Command::JudgeDistill { .. } => "judge-distill",
            Command::Eval { .. } => "eval",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Command::Rollout { out, .. }
            | Command::Assess { out, .. }
            | Command::Refine { out, .. }
            | Command::BuildSft { out, .. }
            | Command::BuildDpo { out, .. }
            | Command::BuildGrpo { out, .. }
            | Command::JudgeDistill { out, .. }
            | Command::Eval { out, .. } => out,
        }
    }

    /// Whether the subcommand calls any model or retrieval backend.
    pub fn needs_backends(&self) -> bool {
        !matches!(self, Command::BuildSft { .. } | Command::Eval { .. })
    }

    /// Where the run report goes: next to the output, `<stem>.report.json`.
    pub fn report_path(&self) -> PathBuf {
        self.out().with_extension("report.json")
    }
}

/// Reads a JSONL file into `(line_number, record)` pairs, skipping blank
/// lines. Any malformed line is fatal.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Input {
        file: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let value = serde_path_to_error::deserialize(de).map_err(|e| PipelineError::Input {
            file: path.to_path_buf(),
            line: Some(i + 1),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// JSONL writer that only replaces the destination when finished.
pub struct AtomicJsonl {
    path: PathBuf,
    file: BufWriter<tempfile::NamedTempFile>,
    written: usize,
}

impl AtomicJsonl {
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let err =
            |e: std::io::Error| PipelineError::Output { file: path.to_path_buf(), message: e.to_string() };
        fs::create_dir_all(&dir).map_err(err)?;
        let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(err)?;
        Ok(Self { path: path.to_path_buf(), file: BufWriter::new(tmp), written: 0 })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), PipelineError> {
        let line = serde_json::to_string(record).map_err(|e| self.error(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| self.error(e.to_string()))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(self) -> Result<usize, PipelineError> {
        let path = self.path.clone();
        let err = |m: String| PipelineError::Output { file: path.clone(), message: m };
        let tmp = self.file.into_inner().map_err(|e| err(e.to_string()))?;
        tmp.as_file().sync_all().map_err(|e| err(e.to_string()))?;
        tmp.persist(&self.path).map_err(|e| err(e.to_string()))?;
        Ok(self.written)
    }

    fn error(&self, message: String) -> PipelineError {
        PipelineError::Output { file: self.path.clone(), message }
    }
}

/// Writes a JSON document atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let err = |m: String| PipelineError::Output { file: path.to_path_buf(), message: m };
    let mut text = serde_json::to_string_pretty(value).map_err(|e| err(e.to_string()))?;
    text.push('\n');
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| err(e.to_string()))?;
    tmp.write_all(text.as_bytes()).map_err(|e| err(e.to_string()))?;
    tmp.persist(path).map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// What became of one input record.
enum Status {
    Retained,
    Excluded(&'static str),
    Errored(&'static str, String),
}

struct Processed<T> {
    line: usize,
    records: Vec<T>,
    status: Status,
    notes: Vec<&'static str>,
    dropped: usize,
}

impl<T> Processed<T> {
    fn new(line: usize, status: Status) -> Self {
        Self { line, records: Vec::new(), status, notes: Vec::new(), dropped: 0 }
    }

    fn retained(line: usize, records: Vec<T>) -> Self {
        Self { records, ..Self::new(line, Status::Retained) }
    }

    fn errored(line: usize, kind: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(line, Status::Errored(kind, e.to_string()))
    }
}

struct Sink {
    writer: AtomicJsonl,
    report: RunReport,
}

impl Sink {
    fn new(cmd: &Command, inputs: usize) -> Result<Self, PipelineError> {
        Ok(Self {
            writer: AtomicJsonl::create(cmd.out())?,
            report: RunReport { subcommand: cmd.name().to_string(), inputs, ..RunReport::default() },
        })
    }

    fn accept<T: Serialize>(&mut self, p: Processed<T>) -> Result<(), PipelineError> {
        for r in &p.records {
            self.writer.write(r)?;
        }
        let report = &mut self.report;
        for n in p.notes {
            *report.notes.entry(n.to_string()).or_default() += 1;
        }
        report.dropped += p.dropped;
        match p.status {
            Status::Retained => report.retained += 1,
            Status::Excluded(reason) => {
                report.excluded += 1;
                *report.exclusion_reasons.entry(reason.to_string()).or_default() += 1;
            }
            Status::Errored(kind, message) => {
                report.errored += 1;
                *report.error_tallies.entry(kind.to_string()).or_default() += 1;
                tracing::warn!(line = p.line, kind, %message, "record failed");
                report.failures.push(RecordFailure { line: p.line, kind: kind.to_string(), message });
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunReport, PipelineError> {
        self.report.records_written = self.writer.finish()?;
        Ok(self.report)
    }
}

fn trajectory_key(t: &Trajectory, line: usize) -> String {
    t.id.clone().unwrap_or_else(|| line.to_string())
}

fn question_key(q: &QuestionRecord, line: usize) -> String {
    q.id.clone().unwrap_or_else(|| line.to_string())
}

/// Groups assessment lines by trajectory id, each group sorted by step.
fn assessments_by_trajectory(path: &Path) -> Result<BTreeMap<String, Vec<StepAssessment>>, PipelineError> {
    let mut map: BTreeMap<String, Vec<StepAssessment>> = BTreeMap::new();
    for (_, rec) in read_jsonl::<AssessmentRecord>(path)? {
        map.entry(rec.trajectory_id).or_default().push(rec.assessment);
    }
    for v in map.values_mut() {
        v.sort_by_key(|a| a.step_index);
    }
    Ok(map)
}

fn credit_kind(e: &CreditError) -> &'static str {
    match e {
        CreditError::AtStep { source, .. } => credit_kind(source),
        CreditError::EvalParseFailure { .. } => "eval_parse",
        CreditError::Backend(_) => "evaluator_backend",
        _ => "malformed_trajectory",
    }
}

fn refine_kind(e: &RefineError) -> &'static str {
    match e {
        RefineError::RefineParseFailure { .. } => "refine_parse",
        RefineError::Backend(_) => "refiner_backend",
        RefineError::Rollout(_) => "policy_backend",
        RefineError::Misaligned(_) => "misaligned_assessments",
    }
}

fn stage_kind(e: &StageError) -> &'static str {
    match e {
        StageError::Rollout(_) => "policy_backend",
        StageError::Credit(c) => credit_kind(c),
        StageError::Refine(r) => refine_kind(r),
        StageError::Curriculum(_) => "curriculum",
    }
}

fn fallback_notes(assessments: &[StepAssessment]) -> Vec<&'static str> {
    assessments.iter().filter(|a| a.usefulness_unparsed).map(|_| "eval_parse_fallback").collect()
}

/// Runs a subcommand. Backend-driven subcommands require a config;
/// `build-sft` and `eval` run without one.
pub async fn execute(cmd: &Command, cfg: Option<&RunConfig>) -> Result<RunReport, PipelineError> {
    if !cmd.needs_backends() {
        return execute_offline(cmd);
    }
    let cfg = cfg.ok_or_else(|| config_error("", format!("`{}` requires --config", cmd.name())))?;
    let backends = Backends::from_config(cfg)?;
    execute_with(cmd, cfg, &backends).await
}

/// Runs a subcommand against already resolved backends.
pub async fn execute_with(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<RunReport, PipelineError> {
    let report = match cmd {
        Command::Rollout { questions, profile, .. } => {
            rollout(cmd, cfg, backends, questions, *profile).await?
        }
        Command::Assess { trajectories, .. } => assess(cmd, cfg, backends, trajectories).await?,
        Command::Refine { trajectories, assessments, .. } => {
            refine(cmd, cfg, backends, trajectories, assessments).await?
        }
        Command::BuildDpo { questions, .. } => build_dpo(cmd, cfg, backends, questions).await?,
        Command::BuildGrpo { questions, screen_trials, .. } => {
            build_grpo(cmd, cfg, backends, questions, *screen_trials).await?
        }
        Command::JudgeDistill { trajectories, .. } => judge_distill(cmd, cfg, backends, trajectories).await?,
        Command::BuildSft { .. } | Command::Eval { .. } => return execute_offline(cmd),
    };
    write_json_atomic(&cmd.report_path(), &report)?;
    Ok(report)
}

fn execute_offline(cmd: &Command) -> Result<RunReport, PipelineError> {
    let report = match cmd {
        Command::BuildSft { trajectories, assessments, .. } => build_sft(cmd, trajectories, assessments)?,
        Command::Eval { trajectories, assessments, out } => {
            eval(cmd, trajectories, assessments.as_deref(), out)?
        }
        _ => unreachable!("backend-driven subcommand"),
    };
    write_json_atomic(&cmd.report_path(), &report)?;
    Ok(report)
}

async fn rollout(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    questions: &Path,
    profile: Profile,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<QuestionRecord>(questions)?;
    let mut sink = Sink::new(cmd, input.len())?;
    let agent = cfg.agent_options(profile);
    let mut results = stream::iter(input)
        .map(|(line, q)| {
            let agent = &agent;
            async move {
                match run_rollout(&q.question, backends.policy.as_ref(), backends.retriever.as_ref(), agent)
                    .await
                {
                    Ok(mut t) => {
                        t.id = Some(question_key(&q, line));
                        t.golden_answer = q.golden_answer;
                        Processed::retained(line, vec![t])
                    }
                    Err(e) => Processed::errored(line, "policy_backend", e),
                }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}

async fn assess(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    trajectories: &Path,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<Trajectory>(trajectories)?;
    let mut sink = Sink::new(cmd, input.len())?;
    let assess_cfg = cfg.assess_config();
    let mut results = stream::iter(input)
        .map(|(line, t)| {
            let assess_cfg = &assess_cfg;
            async move {
                let Some(golden) = t.golden_answer.clone() else {
                    return Processed::errored(
                        line,
                        "missing_golden_answer",
                        "trajectory has no golden_answer",
                    );
                };
                match assess_trajectory(&t, &golden, backends.evaluator.as_ref(), assess_cfg).await {
                    Ok(a) => {
                        let notes = fallback_notes(&a);
                        let key = trajectory_key(&t, line);
                        let records = a
                            .into_iter()
                            .map(|assessment| AssessmentRecord { trajectory_id: key.clone(), assessment })
                            .collect();
                        Processed { notes, ..Processed::retained(line, records) }
                    }
                    Err(e) => Processed::errored(line, credit_kind(&e), e),
                }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}

async fn refine(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    trajectories: &Path,
    assessments: &Path,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<Trajectory>(trajectories)?;
    let by_id = assessments_by_trajectory(assessments)?;
    let mut sink = Sink::new(cmd, input.len())?;
    let agent = cfg.agent_options(Profile::Training);
    let refine_cfg = cfg.refine_config();
    let rb = RefineBackends {
        policy: backends.policy.as_ref(),
        retriever: backends.retriever.as_ref(),
        refiner: backends.refiner.as_ref(),
    };
    let mut results = stream::iter(input)
        .map(|(line, t)| {
            let (agent, refine_cfg, by_id) = (&agent, &refine_cfg, &by_id);
            async move {
                let key = trajectory_key(&t, line);
                let a = by_id.get(&key).map(Vec::as_slice).unwrap_or_default();
                let batch = match refine_and_regenerate(&t, a, rb, agent, refine_cfg).await {
                    Ok(b) => b,
                    Err(e) => return Processed::errored(line, refine_kind(&e), e),
                };
                let records: Vec<RefinedRecord> = batch
                    .outcomes
                    .into_iter()
                    .map(|outcome| RefinedRecord { trajectory_id: key.clone(), outcome })
                    .collect();
                let mut notes = vec!["refinement_skipped_identical"; batch.skipped.len()];
                let status = match batch.failures.first() {
                    Some((step, e)) => Status::Errored(refine_kind(e), format!("step {step}: {e}")),
                    None if records.is_empty() => Status::Excluded("nothing_refined"),
                    None => Status::Retained,
                };
                notes.extend(batch.failures.iter().skip(1).map(|(_, e)| refine_kind(e)));
                Processed { line, records, status, notes, dropped: 0 }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}

fn build_sft(cmd: &Command, trajectories: &Path, assessments: &Path) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<Trajectory>(trajectories)?;
    let by_id = assessments_by_trajectory(assessments)?;
    let mut sink = Sink::new(cmd, input.len())?;
    for (i, (line, t)) in input.into_iter().enumerate() {
        let key = trajectory_key(&t, line);
        let Some(golden) = t.golden_answer.clone() else {
            sink.accept(Processed::<()>::errored(
                line,
                "missing_golden_answer",
                "trajectory has no golden_answer",
            ))?;
            continue;
        };
        let run = AssessedRun {
            assessments: by_id.get(&key).cloned().unwrap_or_default(),
            trajectory: t,
            golden_answer: golden,
        };
        let p = match sft_eligible(&run, i) {
            Ok(true) => Processed::retained(line, vec![sft_record(&run.trajectory)]),
            Ok(false) => Processed::new(line, Status::Excluded("failed_screen")),
            Err(e) => Processed::errored(line, "missing_assessment", e),
        };
        sink.accept(p)?;
    }
    sink.finish()
}

fn eval(
    cmd: &Command,
    trajectories: &Path,
    assessments: Option<&Path>,
    out: &Path,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<Trajectory>(trajectories)?;
    let by_id = match assessments {
        Some(p) => Some(assessments_by_trajectory(p)?),
        None => None,
    };
    let mut report =
        RunReport { subcommand: cmd.name().to_string(), inputs: input.len(), ..RunReport::default() };
    let mut records = Vec::new();
    let fail = |report: &mut RunReport, line: usize, kind: &str, message: String| {
        report.errored += 1;
        *report.error_tallies.entry(kind.to_string()).or_default() += 1;
        report.failures.push(RecordFailure { line, kind: kind.to_string(), message });
    };
    for (line, t) in input {
        let Some(golden) = t.golden_answer.clone() else {
            fail(&mut report, line, "missing_golden_answer", "trajectory has no golden_answer".into());
            continue;
        };
        let a = match &by_id {
            Some(map) => {
                let a = map.get(&trajectory_key(&t, line)).cloned().unwrap_or_default();
                if a.len() != t.search_round_count() {
                    let msg = format!("{} assessments for {} search steps", a.len(), t.search_round_count());
                    fail(&mut report, line, "missing_assessment", msg);
                    continue;
                }
                a
            }
            None => Vec::new(),
        };
        records.push(EvalRecord::from_trajectory(&t, &a, &golden));
        report.retained += 1;
    }
    report.eval = evaluate(&records).ok();
    write_json_atomic(out, &report.eval)?;
    report.records_written = usize::from(report.eval.is_some());
    Ok(report)
}

async fn build_dpo(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    questions: &Path,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<QuestionRecord>(questions)?;
    let mut sink = Sink::new(cmd, input.len())?;
    let stage = cfg.stage_config();
    let mut results = stream::iter(input)
        .map(|(line, q)| {
            let stage = &stage;
            async move {
                match dpo_for_question(&q, backends, stage).await {
                    Ok((Some(pair), notes)) => Processed { notes, ..Processed::retained(line, vec![pair]) },
                    Ok((None, notes)) => {
                        Processed { notes, ..Processed::new(line, Status::Excluded("no_strict_preference")) }
                    }
                    Err(DpoFailure::Excluded(reason)) => Processed::new(line, Status::Excluded(reason)),
                    Err(DpoFailure::Stage(e)) => Processed::errored(line, stage_kind(&e), e),
                    Err(DpoFailure::MissingGolden) => {
                        Processed::errored(line, "missing_golden_answer", "question has no golden_answer")
                    }
                }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}

enum DpoFailure {
    MissingGolden,
    Excluded(&'static str),
    Stage(StageError),
}

impl<E: Into<StageError>> From<E> for DpoFailure {
    fn from(e: E) -> Self {
        DpoFailure::Stage(e.into())
    }
}

async fn dpo_for_question(
    q: &QuestionRecord,
    backends: &Backends,
    stage: &StageConfig,
) -> Result<(Option<DpoRecord>, Vec<&'static str>), DpoFailure> {
    let golden = q.golden_answer.as_deref().ok_or(DpoFailure::MissingGolden)?;
    let b = backends.stage();
    let original = run_rollout(&q.question, b.policy, b.retriever, &stage.agent).await?;
    let original_a = assess_trajectory(&original, golden, b.evaluator, &stage.assess).await?;
    let mut notes = fallback_notes(&original_a);
    let batch =
        refine_and_regenerate(&original, &original_a, b.refine(), &stage.agent, &stage.refine).await?;
    notes.extend(batch.failures.iter().map(|(_, e)| refine_kind(e)));
    notes.extend(batch.skipped.iter().map(|_| "refinement_skipped_identical"));
    let mut refinements = Vec::new();
    for o in batch.outcomes {
        let a = assess_trajectory(&o.regenerated, golden, b.evaluator, &stage.assess).await?;
        notes.extend(fallback_notes(&a));
        refinements.push((o.regenerated, a));
    }
    let candidates = candidates_from((&original, &original_a), &refinements, golden)?;
    match build_preference_pairs(&q.question, &candidates) {
        Ok(pair) => Ok((pair.as_ref().map(DpoRecord::from), notes)),
        Err(CurriculumError::FewerThanTwoCandidates(_)) => {
            Err(DpoFailure::Excluded("fewer_than_two_candidates"))
        }
        Err(e) => Err(e.into()),
    }
}

async fn build_grpo(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    questions: &Path,
    screen_trials: Option<usize>,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<QuestionRecord>(questions)?;
    let mut sink = Sink::new(cmd, input.len())?;
    let stage = cfg.stage_config();
    let mut results = stream::iter(input)
        .map(|(line, q)| {
            let stage = &stage;
            async move {
                let Some(golden) = q.golden_answer.as_deref() else {
                    return Processed::errored(
                        line,
                        "missing_golden_answer",
                        "question has no golden_answer",
                    );
                };
                let b = backends.stage();
                if let Some(trials) = screen_trials {
                    match is_unresolved(&q.question, golden, b.policy, b.retriever, &stage.agent, trials)
                        .await
                    {
                        Ok(true) => {}
                        Ok(false) => return Processed::new(line, Status::Excluded("resolved_in_screen")),
                        Err(e) => return Processed::errored(line, "policy_backend", e),
                    }
                }
                match expand_rollouts(&q.question, golden, b, stage).await {
                    Ok(group) => {
                        let notes =
                            group.members.iter().flat_map(|m| fallback_notes(&m.assessments)).collect();
                        Processed { notes, ..Processed::retained(line, vec![GrpoRecord::from(&group)]) }
                    }
                    Err(ExpandError { source, partial }) => Processed::errored(
                        line,
                        stage_kind(&source),
                        format!("{source} ({} members collected)", partial.len()),
                    ),
                }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}

/// Captures teacher scoring and refinement outputs for every search step of
/// each trajectory and keeps those that parse.
async fn judge_distill(
    cmd: &Command,
    cfg: &RunConfig,
    backends: &Backends,
    trajectories: &Path,
) -> Result<RunReport, PipelineError> {
    let input = read_jsonl::<Trajectory>(trajectories)?;
    let mut sink = Sink::new(cmd, input.len())?;
    // one call at a time per trajectory keeps the capture order stable
    let assess_cfg = AssessConfig {
        on_parse_failure: EvalFailurePolicy::ScoreZero,
        max_in_flight: 1,
        ..cfg.assess_config()
    };
    let refine_cfg = cfg.refine_config();
    let mut results = stream::iter(input)
        .map(|(line, t)| {
            let (assess_cfg, refine_cfg) = (&assess_cfg, &refine_cfg);
            async move {
                let Some(golden) = t.golden_answer.clone() else {
                    return Processed::errored(
                        line,
                        "missing_golden_answer",
                        "trajectory has no golden_answer",
                    );
                };
                let evaluator = RecordingModel::new(backends.evaluator.clone());
                let refiner = RecordingModel::new(backends.refiner.clone());
                let assessments = match assess_trajectory(&t, &golden, &evaluator, assess_cfg).await {
                    Ok(a) => a,
                    Err(e) => return Processed::errored(line, credit_kind(&e), e),
                };
                for a in assessments.iter().filter(|a| a.s == 0) {
                    let history = render_history(&t, a.step_index, false);
                    match refine_query(&t.question, &history, &a.t, &refiner, refine_cfg).await {
                        Ok(_) => {}
                        Err(RefineError::RefineParseFailure { .. }) => {}
                        Err(e) => return Processed::errored(line, refine_kind(&e), e),
                    }
                }
                let captures: Vec<JudgeCapture> = evaluator
                    .take_calls()
                    .into_iter()
                    .map(|c| (JudgeTask::Score, c))
                    .chain(refiner.take_calls().into_iter().map(|c| (JudgeTask::Refine, c)))
                    .filter_map(|(task, c)| {
                        Some(JudgeCapture {
                            task,
                            filled_prompt: c.request.last(crate::backends::Role::User)?.to_string(),
                            teacher_output: c.output?,
                        })
                    })
                    .collect();
                let (records, report) = build_judge_sft(&captures);
                Processed { dropped: report.dropped, ..Processed::retained(line, records) }
            }
        })
        .buffered(cfg.parallelism);
    while let Some(p) = results.next().await {
        sink.accept(p)?;
    }
    sink.finish()
}
