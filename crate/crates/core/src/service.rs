//! End-to-end orchestration: chat turns, pipeline runs, course lifecycle and
//! the graph view. Every store write goes through here.
//!
//! Lock order is `pipeline` → `accept` → data locks. Model calls are made
//! with no data lock held, so a chat turn never waits on a pipeline run.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::{
    activity_status, ActivityStatus, ChatError, ChatStore, Conversation, ConversationId,
    ImportReport, Message, Role,
};
use crate::clock::{string_id, Clock, IdSource, SystemClock};
use crate::config::{LoomConfig, ProviderKind};
use crate::course::{
    extract_excerpts, generate_course, learner_difficulty, Course, CourseError, CourseId,
    CourseStore,
};
use crate::gateway::{
    AgentName, AgentRequest, CallLog, Gateway, GatewayError, MockProvider, MockScript,
    OpenAiCompatible, Provider,
};
use crate::graph::{
    progress_fraction, AppliedAction, GoalId, GraphError, GraphEvent, LabelChange, LearnerGraph,
    ModuleStatus, SelfReportKind,
};
use crate::quiz::{grade, ItemFeedback};
use crate::regroup::{plan_regroup, DroppedAction, RegroupError};
use crate::storage::{Journal, Storage, StorageError};
use crate::summarizer::{
    active_summaries, is_stale, resummarize_if_stale, summarize, ChatSummary, Resummarized,
    SummarizeError, SummaryStore,
};
use crate::text::{char_prefix, normalize_label};
use crate::topic::{
    decide_and_propose, CourseOutlineProposal, Coverage, ProposalId, ProposalStatus, ProposalStore,
    TopicError,
};

string_id!(
    /// Identifier of a pipeline run.
    RunId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    MessageAppended,
    Manual,
    Scheduled,
    CourseCompleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summarize,
    Decide,
    Regroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub outcome: RunOutcome,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub id: RunId,
    pub learner_id: String,
    pub trigger: Trigger,
    pub stages_executed: Vec<Stage>,
    pub stages: Vec<StageReport>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub outcome: RunOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decide_started_at: Option<DateTime<Utc>>,
    pub summaries_written: usize,
    pub proposal_ids: Vec<ProposalId>,
    pub regrouped_courses: Vec<CourseId>,
}

impl PipelineRun {
    pub fn errors(&self) -> Vec<&str> {
        self.stages
            .iter()
            .flat_map(|s| s.errors.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown proposal {0}")]
    UnknownProposal(ProposalId),
    #[error("unknown course {0}")]
    UnknownCourse(CourseId),
    #[error("module index {index} out of range for a {count}-module course")]
    ModuleIndexOutOfRange { index: usize, count: usize },
    #[error("expected {expected} answers, got {got}")]
    AnswerCountMismatch { expected: usize, got: usize },
    #[error("proposal {id} is {status:?}")]
    InvalidProposalStatus {
        id: ProposalId,
        status: ProposalStatus,
    },
    #[error("assistant reply failed for {conversation_id}: {error}")]
    ChatTurnFailed {
        conversation_id: ConversationId,
        error: GatewayError,
    },
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Course(#[from] CourseError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Regroup(#[from] RegroupError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("configuration: {0}")]
    Config(String),
}

impl ServiceError {
    /// Stable machine-readable code for API clients.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::InvalidInput(_) => "invalid_input",
            ServiceError::UnknownProposal(_) => "unknown_proposal",
            ServiceError::UnknownCourse(_) | ServiceError::Graph(GraphError::UnknownCourse(_)) => {
                "unknown_course"
            }
            ServiceError::ModuleIndexOutOfRange { .. }
            | ServiceError::Graph(GraphError::ModuleIndexOutOfRange { .. }) => {
                "module_index_out_of_range"
            }
            ServiceError::AnswerCountMismatch { .. } => "answer_count_mismatch",
            ServiceError::InvalidProposalStatus { .. } => "invalid_proposal_status",
            ServiceError::ChatTurnFailed { .. } => "assistant_failed",
            ServiceError::Chat(ChatError::UnknownConversation(_)) => "unknown_conversation",
            ServiceError::Chat(ChatError::InvalidMessage(_)) => "invalid_message",
            ServiceError::Chat(ChatError::UnparseableDocument(_)) => "unparseable_document",
            ServiceError::Chat(_) => "chat_error",
            ServiceError::Summarize(_) => "agent_failure",
            ServiceError::Topic(_) => "agent_failure",
            ServiceError::Course(CourseError::MissingSource(_)) => "missing_source",
            ServiceError::Course(CourseError::ValidationExhausted { .. }) => "validation_exhausted",
            ServiceError::Course(_) => "agent_failure",
            ServiceError::Graph(GraphError::IllegalTransition { .. }) => "illegal_transition",
            ServiceError::Graph(GraphError::DuplicateGoalLabel(_)) => "duplicate_goal_label",
            ServiceError::Graph(_) => "graph_error",
            ServiceError::Regroup(_) => "agent_failure",
            ServiceError::Gateway(GatewayError::Busy) => "busy",
            ServiceError::Gateway(_) => "agent_failure",
            ServiceError::Storage(_) => "storage_error",
            ServiceError::Config(_) => "config_error",
        }
    }
}

/// How follow-up work (re-summarization, debounced pipeline runs, regroups)
/// is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackgroundMode {
    /// Right after the request that scheduled it, on the caller's thread.
    #[default]
    Inline,
    /// Queued until [`Loom::run_pending_jobs`] or a worker picks it up.
    Queued,
}

#[derive(Clone)]
pub struct LoomOptions {
    pub learner_id: String,
    pub window_days: u32,
    pub max_proposals: usize,
    pub excerpt_budget: usize,
    pub debounce: Duration,
    pub background: BackgroundMode,
    pub clock: Arc<dyn Clock>,
    /// Seed for identifiers and generation calls; `None` is random.
    pub seed: Option<u64>,
}

impl Default for LoomOptions {
    fn default() -> Self {
        Self::from_config(&LoomConfig::default())
    }
}

impl LoomOptions {
    pub fn from_config(config: &LoomConfig) -> Self {
        Self {
            learner_id: config.learner_id.clone(),
            window_days: config.window_days,
            max_proposals: config.max_proposals,
            excerpt_budget: config.excerpt_budget,
            debounce: Duration::minutes(config.debounce_minutes),
            background: BackgroundMode::Inline,
            clock: Arc::new(SystemClock),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Job {
    Resummarize(ConversationId),
    Pipeline(Trigger),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdempotencyRecord {
    key: String,
    op: String,
    response: Value,
}

/// The learner graph plus its event journal. Mutations run on a copy and
/// are swapped in only after the new events are durable.
struct GraphStore {
    graph: LearnerGraph,
    journal: Journal<GraphEvent>,
}

impl GraphStore {
    fn open(storage: &Storage) -> Result<Self, ServiceError> {
        let (journal, events) = storage.open_journal::<GraphEvent>("graph")?;
        let graph = LearnerGraph::replay(&events)?;
        Ok(Self { graph, journal })
    }

    fn commit<R>(
        &mut self,
        op: impl FnOnce(&mut LearnerGraph) -> Result<R, GraphError>,
    ) -> Result<R, ServiceError> {
        let mut next = self.graph.clone();
        let before = next.event_log().len();
        let result = op(&mut next)?;
        for event in &next.event_log()[before..] {
            self.journal.append(event)?;
        }
        self.graph = next;
        Ok(result)
    }
}

/// Result slot shared by overlapping pipeline runs.
#[derive(Default)]
struct RunSlot {
    result: Mutex<Option<PipelineRun>>,
    ready: Condvar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub conversation_id: ConversationId,
    pub assistant_text: String,
    pub message_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatListing {
    pub id: ConversationId,
    pub title: String,
    pub message_count: usize,
    pub last_referenced_at: DateTime<Utc>,
    pub status: ActivityStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizResult {
    pub course_id: CourseId,
    pub module_index: usize,
    pub score: f64,
    pub items: Vec<ItemFeedback>,
    pub module_status: ModuleStatus,
    pub best_score: Option<f64>,
    pub course_completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleView {
    pub module_index: usize,
    pub title: String,
    pub status: ModuleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quiz_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseView {
    pub course_id: CourseId,
    pub title: String,
    pub completed: bool,
    /// Share of modules that are not `not_started`, 0–100.
    pub progress_percent: f64,
    pub modules: Vec<ModuleView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalView {
    pub goal_id: GoalId,
    pub label: String,
    pub label_history: Vec<LabelChange>,
    pub courses: Vec<CourseView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub learner_id: String,
    pub goals: Vec<GoalView>,
    pub ungrouped_courses: Vec<CourseView>,
    pub event_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegroupResult {
    pub course_id: CourseId,
    pub applied: Vec<AppliedAction>,
    pub dropped: Vec<DroppedAction>,
}

pub struct Loom {
    options: LoomOptions,
    ids: IdSource,
    gateway: Arc<Gateway>,
    chats: RwLock<ChatStore>,
    summaries: Mutex<SummaryStore>,
    proposals: Mutex<ProposalStore>,
    courses: Mutex<CourseStore>,
    graph: RwLock<GraphStore>,
    idempotency: Mutex<(BTreeMap<String, Value>, Journal<IdempotencyRecord>)>,
    runs: Mutex<(Vec<PipelineRun>, Journal<PipelineRun>)>,
    pipeline: Mutex<()>,
    accept: Mutex<()>,
    current_run: Mutex<Option<Arc<RunSlot>>>,
    last_auto_run: Mutex<Option<DateTime<Utc>>>,
    jobs: Mutex<VecDeque<Job>>,
    jobs_ready: Condvar,
}

impl std::fmt::Debug for Loom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Loom")
            .field("learner_id", &self.options.learner_id)
            .field("gateway", &self.gateway)
            .finish()
    }
}

/// Builds the provider a config asks for. `mock_override` forces the mock
/// provider, optionally with a script file.
pub fn provider_from_config(
    config: &LoomConfig,
    mock_override: Option<Option<&std::path::Path>>,
) -> Result<Arc<dyn Provider>, ServiceError> {
    let load_script = |path: &std::path::Path| -> Result<Arc<dyn Provider>, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ServiceError::Config(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        let script: MockScript = serde_json::from_str(&text).map_err(|e| {
            ServiceError::Config(format!("bad mock script {}: {e}", path.display()))
        })?;
        Ok(Arc::new(MockProvider::from_script(script)))
    };
    match mock_override {
        Some(Some(path)) => return load_script(path),
        Some(None) => {
            return match &config.provider.mock_script {
                Some(path) => load_script(path),
                None => Ok(Arc::new(MockProvider::synthetic())),
            }
        }
        None => {}
    }
    match config.provider.kind {
        ProviderKind::Mock => match &config.provider.mock_script {
            Some(path) => load_script(path),
            None => Ok(Arc::new(MockProvider::synthetic())),
        },
        ProviderKind::Openai => {
            let key = std::env::var(&config.provider.api_key_env).ok();
            Ok(Arc::new(OpenAiCompatible::new(
                &config.provider.base_url,
                &config.provider.model,
                key,
                std::time::Duration::from_millis(config.gateway.timeout_ms),
            )))
        }
    }
}

impl Loom {
    pub fn open(
        storage: Storage,
        gateway: Gateway,
        options: LoomOptions,
    ) -> Result<Self, ServiceError> {
        let ids = match options.seed {
            Some(seed) => IdSource::seeded(seed),
            None => IdSource::random(),
        };
        let chats = ChatStore::open(&storage)?;
        let summaries = SummaryStore::open(&storage)?;
        let proposals = ProposalStore::open(&storage)?;
        let courses = CourseStore::open(&storage)?;
        let graph = GraphStore::open(&storage)?;
        let (idem_journal, idem_records) =
            storage.open_journal::<IdempotencyRecord>("idempotency")?;
        let idem: BTreeMap<String, Value> = idem_records
            .into_iter()
            .map(|r| (format!("{}:{}", r.op, r.key), r.response))
            .collect();
        let (runs_journal, runs) = storage.open_journal::<PipelineRun>("runs")?;
        let last_auto_run = runs
            .iter()
            .filter(|r| r.trigger == Trigger::MessageAppended)
            .map(|r| r.started_at)
            .max();
        let loom = Self {
            options,
            ids,
            gateway: Arc::new(gateway),
            chats: RwLock::new(chats),
            summaries: Mutex::new(summaries),
            proposals: Mutex::new(proposals),
            courses: Mutex::new(courses),
            graph: RwLock::new(graph),
            idempotency: Mutex::new((idem, idem_journal)),
            runs: Mutex::new((runs, runs_journal)),
            pipeline: Mutex::new(()),
            accept: Mutex::new(()),
            current_run: Mutex::new(None),
            last_auto_run: Mutex::new(last_auto_run),
            jobs: Mutex::new(VecDeque::new()),
            jobs_ready: Condvar::new(),
        };
        loom.recover()?;
        Ok(loom)
    }

    /// Opens a service from a config file's settings.
    pub fn from_config(
        config: &LoomConfig,
        mock_override: Option<Option<&std::path::Path>>,
        background: BackgroundMode,
    ) -> Result<Self, ServiceError> {
        let provider = provider_from_config(config, mock_override)?;
        let storage = Storage::at(&config.data_dir)?;
        let log = CallLog::at(&config.data_dir.join("calls.jsonl"))
            .map_err(|e| ServiceError::Config(format!("cannot open call log: {e}")))?;
        let gateway =
            Gateway::with_agent_contracts(provider, config.gateway.clone()).with_call_log(log);
        let options = LoomOptions {
            background,
            ..LoomOptions::from_config(config)
        };
        Self::open(storage, gateway, options)
    }

    pub fn options(&self) -> &LoomOptions {
        &self.options
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn now(&self) -> DateTime<Utc> {
        self.options.clock.now()
    }

    /// Rolls forward an acceptance interrupted after its course was stored.
    fn recover(&self) -> Result<(), ServiceError> {
        let courses: Vec<Course> = self
            .courses
            .lock()
            .unwrap()
            .list()
            .into_iter()
            .cloned()
            .collect();
        for course in courses {
            self.finish_acceptance(&course)?;
        }
        Ok(())
    }

    /// Every step after the course write, each one skipped when done.
    fn finish_acceptance(&self, course: &Course) -> Result<(), ServiceError> {
        {
            let mut graph = self.graph.write().unwrap();
            if graph.graph.course(&course.id).is_none() {
                graph.commit(|g| {
                    g.register_course(course.id.clone(), course.modules.len(), course.created_at)
                })?;
            }
        }
        let sources = {
            let mut proposals = self.proposals.lock().unwrap();
            let Some(proposal) = proposals.get(&course.proposal_id).cloned() else {
                return Ok(());
            };
            if proposal.status != ProposalStatus::Accepted
                || proposal.course_id.as_ref() != Some(&course.id)
            {
                proposals.set_status(
                    &proposal.id,
                    ProposalStatus::Accepted,
                    course.created_at,
                    Some(course.id.clone()),
                )?;
            }
            proposal.source_chat_ids
        };
        let mut chats = self.chats.write().unwrap();
        for id in &sources {
            if chats.get(id).is_some() {
                chats.touch(id, course.created_at)?;
            }
        }
        Ok(())
    }

    // ── chats ─────────────────────────────────────────────────────────────

    pub fn create_conversation(&self, title: &str) -> Result<Conversation, ServiceError> {
        let id = ConversationId(self.ids.next());
        Ok(self.chats.write().unwrap().create(id, title, self.now())?)
    }

    /// Live conversations, most recent first, with their activity status.
    pub fn chat_listing(&self) -> Vec<ChatListing> {
        let now = self.now();
        self.chats
            .read()
            .unwrap()
            .list()
            .into_iter()
            .map(|c| ChatListing {
                id: c.id.clone(),
                title: c.title.clone(),
                message_count: c.messages.len(),
                last_referenced_at: c.last_referenced_at,
                status: activity_status(c, now, self.options.window_days)
                    .unwrap_or(ActivityStatus::Active),
            })
            .collect()
    }

    pub fn list_conversations(&self) -> Vec<Conversation> {
        self.chats
            .read()
            .unwrap()
            .list()
            .into_iter()
            .cloned()
            .collect()
    }

    /// Conversation without recording a reference.
    pub fn conversation(&self, id: &ConversationId) -> Option<Conversation> {
        self.chats.read().unwrap().get(id).cloned()
    }

    /// Opening a chat counts as referencing it.
    pub fn open_conversation(&self, id: &ConversationId) -> Result<Conversation, ServiceError> {
        let mut chats = self.chats.write().unwrap();
        chats.touch(id, self.now())?;
        Ok(chats
            .get(id)
            .cloned()
            .ok_or_else(|| ChatError::UnknownConversation(id.clone()))?)
    }

    pub fn tombstone_conversation(&self, id: &ConversationId) -> Result<(), ServiceError> {
        Ok(self.chats.write().unwrap().tombstone(id, self.now())?)
    }

    pub fn import_conversations(&self, document: &str) -> Result<ImportReport, ServiceError> {
        Ok(self
            .chats
            .write()
            .unwrap()
            .import_conversations(document, &self.ids, self.now())?)
    }

    pub fn export_conversations(&self) -> String {
        let chats = self.chats.read().unwrap();
        ChatStore::export(chats.all())
    }

    /// Next message time: now, but never before the conversation's last
    /// message.
    fn message_time(&self, conversation: &Conversation) -> DateTime<Utc> {
        let now = self.now();
        conversation
            .last_message_at()
            .map_or(now, |last| last.max(now))
    }

    /// Appends the user's message, gets the assistant's reply and schedules
    /// follow-up work. On a failed reply the user message stays persisted.
    pub fn chat_turn(
        &self,
        conversation_id: Option<&ConversationId>,
        user_text: &str,
    ) -> Result<ChatTurn, ServiceError> {
        if user_text.trim().is_empty() {
            return Err(ServiceError::InvalidInput("message text is empty".into()));
        }
        let conversation = {
            let mut chats = self.chats.write().unwrap();
            let id = match conversation_id {
                Some(id) => id.clone(),
                None => {
                    let id = ConversationId(self.ids.next());
                    chats.create(id.clone(), char_prefix(user_text.trim(), 60), self.now())?;
                    id
                }
            };
            let current = chats
                .get(&id)
                .cloned()
                .ok_or_else(|| ChatError::UnknownConversation(id.clone()))?;
            let at = self.message_time(&current);
            chats.append_message(&id, Message::user(user_text, at))?
        };
        let request = assistant_request(&conversation);
        let reply = self.gateway.call::<AssistantReply>(&request, None);
        let result = match reply {
            Ok(r) => {
                let mut chats = self.chats.write().unwrap();
                let current = chats
                    .get(&conversation.id)
                    .cloned()
                    .expect("conversation exists");
                let at = self.message_time(&current);
                let updated = chats.append_message(
                    &conversation.id,
                    Message::assistant(r.parsed.text.trim(), at),
                )?;
                Ok(ChatTurn {
                    conversation_id: conversation.id.clone(),
                    assistant_text: r.parsed.text.trim().to_string(),
                    message_count: updated.messages.len(),
                })
            }
            Err(error) => Err(ServiceError::ChatTurnFailed {
                conversation_id: conversation.id.clone(),
                error,
            }),
        };
        self.schedule(Job::Resummarize(conversation.id.clone()));
        self.schedule(Job::Pipeline(Trigger::MessageAppended));
        result
    }

    // ── background work ───────────────────────────────────────────────────

    fn schedule(&self, job: Job) {
        {
            let mut jobs = self.jobs.lock().unwrap();
            if !jobs.contains(&job) {
                jobs.push_back(job);
            }
        }
        self.jobs_ready.notify_all();
        if self.options.background == BackgroundMode::Inline {
            self.run_pending_jobs();
        }
    }

    pub fn pending_jobs(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    /// Drains the job queue on the calling thread.
    pub fn run_pending_jobs(&self) {
        loop {
            let Some(job) = self.jobs.lock().unwrap().pop_front() else {
                return;
            };
            match job {
                Job::Resummarize(id) => {
                    if let Err(error) = self.resummarize(&id) {
                        tracing::warn!(conversation = %id, %error, "background resummarize failed");
                    }
                }
                Job::Pipeline(Trigger::MessageAppended) => {
                    let now = self.now();
                    let due = {
                        let mut last = self.last_auto_run.lock().unwrap();
                        let due = last.is_none_or(|t| now - t >= self.options.debounce);
                        if due {
                            *last = Some(now);
                        }
                        due
                    };
                    if due {
                        self.run_pipeline(Trigger::MessageAppended);
                    }
                }
                Job::Pipeline(trigger) => {
                    self.run_pipeline(trigger);
                }
            }
        }
    }

    /// Blocks until a job is queued or `timeout` passes.
    pub fn wait_for_jobs(&self, timeout: std::time::Duration) -> bool {
        let jobs = self.jobs.lock().unwrap();
        if !jobs.is_empty() {
            return true;
        }
        let (jobs, _) = self.jobs_ready.wait_timeout(jobs, timeout).unwrap();
        !jobs.is_empty()
    }

    /// Re-summarizes one conversation if it changed.
    pub fn resummarize(&self, id: &ConversationId) -> Result<Option<ChatSummary>, ServiceError> {
        let Some(conversation) = self.conversation(id) else {
            return Err(ChatError::UnknownConversation(id.clone()).into());
        };
        if conversation.user_message_count() == 0 {
            return Ok(None);
        }
        let current = self.summaries.lock().unwrap().get(id).cloned();
        match resummarize_if_stale(&self.gateway, &conversation, current.as_ref(), self.now())? {
            Resummarized::Unchanged => Ok(None),
            Resummarized::Fresh(summary) => {
                self.summaries.lock().unwrap().put(summary.clone())?;
                Ok(Some(summary))
            }
        }
    }

    pub fn summaries(&self) -> Vec<ChatSummary> {
        self.summaries.lock().unwrap().all().cloned().collect()
    }

    // ── pipeline ──────────────────────────────────────────────────────────

    /// Runs summarize → decide (→ regroup for completion triggers). Stage
    /// failures are recorded in the run, never raised. A call made while
    /// another run is in progress receives that run's record.
    pub fn run_pipeline(&self, trigger: Trigger) -> PipelineRun {
        let (slot, leader) = {
            let mut current = self.current_run.lock().unwrap();
            match current.as_ref() {
                Some(slot) => (Arc::clone(slot), false),
                None => {
                    let slot = Arc::new(RunSlot::default());
                    *current = Some(Arc::clone(&slot));
                    (slot, true)
                }
            }
        };
        if !leader {
            let mut result = slot.result.lock().unwrap();
            while result.is_none() {
                result = slot.ready.wait(result).unwrap();
            }
            return result.clone().expect("result is set");
        }
        let run = {
            let _serial = self.pipeline.lock().unwrap();
            self.execute_run(trigger)
        };
        *slot.result.lock().unwrap() = Some(run.clone());
        slot.ready.notify_all();
        *self.current_run.lock().unwrap() = None;
        run
    }

    fn execute_run(&self, trigger: Trigger) -> PipelineRun {
        let started_at = self.now();
        let mut run = PipelineRun {
            id: RunId(self.ids.next()),
            learner_id: self.options.learner_id.clone(),
            trigger,
            stages_executed: Vec::new(),
            stages: Vec::new(),
            started_at,
            finished_at: started_at,
            outcome: RunOutcome::Ok,
            decide_started_at: None,
            summaries_written: 0,
            proposal_ids: Vec::new(),
            regrouped_courses: Vec::new(),
        };

        let report = self.stage_summarize(&mut run);
        run.stages.push(report);
        run.stages_executed.push(Stage::Summarize);

        let report = self.stage_decide(&mut run);
        run.stages.push(report);
        run.stages_executed.push(Stage::Decide);

        if trigger == Trigger::CourseCompleted {
            let report = self.stage_regroup(&mut run);
            run.stages.push(report);
            run.stages_executed.push(Stage::Regroup);
        }

        run.finished_at = self.now();
        run.outcome = if run.stages.iter().all(|s| s.outcome == RunOutcome::Ok) {
            RunOutcome::Ok
        } else if run.stages.iter().all(|s| s.outcome == RunOutcome::Failed) {
            RunOutcome::Failed
        } else {
            RunOutcome::Partial
        };
        let mut runs = self.runs.lock().unwrap();
        if let Err(error) = runs.1.append(&run) {
            tracing::warn!(%error, "could not persist pipeline run");
        }
        runs.0.push(run.clone());
        run
    }

    fn stage_summarize(&self, run: &mut PipelineRun) -> StageReport {
        let started_at = self.now();
        let now = started_at;
        let window = self.options.window_days;
        let candidates: Vec<Conversation> = {
            let chats = self.chats.read().unwrap();
            let summaries = self.summaries.lock().unwrap();
            chats
                .list()
                .into_iter()
                .filter(|c| c.user_message_count() > 0)
                .filter(|c| {
                    activity_status(c, now, window).is_ok_and(|s| s == ActivityStatus::Active)
                })
                .filter(|c| is_stale(c, summaries.get(&c.id)))
                .cloned()
                .collect()
        };
        let results: Vec<Result<ChatSummary, SummarizeError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = candidates
                .iter()
                .map(|c| scope.spawn(move || summarize(&self.gateway, c, now)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("summarizer thread panicked"))
                .collect()
        });
        let mut errors = Vec::new();
        for (conversation, result) in candidates.iter().zip(results) {
            match result.map_err(ServiceError::from).and_then(|s| {
                self.summaries.lock().unwrap().put(s)?;
                Ok(())
            }) {
                Ok(()) => run.summaries_written += 1,
                Err(e) => errors.push(format!("{}: {e}", conversation.id)),
            }
        }
        StageReport {
            stage: Stage::Summarize,
            outcome: stage_outcome(candidates.len(), errors.len()),
            started_at,
            finished_at: self.now(),
            errors,
            notes: Vec::new(),
        }
    }

    fn coverage(&self, now: DateTime<Utc>) -> Coverage {
        let mut coverage = Coverage::default();
        {
            let graph = self.graph.read().unwrap();
            let courses = self.courses.lock().unwrap();
            for course in courses.list() {
                let title = normalize_label(&course.title);
                coverage.course_titles.insert(title.clone());
                if graph.graph.course(&course.id).is_some_and(|c| c.completed) {
                    coverage.blocked_titles.insert(title.clone());
                    coverage.completed_topics.insert(title);
                    coverage
                        .completed_topics
                        .insert(normalize_label(&course.goal_label));
                }
            }
        }
        self.proposals.lock().unwrap().extend_coverage(
            &mut coverage,
            now,
            self.options.window_days,
        );
        coverage
    }

    fn stage_decide(&self, run: &mut PipelineRun) -> StageReport {
        let started_at = self.now();
        run.decide_started_at = Some(started_at);
        let active = {
            let chats = self.chats.read().unwrap();
            let summaries = self.summaries.lock().unwrap();
            active_summaries(&summaries, &chats, started_at, self.options.window_days)
        };
        let coverage = self.coverage(started_at);
        let graph = self.graph.read().unwrap().graph.clone();
        let mut errors = Vec::new();
        let mut notes = Vec::new();
        let result = decide_and_propose(
            &self.gateway,
            &active,
            &graph,
            &coverage,
            self.options.max_proposals,
            &self.ids,
            started_at,
        );
        let outcome = match result {
            Ok(decision) => {
                for (mode, error) in &decision.failures {
                    let line = format!("{mode:?}: {error}");
                    match error {
                        TopicError::NoValidProposal { .. } => notes.push(line),
                        _ => errors.push(line),
                    }
                }
                let mut proposals = self.proposals.lock().unwrap();
                for proposal in decision.proposals {
                    let id = proposal.id.clone();
                    match proposals.insert(proposal) {
                        Ok(()) => run.proposal_ids.push(id),
                        Err(e) => errors.push(format!("persisting proposal {id}: {e}")),
                    }
                }
                if errors.is_empty() {
                    RunOutcome::Ok
                } else if run.proposal_ids.is_empty() {
                    RunOutcome::Failed
                } else {
                    RunOutcome::Partial
                }
            }
            Err(error) => {
                errors.push(error.to_string());
                RunOutcome::Failed
            }
        };
        StageReport {
            stage: Stage::Decide,
            outcome,
            started_at,
            finished_at: self.now(),
            errors,
            notes,
        }
    }

    fn stage_regroup(&self, run: &mut PipelineRun) -> StageReport {
        let started_at = self.now();
        let pending = self.pending_regroups();
        let mut errors = Vec::new();
        let mut notes = Vec::new();
        for course_id in &pending {
            match self.regroup_course(course_id) {
                Ok(result) => {
                    for d in &result.dropped {
                        notes.push(format!(
                            "{course_id}: dropped action {}: {}",
                            d.index, d.reason
                        ));
                    }
                    run.regrouped_courses.push(course_id.clone());
                }
                Err(e) => errors.push(format!("{course_id}: {e}")),
            }
        }
        StageReport {
            stage: Stage::Regroup,
            outcome: stage_outcome(pending.len(), errors.len()),
            started_at,
            finished_at: self.now(),
            errors,
            notes,
        }
    }

    /// Completed courses whose regroup has not happened yet, oldest
    /// completion first.
    pub fn pending_regroups(&self) -> Vec<CourseId> {
        let graph = self.graph.read().unwrap();
        let mut pending: Vec<(DateTime<Utc>, CourseId)> = graph
            .graph
            .awaiting_regroup()
            .iter()
            .map(|id| {
                let at = graph
                    .graph
                    .course(id)
                    .and_then(|c| c.module_progress.iter().map(|m| m.updated_at).max())
                    .unwrap_or(DateTime::<Utc>::MIN_UTC);
                (at, id.clone())
            })
            .collect();
        pending.sort();
        pending.into_iter().map(|(_, id)| id).collect()
    }

    fn course_titles(&self) -> BTreeMap<CourseId, String> {
        self.courses
            .lock()
            .unwrap()
            .list()
            .into_iter()
            .map(|c| (c.id.clone(), c.title.clone()))
            .collect()
    }

    fn regroup_course(&self, course_id: &CourseId) -> Result<RegroupResult, ServiceError> {
        let titles = self.course_titles();
        let summaries = self.summaries();
        let graph = self.graph.read().unwrap().graph.clone();
        let at = self.now();
        let plan = plan_regroup(
            &self.gateway,
            &graph,
            course_id,
            &titles,
            &summaries,
            &self.ids,
            at,
        )?;
        let applied = self
            .graph
            .write()
            .unwrap()
            .commit(|g| g.apply_regroup_for(course_id, &plan.survivors, &self.ids, at))?;
        Ok(RegroupResult {
            course_id: course_id.clone(),
            applied,
            dropped: plan.dropped,
        })
    }

    /// Picks up work a restart may have interrupted: pending regroups.
    pub fn resume(&self) -> Option<PipelineRun> {
        self.run_pending_jobs();
        if self.pending_regroups().is_empty() {
            None
        } else {
            Some(self.run_pipeline(Trigger::CourseCompleted))
        }
    }

    pub fn runs(&self) -> Vec<PipelineRun> {
        self.runs.lock().unwrap().0.clone()
    }

    // ── proposals and courses ─────────────────────────────────────────────

    pub fn list_proposals(&self) -> Vec<CourseOutlineProposal> {
        self.proposals
            .lock()
            .unwrap()
            .list()
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn proposal(&self, id: &ProposalId) -> Option<CourseOutlineProposal> {
        self.proposals.lock().unwrap().get(id).cloned()
    }

    fn idempotent_replay<T: for<'de> Deserialize<'de>>(
        &self,
        op: &str,
        key: Option<&str>,
    ) -> Option<T> {
        let key = key?;
        let store = self.idempotency.lock().unwrap();
        let value = store.0.get(&format!("{op}:{key}"))?;
        serde_json::from_value(value.clone()).ok()
    }

    fn remember(
        &self,
        op: &str,
        key: Option<&str>,
        response: &impl Serialize,
    ) -> Result<(), ServiceError> {
        let Some(key) = key else { return Ok(()) };
        let response = serde_json::to_value(response).map_err(StorageError::from)?;
        let mut store = self.idempotency.lock().unwrap();
        store.1.append(&IdempotencyRecord {
            key: key.to_string(),
            op: op.to_string(),
            response: response.clone(),
        })?;
        store.0.insert(format!("{op}:{key}"), response);
        Ok(())
    }

    /// Generates and stores the course for a proposed outline. On failure
    /// the proposal stays `proposed` and nothing is registered.
    pub fn accept_proposal(
        &self,
        id: &ProposalId,
        idempotency_key: Option<&str>,
    ) -> Result<Course, ServiceError> {
        let _serial = self.accept.lock().unwrap();
        if let Some(course_id) = self.idempotent_replay::<CourseId>("accept", idempotency_key) {
            if let Some(course) = self.course(&course_id) {
                return Ok(course);
            }
        }
        let proposal = self
            .proposal(id)
            .ok_or_else(|| ServiceError::UnknownProposal(id.clone()))?;
        if proposal.status != ProposalStatus::Proposed {
            return Err(ServiceError::InvalidProposalStatus {
                id: id.clone(),
                status: proposal.status,
            });
        }
        let excerpts = {
            let chats = self.chats.read().unwrap();
            extract_excerpts(&proposal, &chats, self.options.excerpt_budget)?
        };
        let difficulty = {
            let summaries = self.summaries.lock().unwrap();
            learner_difficulty(
                proposal
                    .source_chat_ids
                    .iter()
                    .filter_map(|c| summaries.get(c)),
            )
        };
        let mut accepted = proposal.clone();
        accepted.status = ProposalStatus::Accepted;
        let now = self.now();
        let course = generate_course(
            &self.gateway,
            &accepted,
            &excerpts,
            difficulty,
            &self.ids,
            now,
            self.options.seed,
        )?;
        self.courses.lock().unwrap().insert(course.clone())?;
        self.finish_acceptance(&course)?;
        self.remember("accept", idempotency_key, &course.id)?;
        Ok(course)
    }

    pub fn dismiss_proposal(&self, id: &ProposalId) -> Result<CourseOutlineProposal, ServiceError> {
        let mut proposals = self.proposals.lock().unwrap();
        let proposal = proposals
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownProposal(id.clone()))?;
        if proposal.status != ProposalStatus::Proposed {
            return Err(ServiceError::InvalidProposalStatus {
                id: id.clone(),
                status: proposal.status,
            });
        }
        proposals.set_status(id, ProposalStatus::Dismissed, self.now(), None)?;
        Ok(proposals.get(id).cloned().expect("exists"))
    }

    pub fn course(&self, id: &CourseId) -> Option<Course> {
        self.courses.lock().unwrap().get(id).cloned()
    }

    pub fn course_view(&self, id: &CourseId) -> Option<CourseView> {
        let course = self.course(id)?;
        let graph = self.graph.read().unwrap();
        Some(course_view(&graph.graph, id, Some(&course)))
    }

    pub fn list_courses(&self) -> Vec<Course> {
        self.courses
            .lock()
            .unwrap()
            .list()
            .into_iter()
            .cloned()
            .collect()
    }

    /// Grades a module quiz and records the completion.
    pub fn submit_quiz(
        &self,
        course_id: &CourseId,
        module_index: usize,
        answers: &[usize],
        idempotency_key: Option<&str>,
    ) -> Result<QuizResult, ServiceError> {
        if let Some(result) = self.idempotent_replay::<QuizResult>("quiz", idempotency_key) {
            return Ok(result);
        }
        let course = self
            .course(course_id)
            .ok_or_else(|| ServiceError::UnknownCourse(course_id.clone()))?;
        let module =
            course
                .modules
                .get(module_index)
                .ok_or(ServiceError::ModuleIndexOutOfRange {
                    index: module_index,
                    count: course.modules.len(),
                })?;
        let graded =
            grade(&module.quiz, answers).map_err(|e| ServiceError::AnswerCountMismatch {
                expected: e.expected,
                got: e.got,
            })?;
        let now = self.now();
        let (node, newly_completed) = {
            let mut graph = self.graph.write().unwrap();
            let was = graph.graph.course(course_id).is_some_and(|c| c.completed);
            graph.commit(|g| {
                g.record_module_completion(course_id, module_index, graded.score, now)
            })?;
            let node = graph
                .graph
                .course(course_id)
                .cloned()
                .expect("registered course");
            let newly = !was && node.completed;
            (node, newly)
        };
        let progress = &node.module_progress[module_index];
        let result = QuizResult {
            course_id: course_id.clone(),
            module_index,
            score: graded.score,
            items: graded.items,
            module_status: progress.status,
            best_score: progress.quiz_score,
            course_completed: node.completed,
        };
        self.remember("quiz", idempotency_key, &result)?;
        if newly_completed {
            self.schedule(Job::Pipeline(Trigger::CourseCompleted));
        }
        Ok(result)
    }

    pub fn self_report(
        &self,
        course_id: &CourseId,
        module_index: usize,
        kind: SelfReportKind,
    ) -> Result<CourseView, ServiceError> {
        self.update_module(course_id, |g, at| {
            g.self_report(course_id, module_index, kind, at)
        })
    }

    pub fn unmark_self_report(
        &self,
        course_id: &CourseId,
        module_index: usize,
    ) -> Result<CourseView, ServiceError> {
        self.update_module(course_id, |g, at| {
            g.unmark_self_report(course_id, module_index, at)
        })
    }

    fn update_module(
        &self,
        course_id: &CourseId,
        op: impl FnOnce(&mut LearnerGraph, DateTime<Utc>) -> Result<(), GraphError>,
    ) -> Result<CourseView, ServiceError> {
        let course = self
            .course(course_id)
            .ok_or_else(|| ServiceError::UnknownCourse(course_id.clone()))?;
        let now = self.now();
        let newly_completed = {
            let mut graph = self.graph.write().unwrap();
            let was = graph.graph.course(course_id).is_some_and(|c| c.completed);
            graph.commit(|g| op(g, now))?;
            !was && graph.graph.course(course_id).is_some_and(|c| c.completed)
        };
        if newly_completed {
            self.schedule(Job::Pipeline(Trigger::CourseCompleted));
        }
        let graph = self.graph.read().unwrap();
        Ok(course_view(&graph.graph, course_id, Some(&course)))
    }

    // ── graph ─────────────────────────────────────────────────────────────

    pub fn seed_goal(&self, label: &str) -> Result<GoalId, ServiceError> {
        if label.trim().is_empty() {
            return Err(ServiceError::InvalidInput("goal label is empty".into()));
        }
        let now = self.now();
        self.graph
            .write()
            .unwrap()
            .commit(|g| g.seed_goal(label, &self.ids, now))
    }

    pub fn graph(&self) -> LearnerGraph {
        self.graph.read().unwrap().graph.clone()
    }

    pub fn graph_snapshot(&self) -> String {
        self.graph.read().unwrap().graph.snapshot()
    }

    /// Goals with their courses and per-module progress, from one
    /// consistent snapshot.
    pub fn graph_view(&self) -> GraphView {
        let courses: BTreeMap<CourseId, Course> = self
            .courses
            .lock()
            .unwrap()
            .list()
            .into_iter()
            .map(|c| (c.id.clone(), c.clone()))
            .collect();
        let graph = self.graph.read().unwrap();
        let g = &graph.graph;
        GraphView {
            learner_id: self.options.learner_id.clone(),
            goals: g
                .goals()
                .map(|goal| GoalView {
                    goal_id: goal.id.clone(),
                    label: goal.label.clone(),
                    label_history: goal.label_history.clone(),
                    courses: goal
                        .course_ids
                        .iter()
                        .map(|id| course_view(g, id, courses.get(id)))
                        .collect(),
                })
                .collect(),
            ungrouped_courses: g
                .courses()
                .filter(|c| c.goal_id.is_none())
                .map(|c| course_view(g, &c.course_id, courses.get(&c.course_id)))
                .collect(),
            event_count: g.event_log().len(),
        }
    }

    /// Cross-store invariants: every course is registered in the graph, its
    /// proposal is accepted, stored proposals have 3–4 modules, and live
    /// proposal titles are unique.
    pub fn consistency_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let graph = self.graph.read().unwrap();
        out.extend(graph.graph.invariant_violations());
        if !graph.graph.replays_to_self() {
            out.push("graph does not replay to itself".into());
        }
        let courses = self.courses.lock().unwrap();
        let proposals = self.proposals.lock().unwrap();
        let chats = self.chats.read().unwrap();
        for course in courses.list() {
            match graph.graph.course(&course.id) {
                None => out.push(format!("course {} is not in the graph", course.id)),
                Some(node) if node.module_progress.len() != course.modules.len() => out.push(
                    format!("course {} module count differs from the graph", course.id),
                ),
                _ => {}
            }
            match proposals.get(&course.proposal_id) {
                Some(p) if p.status == ProposalStatus::Accepted => {
                    if !course.matches_outline(&p.modules) {
                        out.push(format!("course {} does not match its outline", course.id));
                    }
                }
                _ => out.push(format!("course {} has no accepted proposal", course.id)),
            }
            for module in &course.modules {
                for item in &module.quiz {
                    if let Err(v) = crate::quiz::validate_quiz(item) {
                        out.push(format!(
                            "course {} has an invalid quiz item: {v:?}",
                            course.id
                        ));
                    }
                }
                for grounding in &module.grounding {
                    let ok = chats
                        .get(&grounding.conversation_id)
                        .is_some_and(|c| grounding.verify(c));
                    if !ok {
                        out.push(format!("course {} grounding does not verify", course.id));
                    }
                }
            }
        }
        for node in graph.graph.courses() {
            if courses.get(&node.course_id).is_none() {
                out.push(format!(
                    "graph course {} has no course document",
                    node.course_id
                ));
            }
        }
        let mut live_titles = BTreeSet::new();
        for p in proposals.list() {
            if !(3..=4).contains(&p.modules.len()) {
                out.push(format!("proposal {} has {} modules", p.id, p.modules.len()));
            }
            if p.is_live() && !live_titles.insert(normalize_label(&p.title)) {
                out.push(format!("live proposal title '{}' is duplicated", p.title));
            }
        }
        let summaries = self.summaries.lock().unwrap();
        for s in summaries.all() {
            if chats.get(&s.conversation_id).is_none() {
                out.push(format!(
                    "summary for missing conversation {}",
                    s.conversation_id
                ));
            }
        }
        out
    }
}

fn stage_outcome(attempted: usize, failed: usize) -> RunOutcome {
    if failed == 0 {
        RunOutcome::Ok
    } else if failed >= attempted {
        RunOutcome::Failed
    } else {
        RunOutcome::Partial
    }
}

fn course_view(graph: &LearnerGraph, id: &CourseId, course: Option<&Course>) -> CourseView {
    let node = graph.course(id);
    let progress = node.map(|n| n.module_progress.as_slice()).unwrap_or(&[]);
    CourseView {
        course_id: id.clone(),
        title: course.map_or_else(|| id.to_string(), |c| c.title.clone()),
        completed: node.is_some_and(|n| n.completed),
        progress_percent: progress_fraction(progress) * 100.0,
        modules: progress
            .iter()
            .map(|m| ModuleView {
                module_index: m.module_index,
                title: course
                    .and_then(|c| c.modules.get(m.module_index))
                    .map(|cm| cm.title.clone())
                    .unwrap_or_default(),
                status: m.status,
                quiz_score: m.quiz_score,
            })
            .collect(),
    }
}

#[derive(Debug, Deserialize)]
struct AssistantReply {
    text: String,
}

#[derive(Debug, Serialize)]
struct Turn<'a> {
    index: usize,
    role: Role,
    text: &'a str,
}

fn assistant_request(conversation: &Conversation) -> AgentRequest {
    let turns: Vec<Turn> = conversation
        .messages
        .iter()
        .enumerate()
        .map(|(index, m)| Turn {
            index,
            role: m.role,
            text: &m.text,
        })
        .collect();
    AgentRequest::new(AgentName::Assistant)
        .subject(conversation.id.as_str())
        .context(&turns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::gateway::{GatewayConfig, MockReply, ProviderErrorKind};
    use serde_json::json;

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2025-03-03T09:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
    }

    fn loom_with(mock: Arc<MockProvider>, background: BackgroundMode) -> (Loom, ManualClock) {
        let clock = ManualClock::new(t0());
        let gateway = Gateway::with_agent_contracts(
            mock,
            GatewayConfig {
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        );
        let options = LoomOptions {
            clock: Arc::new(clock.clone()),
            seed: Some(5),
            background,
            ..LoomOptions::default()
        };
        (
            Loom::open(Storage::in_memory(), gateway, options).unwrap(),
            clock,
        )
    }

    #[test]
    fn chat_turn_appends_both_messages() {
        let (loom, _) = loom_with(Arc::new(MockProvider::synthetic()), BackgroundMode::Queued);
        let turn = loom.chat_turn(None, "what is k-means?").unwrap();
        assert_eq!(turn.message_count, 2);
        let conv = loom.conversation(&turn.conversation_id).unwrap();
        assert_eq!(conv.messages[0].text, "what is k-means?");
        assert_eq!(conv.messages[1].role, Role::Assistant);
        assert!(loom.pending_jobs() > 0);
    }

    #[test]
    fn empty_user_text_is_rejected() {
        let (loom, _) = loom_with(Arc::new(MockProvider::synthetic()), BackgroundMode::Queued);
        assert!(matches!(
            loom.chat_turn(None, "  "),
            Err(ServiceError::InvalidInput(_))
        ));
        assert!(loom.list_conversations().is_empty());
    }

    #[test]
    fn gateway_down_keeps_the_user_message() {
        let mock = Arc::new(MockProvider::synthetic());
        mock.set_down(true);
        let (loom, _) = loom_with(mock, BackgroundMode::Queued);
        let err = loom.chat_turn(None, "what is k-means?").unwrap_err();
        let ServiceError::ChatTurnFailed {
            conversation_id, ..
        } = err
        else {
            panic!("unexpected {err:?}");
        };
        let conv = loom.conversation(&conversation_id).unwrap();
        assert_eq!(conv.messages.len(), 1);
        assert_eq!(conv.messages[0].role, Role::User);
    }

    #[test]
    fn empty_world_pipeline_is_ok() {
        let (loom, _) = loom_with(Arc::new(MockProvider::new()), BackgroundMode::Inline);
        let run = loom.run_pipeline(Trigger::Manual);
        assert_eq!(run.outcome, RunOutcome::Ok);
        assert_eq!(run.stages_executed, vec![Stage::Summarize, Stage::Decide]);
        assert!(loom.list_proposals().is_empty());
    }

    #[test]
    fn one_failed_summary_makes_the_run_partial() {
        let mock = Arc::new(MockProvider::synthetic());
        let (loom, clock) = loom_with(mock.clone(), BackgroundMode::Queued);
        let mut ids = Vec::new();
        for text in [
            "how to cluster customers",
            "choosing k for k-means",
            "centroid updates",
        ] {
            let conv = loom.create_conversation("Clustering").unwrap();
            loom.chats
                .write()
                .unwrap()
                .append_message(&conv.id, Message::user(text, clock.now()))
                .unwrap();
            ids.push(conv.id);
        }
        mock.script(
            AgentName::Summarizer,
            ids[1].as_str(),
            vec![MockReply::Fail(ProviderErrorKind::Auth)],
        );
        let run = loom.run_pipeline(Trigger::Manual);
        assert_eq!(run.outcome, RunOutcome::Partial);
        assert_eq!(run.summaries_written, 2);
        assert_eq!(loom.summaries().len(), 2);
        assert!(!run.proposal_ids.is_empty());
        let decide_at = run.decide_started_at.unwrap();
        assert!(loom.summaries().iter().all(|s| s.created_at <= decide_at));
    }

    #[test]
    fn message_triggers_are_debounced() {
        let (loom, clock) = loom_with(Arc::new(MockProvider::synthetic()), BackgroundMode::Inline);
        let turn = loom.chat_turn(None, "what is k-means?").unwrap();
        assert_eq!(loom.runs().len(), 1);
        clock.advance(Duration::minutes(1));
        loom.chat_turn(Some(&turn.conversation_id), "and k-medoids?")
            .unwrap();
        assert_eq!(loom.runs().len(), 1);
        clock.advance(Duration::minutes(5));
        loom.chat_turn(Some(&turn.conversation_id), "and DBSCAN?")
            .unwrap();
        assert_eq!(loom.runs().len(), 2);
        assert!(loom
            .runs()
            .iter()
            .all(|r| r.trigger == Trigger::MessageAppended));
    }

    #[test]
    fn accept_failure_leaves_proposal_proposed() {
        let mock = Arc::new(MockProvider::synthetic());
        let (loom, _) = loom_with(mock.clone(), BackgroundMode::Queued);
        loom.chat_turn(None, "how to cluster customers").unwrap();
        loom.run_pipeline(Trigger::Manual);
        let proposal = loom.list_proposals().remove(0);
        mock.script(
            AgentName::CourseGenerator,
            "*",
            vec![MockReply::Json(json!({"lesson_text": "short", "quiz": []}))],
        );
        let err = loom.accept_proposal(&proposal.id, None).unwrap_err();
        assert!(matches!(
            err,
            ServiceError::Course(CourseError::ValidationExhausted { .. })
        ));
        assert_eq!(
            loom.proposal(&proposal.id).unwrap().status,
            ProposalStatus::Proposed
        );
        assert_eq!(loom.graph().courses().count(), 0);
        assert!(loom.list_courses().is_empty());
    }

    #[test]
    fn accept_is_idempotent_and_guarded() {
        let (loom, _) = loom_with(Arc::new(MockProvider::synthetic()), BackgroundMode::Queued);
        loom.chat_turn(None, "how to cluster customers").unwrap();
        loom.run_pipeline(Trigger::Manual);
        let proposal = loom.list_proposals().remove(0);
        let first = loom.accept_proposal(&proposal.id, Some("k1")).unwrap();
        let again = loom.accept_proposal(&proposal.id, Some("k1")).unwrap();
        assert_eq!(first, again);
        assert!(matches!(
            loom.accept_proposal(&proposal.id, None),
            Err(ServiceError::InvalidProposalStatus { .. })
        ));
        assert_eq!(loom.list_courses().len(), 1);
        assert!(
            loom.consistency_violations().is_empty(),
            "{:?}",
            loom.consistency_violations()
        );
    }

    #[test]
    fn quiz_scoring_and_progress() {
        let (loom, _) = loom_with(Arc::new(MockProvider::synthetic()), BackgroundMode::Queued);
        loom.chat_turn(None, "how to cluster customers").unwrap();
        loom.run_pipeline(Trigger::Manual);
        let proposal = loom.list_proposals().remove(0);
        let course = loom.accept_proposal(&proposal.id, None).unwrap();
        let correct: Vec<usize> = course.modules[0]
            .quiz
            .iter()
            .map(|q| q.correct_index as usize)
            .collect();
        let r = loom
            .submit_quiz(&course.id, 0, &correct, Some("q1"))
            .unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.module_status, ModuleStatus::Completed);
        assert!(matches!(
            loom.submit_quiz(&course.id, 0, &[], None),
            Err(ServiceError::AnswerCountMismatch { .. })
        ));
        assert!(matches!(
            loom.submit_quiz(&course.id, 9, &correct, None),
            Err(ServiceError::ModuleIndexOutOfRange { .. })
        ));
        assert_eq!(
            loom.submit_quiz(&course.id, 0, &[9], Some("q1")).unwrap(),
            r
        );
        let view = loom
            .self_report(&course.id, 1, SelfReportKind::Known)
            .unwrap();
        let expected = 2.0 / course.modules.len() as f64 * 100.0;
        assert!((view.progress_percent - expected).abs() < 1e-9);
    }

    #[test]
    fn overlapping_runs_are_coalesced() {
        let mock = Arc::new(MockProvider::synthetic());
        mock.script(
            AgentName::Summarizer,
            "*",
            vec![MockReply::Delay {
                ms: 150,
                then: Box::new(MockReply::Json(
                    json!({"statement": "S", "umbrella": "U", "difficulty": "beginner"}),
                )),
            }],
        );
        let (loom, clock) = loom_with(mock, BackgroundMode::Queued);
        let conv = loom.create_conversation("x").unwrap();
        loom.chats
            .write()
            .unwrap()
            .append_message(&conv.id, Message::user("hello there", clock.now()))
            .unwrap();
        let (a, b) = std::thread::scope(|s| {
            let a = s.spawn(|| loom.run_pipeline(Trigger::Manual));
            std::thread::sleep(std::time::Duration::from_millis(30));
            let b = s.spawn(|| loom.run_pipeline(Trigger::Manual));
            (a.join().unwrap(), b.join().unwrap())
        });
        assert_eq!(a.id, b.id);
        assert_eq!(loom.runs().len(), 1);
    }
}
