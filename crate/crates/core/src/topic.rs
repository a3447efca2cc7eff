//! Chooses what to teach next and proposes 3–4 module course outlines.
//!
//! Strengthen mode ranks recurring umbrellas in recent chats by a plain
//! frequency count. Explore mode asks an agent for a concept adjacent to one
//! of the learner's goals.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::chat::ConversationId;
use crate::clock::{string_id, IdSource};
use crate::course::CourseId;
use crate::gateway::{AgentName, AgentRequest, Gateway, GatewayError};
use crate::graph::{GoalId, LearnerGraph};
use crate::storage::{Journal, Storage, StorageError};
use crate::summarizer::{ActiveSummary, Difficulty};
use crate::text::{labels_equal, normalize_label};

string_id!(
    /// Identifier of a course outline proposal.
    ProposalId
);

pub const MIN_MODULES: usize = 3;
pub const MAX_MODULES: usize = 4;
pub const MIN_MODULE_MINUTES: u32 = 3;
pub const MAX_MODULE_MINUTES: u32 = 30;
pub const DEFAULT_MAX_PROPOSALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    Strengthen,
    Explore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Proposed,
    Accepted,
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineModuleStub {
    pub title: String,
    pub time_estimate_minutes: u32,
    pub learner_question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseOutlineProposal {
    pub id: ProposalId,
    pub mode: ProposalMode,
    pub goal_label: String,
    pub title: String,
    pub modules: Vec<OutlineModuleStub>,
    pub source_chat_ids: Vec<ConversationId>,
    /// Provenance for explore proposals: the goal the concept extends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_goal_id: Option<GoalId>,
    pub status: ProposalStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_changed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub course_id: Option<CourseId>,
}

impl CourseOutlineProposal {
    pub fn is_live(&self) -> bool {
        self.status != ProposalStatus::Dismissed
    }
}

/// The most frequent uncovered umbrella among active summaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StrengthenTheme {
    /// Display label, taken from the most recent contributing summary.
    pub theme: String,
    pub count: usize,
    pub latest_reference: DateTime<Utc>,
    /// Contributing chats, most recently referenced first.
    pub source_chat_ids: Vec<ConversationId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExploreTheme {
    pub anchor_goal_id: GoalId,
    pub anchor_goal: String,
    pub concept: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThemeSelection {
    Strengthen(StrengthenTheme),
    Explore(ExploreTheme),
}

impl ThemeSelection {
    pub fn mode(&self) -> ProposalMode {
        match self {
            ThemeSelection::Strengthen(_) => ProposalMode::Strengthen,
            ThemeSelection::Explore(_) => ProposalMode::Explore,
        }
    }

    /// Mock-script key for the decider call.
    pub fn subject(&self) -> String {
        match self {
            ThemeSelection::Strengthen(s) => format!("strengthen:{}", s.theme),
            ThemeSelection::Explore(e) => format!("explore:{}", e.concept),
        }
    }
}

/// Topics already taken care of, as normalized labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Coverage {
    /// Titles and goal labels of completed courses; umbrellas in here are not
    /// strengthen candidates.
    pub completed_topics: BTreeSet<String>,
    /// Titles of completed courses and of proposed or accepted proposals.
    pub blocked_titles: BTreeSet<String>,
    /// Titles dismissed within the suppression window.
    pub recently_dismissed: BTreeSet<String>,
    /// Titles of every course the learner has, done or not.
    pub course_titles: BTreeSet<String>,
}

impl Coverage {
    pub fn blocks_title(&self, title: &str) -> bool {
        let key = normalize_label(title);
        self.blocked_titles.contains(&key) || self.recently_dismissed.contains(&key)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TopicError {
    #[error("topic agent failed: {0}")]
    AgentFailure(#[from] GatewayError),
    #[error("no valid proposal survived validation: {}", reasons.join("; "))]
    NoValidProposal { reasons: Vec<String> },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("unknown proposal {0}")]
    UnknownProposal(ProposalId),
    #[error("proposal {id} is {status:?}")]
    InvalidStatus {
        id: ProposalId,
        status: ProposalStatus,
    },
}

// ── strengthen ranking ────────────────────────────────────────────────────

/// Ranks umbrellas by frequency, then most recent reference, then label.
pub fn rank_strengthen_themes(
    active: &[ActiveSummary],
    coverage: &Coverage,
) -> Vec<StrengthenTheme> {
    struct Acc {
        count: usize,
        latest: DateTime<Utc>,
        label: String,
        label_at: (DateTime<Utc>, DateTime<Utc>),
        chats: Vec<(DateTime<Utc>, ConversationId)>,
    }
    let mut by_key: BTreeMap<String, Acc> = BTreeMap::new();
    for a in active {
        let key = normalize_label(&a.summary.umbrella);
        if key.is_empty() || coverage.completed_topics.contains(&key) {
            continue;
        }
        let stamp = (a.last_referenced_at, a.summary.created_at);
        let acc = by_key.entry(key).or_insert_with(|| Acc {
            count: 0,
            latest: a.last_referenced_at,
            label: a.summary.umbrella.trim().to_string(),
            label_at: stamp,
            chats: Vec::new(),
        });
        acc.count += 1;
        acc.latest = acc.latest.max(a.last_referenced_at);
        if stamp > acc.label_at {
            acc.label_at = stamp;
            acc.label = a.summary.umbrella.trim().to_string();
        }
        acc.chats
            .push((a.last_referenced_at, a.summary.conversation_id.clone()));
    }
    let mut ranked: Vec<(String, Acc)> = by_key.into_iter().collect();
    ranked.sort_by(|(ka, a), (kb, b)| {
        b.count
            .cmp(&a.count)
            .then(b.latest.cmp(&a.latest))
            .then(ka.cmp(kb))
    });
    ranked
        .into_iter()
        .map(|(_, mut acc)| {
            acc.chats.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            StrengthenTheme {
                theme: acc.label,
                count: acc.count,
                latest_reference: acc.latest,
                source_chat_ids: acc.chats.into_iter().map(|(_, id)| id).collect(),
            }
        })
        .collect()
}

pub fn select_strengthen_theme(
    active: &[ActiveSummary],
    coverage: &Coverage,
) -> Option<StrengthenTheme> {
    rank_strengthen_themes(active, coverage).into_iter().next()
}

// ── explore ───────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
struct ExploreReply {
    anchor_goal: String,
    concept: String,
    #[serde(default)]
    rationale: String,
}

#[derive(Debug, Serialize)]
struct ExploreContext<'a> {
    goals: Vec<ExploreGoal<'a>>,
    recent_umbrellas: Vec<&'a str>,
    existing_course_titles: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct ExploreGoal<'a> {
    label: &'a str,
    course_count: usize,
}

/// Subject key for the explorer call: the goal labels, sorted.
pub fn explore_subject(graph: &LearnerGraph) -> String {
    let mut labels: Vec<&str> = graph.goals().map(|g| g.label.as_str()).collect();
    labels.sort_unstable();
    format!("explore:{}", labels.join("|"))
}

/// Asks for a concept adjacent to an existing goal. `None` when the
/// learner has no goals to anchor on.
pub fn select_explore_theme(
    gateway: &Gateway,
    graph: &LearnerGraph,
    active: &[ActiveSummary],
    coverage: &Coverage,
) -> Result<Option<ExploreTheme>, TopicError> {
    if graph.goals().next().is_none() {
        return Ok(None);
    }
    let context = ExploreContext {
        goals: graph
            .goals()
            .map(|g| ExploreGoal {
                label: &g.label,
                course_count: g.course_ids.len(),
            })
            .collect(),
        recent_umbrellas: active.iter().map(|a| a.summary.umbrella.as_str()).collect(),
        existing_course_titles: coverage.course_titles.iter().map(String::as_str).collect(),
    };
    let request = AgentRequest::new(AgentName::TopicExplorer)
        .subject(explore_subject(graph))
        .context(&context);
    let check = |reply: &ExploreReply| -> Result<(), Vec<String>> {
        let mut violations = Vec::new();
        if graph.goal_by_label(&reply.anchor_goal).is_none() {
            violations.push(format!(
                "anchor_goal '{}' is not one of the learner's goals",
                reply.anchor_goal
            ));
        }
        if coverage
            .course_titles
            .contains(&normalize_label(&reply.concept))
        {
            violations.push(format!("'{}' is already a course", reply.concept));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    };
    let reply = gateway.call::<ExploreReply>(&request, Some(&check))?.parsed;
    let anchor = graph
        .goal_by_label(&reply.anchor_goal)
        .expect("checked by the call");
    Ok(Some(ExploreTheme {
        anchor_goal_id: anchor.id.clone(),
        anchor_goal: anchor.label.clone(),
        concept: reply.concept.trim().to_string(),
        rationale: reply.rationale,
    }))
}

/// Strengthen when any theme qualifies, otherwise explore.
pub fn select_theme(
    gateway: &Gateway,
    graph: &LearnerGraph,
    active: &[ActiveSummary],
    coverage: &Coverage,
) -> Result<Option<ThemeSelection>, TopicError> {
    if let Some(theme) = select_strengthen_theme(active, coverage) {
        return Ok(Some(ThemeSelection::Strengthen(theme)));
    }
    Ok(select_explore_theme(gateway, graph, active, coverage)?.map(ThemeSelection::Explore))
}

// ── outline proposals ─────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
struct OutlineReply {
    proposals: Vec<OutlineCandidate>,
}

#[derive(Debug, Clone, Deserialize)]
struct OutlineCandidate {
    title: String,
    goal_label: String,
    mode: ProposalMode,
    modules: Vec<CandidateModule>,
    source_chat_ids: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct CandidateModule {
    title: String,
    time_estimate_minutes: i64,
    learner_question: String,
}

#[derive(Debug, Serialize)]
struct OutlineContext<'a> {
    selection: &'a ThemeSelection,
    max_proposals: usize,
    active_chats: Vec<OutlineChat<'a>>,
    goals: Vec<&'a str>,
    avoid_titles: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct OutlineChat<'a> {
    conversation_id: &'a str,
    statement: &'a str,
    umbrella: &'a str,
    difficulty: Difficulty,
}

/// Why a candidate outline was dropped.
fn validate_candidate(
    c: &OutlineCandidate,
    selection: &ThemeSelection,
    active: &HashMap<&str, &ActiveSummary>,
) -> Result<Vec<ConversationId>, String> {
    if c.mode != selection.mode() {
        return Err(format!(
            "'{}': mode {:?} does not match {:?}",
            c.title,
            c.mode,
            selection.mode()
        ));
    }
    if !(MIN_MODULES..=MAX_MODULES).contains(&c.modules.len()) {
        return Err(format!(
            "'{}': {} modules, need 3 or 4",
            c.title,
            c.modules.len()
        ));
    }
    for m in &c.modules {
        let minutes = m.time_estimate_minutes;
        if minutes < MIN_MODULE_MINUTES as i64 || minutes > MAX_MODULE_MINUTES as i64 {
            return Err(format!(
                "'{}': module '{}' estimate {minutes} min outside 3-30",
                c.title, m.title
            ));
        }
        if m.title.trim().is_empty() || m.learner_question.trim().is_empty() {
            return Err(format!(
                "'{}': module with empty title or question",
                c.title
            ));
        }
    }
    let mut seen = BTreeSet::new();
    let sources: Vec<ConversationId> = c
        .source_chat_ids
        .iter()
        .filter(|id| active.contains_key(id.as_str()) && seen.insert(id.as_str()))
        .map(|id| ConversationId::from(id.as_str()))
        .collect();
    match selection {
        ThemeSelection::Strengthen(theme) => {
            let cites_theme = sources
                .iter()
                .any(|id| labels_equal(&active[id.as_str()].summary.umbrella, &theme.theme));
            if !cites_theme {
                return Err(format!(
                    "'{}': cites no active chat under umbrella '{}'",
                    c.title, theme.theme
                ));
            }
        }
        // The anchor goal is provenance enough.
        ThemeSelection::Explore(_) => {}
    }
    Ok(sources)
}

/// Asks the decider for outlines on `selection` and keeps the ones that
/// satisfy every proposal rule and are not duplicates.
#[allow(clippy::too_many_arguments)]
pub fn propose_outlines(
    gateway: &Gateway,
    selection: &ThemeSelection,
    active: &[ActiveSummary],
    graph: &LearnerGraph,
    coverage: &Coverage,
    max_proposals: usize,
    ids: &IdSource,
    now: DateTime<Utc>,
) -> Result<Vec<CourseOutlineProposal>, TopicError> {
    let context = OutlineContext {
        selection,
        max_proposals,
        active_chats: active
            .iter()
            .map(|a| OutlineChat {
                conversation_id: a.summary.conversation_id.as_str(),
                statement: &a.summary.statement,
                umbrella: &a.summary.umbrella,
                difficulty: a.summary.difficulty,
            })
            .collect(),
        goals: graph.goals().map(|g| g.label.as_str()).collect(),
        avoid_titles: coverage
            .blocked_titles
            .iter()
            .chain(&coverage.recently_dismissed)
            .map(String::as_str)
            .collect(),
    };
    let request = AgentRequest::new(AgentName::TopicDecider)
        .subject(selection.subject())
        .context(&context);
    let reply = gateway.call::<OutlineReply>(&request, None)?.parsed;

    let by_id: HashMap<&str, &ActiveSummary> = active
        .iter()
        .map(|a| (a.summary.conversation_id.as_str(), a))
        .collect();
    let mut batch_titles = BTreeSet::new();
    let mut kept = Vec::new();
    let mut reasons = Vec::new();
    for candidate in reply.proposals {
        if kept.len() >= max_proposals {
            break;
        }
        let sources = match validate_candidate(&candidate, selection, &by_id) {
            Ok(s) => s,
            Err(reason) => {
                tracing::info!(%reason, "dropping outline");
                reasons.push(reason);
                continue;
            }
        };
        let key = normalize_label(&candidate.title);
        if coverage.blocks_title(&candidate.title) || !batch_titles.insert(key) {
            let reason = format!(
                "'{}' duplicates an existing course or proposal",
                candidate.title
            );
            tracing::info!(%reason, "dropping outline");
            reasons.push(reason);
            continue;
        }
        kept.push(CourseOutlineProposal {
            id: ProposalId(ids.next()),
            mode: candidate.mode,
            goal_label: candidate.goal_label.trim().to_string(),
            title: candidate.title.trim().to_string(),
            modules: candidate
                .modules
                .into_iter()
                .map(|m| OutlineModuleStub {
                    title: m.title.trim().to_string(),
                    time_estimate_minutes: m.time_estimate_minutes as u32,
                    learner_question: m.learner_question.trim().to_string(),
                })
                .collect(),
            source_chat_ids: sources,
            anchor_goal_id: match selection {
                ThemeSelection::Explore(e) => Some(e.anchor_goal_id.clone()),
                ThemeSelection::Strengthen(_) => None,
            },
            status: ProposalStatus::Proposed,
            created_at: now,
            status_changed_at: None,
            course_id: None,
        });
    }
    if kept.is_empty() {
        if reasons.is_empty() {
            reasons.push("the agent returned no outlines".to_string());
        }
        return Err(TopicError::NoValidProposal { reasons });
    }
    Ok(kept)
}

/// Result of one decision run: proposals plus per-mode failures.
#[derive(Debug, Default)]
pub struct DecisionOutcome {
    pub proposals: Vec<CourseOutlineProposal>,
    pub failures: Vec<(ProposalMode, TopicError)>,
}

impl DecisionOutcome {
    /// True when some mode failed for a reason other than duplicates or
    /// invalid outlines.
    pub fn has_agent_failure(&self) -> bool {
        self.failures
            .iter()
            .any(|(_, e)| matches!(e, TopicError::AgentFailure(_)))
    }
}

/// Runs both modes and combines the results, strengthen first, with at most
/// `max_proposals` in total. One slot is kept for explore when it produced
/// anything.
#[allow(clippy::too_many_arguments)]
pub fn decide_and_propose(
    gateway: &Gateway,
    active: &[ActiveSummary],
    graph: &LearnerGraph,
    coverage: &Coverage,
    max_proposals: usize,
    ids: &IdSource,
    now: DateTime<Utc>,
) -> Result<DecisionOutcome, TopicError> {
    let mut outcome = DecisionOutcome::default();
    let max_proposals = max_proposals.max(1);

    let mut strengthen = Vec::new();
    if let Some(theme) = select_strengthen_theme(active, coverage) {
        let selection = ThemeSelection::Strengthen(theme);
        match propose_outlines(
            gateway,
            &selection,
            active,
            graph,
            coverage,
            max_proposals,
            ids,
            now,
        ) {
            Ok(p) => strengthen = p,
            Err(e) => outcome.failures.push((ProposalMode::Strengthen, e)),
        }
    }

    let mut explore = Vec::new();
    match select_explore_theme(gateway, graph, active, coverage) {
        Ok(Some(theme)) => {
            let selection = ThemeSelection::Explore(theme);
            let mut narrowed = coverage.clone();
            narrowed
                .blocked_titles
                .extend(strengthen.iter().map(|p| normalize_label(&p.title)));
            match propose_outlines(
                gateway,
                &selection,
                active,
                graph,
                &narrowed,
                max_proposals,
                ids,
                now,
            ) {
                Ok(p) => explore = p,
                Err(e) => outcome.failures.push((ProposalMode::Explore, e)),
            }
        }
        Ok(None) => {}
        Err(e) => outcome.failures.push((ProposalMode::Explore, e)),
    }

    let strengthen_slots = if explore.is_empty() || max_proposals == 1 {
        max_proposals
    } else {
        max_proposals - 1
    };
    strengthen.truncate(strengthen_slots);
    explore.truncate(max_proposals - strengthen.len());
    outcome.proposals = strengthen;
    outcome.proposals.extend(explore);

    let all_failed = outcome.proposals.is_empty()
        && !outcome.failures.is_empty()
        && outcome
            .failures
            .iter()
            .all(|(_, e)| matches!(e, TopicError::AgentFailure(_)));
    if all_failed {
        let (_, error) = outcome.failures.pop().expect("nonempty");
        return Err(error);
    }
    Ok(outcome)
}

// ── persistence ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum ProposalRecord {
    Proposed {
        proposal: CourseOutlineProposal,
    },
    Status {
        id: ProposalId,
        status: ProposalStatus,
        at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        course_id: Option<CourseId>,
    },
}

pub struct ProposalStore {
    proposals: BTreeMap<ProposalId, CourseOutlineProposal>,
    order: Vec<ProposalId>,
    journal: Journal<ProposalRecord>,
}

impl ProposalStore {
    pub fn open(storage: &Storage) -> Result<Self, StorageError> {
        let (journal, records) = storage.open_journal::<ProposalRecord>("proposals")?;
        let mut store = Self {
            proposals: BTreeMap::new(),
            order: Vec::new(),
            journal,
        };
        for record in records {
            store.apply(record);
        }
        Ok(store)
    }

    fn apply(&mut self, record: ProposalRecord) {
        match record {
            ProposalRecord::Proposed { proposal } => {
                if !self.proposals.contains_key(&proposal.id) {
                    self.order.push(proposal.id.clone());
                }
                self.proposals.insert(proposal.id.clone(), proposal);
            }
            ProposalRecord::Status {
                id,
                status,
                at,
                course_id,
            } => {
                if let Some(p) = self.proposals.get_mut(&id) {
                    p.status = status;
                    p.status_changed_at = Some(at);
                    if course_id.is_some() {
                        p.course_id = course_id;
                    }
                }
            }
        }
    }

    fn write(&mut self, record: ProposalRecord) -> Result<(), StorageError> {
        self.journal.append(&record)?;
        self.apply(record);
        Ok(())
    }

    pub fn get(&self, id: &ProposalId) -> Option<&CourseOutlineProposal> {
        self.proposals.get(id)
    }

    /// All proposals in creation order.
    pub fn list(&self) -> Vec<&CourseOutlineProposal> {
        self.order.iter().map(|id| &self.proposals[id]).collect()
    }

    pub fn insert(&mut self, proposal: CourseOutlineProposal) -> Result<(), StorageError> {
        self.write(ProposalRecord::Proposed { proposal })
    }

    pub fn set_status(
        &mut self,
        id: &ProposalId,
        status: ProposalStatus,
        at: DateTime<Utc>,
        course_id: Option<CourseId>,
    ) -> Result<(), TopicError> {
        if !self.proposals.contains_key(id) {
            return Err(TopicError::UnknownProposal(id.clone()));
        }
        self.write(ProposalRecord::Status {
            id: id.clone(),
            status,
            at,
            course_id,
        })?;
        Ok(())
    }

    /// Coverage from the proposal side: live titles block re-proposal, and
    /// titles dismissed within `window_days` are suppressed.
    pub fn extend_coverage(&self, coverage: &mut Coverage, now: DateTime<Utc>, window_days: u32) {
        let window = Duration::days(window_days as i64);
        for p in self.proposals.values() {
            let key = normalize_label(&p.title);
            match p.status {
                ProposalStatus::Proposed | ProposalStatus::Accepted => {
                    coverage.blocked_titles.insert(key);
                }
                ProposalStatus::Dismissed => {
                    let at = p.status_changed_at.unwrap_or(p.created_at);
                    if now - at <= window {
                        coverage.recently_dismissed.insert(key);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, MockProvider, MockReply, ProviderErrorKind};
    use crate::summarizer::ChatSummary;
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::Arc;

    fn t(min: i64) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2025-03-01T09:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
            + Duration::minutes(min)
    }

    fn active(id: &str, umbrella: &str, referenced: i64) -> ActiveSummary {
        ActiveSummary {
            summary: ChatSummary {
                conversation_id: id.into(),
                statement: format!("about {umbrella}"),
                umbrella: umbrella.into(),
                difficulty: Difficulty::Intermediate,
                created_at: t(0),
                source_message_count: 2,
            },
            last_referenced_at: t(referenced),
        }
    }

    fn gateway(mock: &Arc<MockProvider>) -> Gateway {
        Gateway::with_agent_contracts(
            mock.clone(),
            GatewayConfig {
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    fn outline(title: &str, mode: &str, modules: usize, sources: &[&str]) -> serde_json::Value {
        let modules: Vec<_> = (0..modules)
            .map(|i| json!({"title": format!("{title} part {i}"), "time_estimate_minutes": 10, "learner_question": format!("What is step {i}?")}))
            .collect();
        json!({"title": title, "goal_label": "Supervised Learning", "mode": mode, "modules": modules, "source_chat_ids": sources})
    }

    #[test]
    fn most_frequent_umbrella_wins() {
        let summaries = vec![
            active("a", "Supervised Learning", 1),
            active("b", "supervised learning ", 2),
            active("c", "Bash", 3),
        ];
        let theme = select_strengthen_theme(&summaries, &Coverage::default()).unwrap();
        assert_eq!(normalize_label(&theme.theme), "supervised learning");
        assert_eq!(theme.count, 2);
        assert_eq!(
            theme.source_chat_ids,
            vec![ConversationId::from("b"), "a".into()]
        );
    }

    #[test]
    fn ties_go_to_the_most_recent_reference() {
        let summaries = vec![active("a", "Bash", 5), active("b", "Rust", 9)];
        let theme = select_strengthen_theme(&summaries, &Coverage::default()).unwrap();
        assert_eq!(theme.theme, "Rust");
    }

    #[test]
    fn completed_topics_are_not_candidates() {
        let summaries = vec![
            active("a", "Bash", 5),
            active("b", "Bash", 6),
            active("c", "Rust", 1),
        ];
        let mut coverage = Coverage::default();
        coverage.completed_topics.insert("bash".into());
        assert_eq!(
            select_strengthen_theme(&summaries, &coverage)
                .unwrap()
                .theme,
            "Rust"
        );
        assert!(select_strengthen_theme(&[], &coverage).is_none());
    }

    #[test]
    fn nothing_to_decide_on_empty_world() {
        let mock = Arc::new(MockProvider::new());
        let got = select_theme(
            &gateway(&mock),
            &LearnerGraph::new(),
            &[],
            &Coverage::default(),
        )
        .unwrap();
        assert!(got.is_none());
        assert!(mock.calls().is_empty());
    }

    #[test]
    fn explore_anchors_on_an_existing_goal() {
        let mock = Arc::new(MockProvider::new());
        let ids = IdSource::seeded(3);
        let mut graph = LearnerGraph::new();
        graph.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        mock.script(
            AgentName::TopicExplorer,
            "explore:Decision Analysis",
            vec![
                MockReply::Json(
                    json!({"anchor_goal": "Statistics", "concept": "Influence diagrams"}),
                ),
                MockReply::Json(
                    json!({"anchor_goal": "decision analysis", "concept": "Influence diagrams"}),
                ),
            ],
        );
        let sel = select_theme(&gateway(&mock), &graph, &[], &Coverage::default())
            .unwrap()
            .unwrap();
        match sel {
            ThemeSelection::Explore(e) => {
                assert_eq!(e.anchor_goal, "Decision Analysis");
                assert_eq!(e.concept, "Influence diagrams");
            }
            other => panic!("expected explore, got {other:?}"),
        }
        assert_eq!(mock.call_count(AgentName::TopicExplorer), 2);
    }

    fn strengthen_selection(summaries: &[ActiveSummary]) -> ThemeSelection {
        ThemeSelection::Strengthen(
            select_strengthen_theme(summaries, &Coverage::default()).unwrap(),
        )
    }

    #[test]
    fn outlines_are_validated_and_sources_filtered() {
        let mock = Arc::new(MockProvider::new());
        let summaries = vec![
            active("a", "Supervised Learning", 1),
            active("b", "Supervised Learning", 2),
        ];
        let sel = strengthen_selection(&summaries);
        mock.reply_json(
            AgentName::TopicDecider,
            "strengthen:Supervised Learning",
            json!({"proposals": [
                outline("K-means Clustering", "strengthen", 4, &["a", "b", "stale"]),
                outline("Too Long", "strengthen", 5, &["a"]),
                outline("Uncited", "strengthen", 3, &["stale"]),
            ]}),
        );
        let out = propose_outlines(
            &gateway(&mock),
            &sel,
            &summaries,
            &LearnerGraph::new(),
            &Coverage::default(),
            3,
            &IdSource::seeded(1),
            t(10),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].title, "K-means Clustering");
        assert_eq!(
            out[0].source_chat_ids,
            vec![ConversationId::from("a"), "b".into()]
        );
        assert_eq!(out[0].status, ProposalStatus::Proposed);
    }

    #[test]
    fn five_module_outline_alone_is_no_valid_proposal() {
        let mock = Arc::new(MockProvider::new());
        let summaries = vec![active("a", "Supervised Learning", 1)];
        mock.reply_json(
            AgentName::TopicDecider,
            "*",
            json!({"proposals": [outline("K-means", "strengthen", 5, &["a"])]}),
        );
        let err = propose_outlines(
            &gateway(&mock),
            &strengthen_selection(&summaries),
            &summaries,
            &LearnerGraph::new(),
            &Coverage::default(),
            3,
            &IdSource::seeded(1),
            t(10),
        )
        .unwrap_err();
        assert!(matches!(err, TopicError::NoValidProposal { .. }));
    }

    #[test]
    fn completed_course_title_is_filtered() {
        let mock = Arc::new(MockProvider::new());
        let summaries = vec![active("a", "Supervised Learning", 1)];
        mock.reply_json(
            AgentName::TopicDecider,
            "*",
            json!({"proposals": [outline("K-means Clustering", "strengthen", 3, &["a"])]}),
        );
        let mut coverage = Coverage::default();
        coverage.blocked_titles.insert("k-means clustering".into());
        let err = propose_outlines(
            &gateway(&mock),
            &strengthen_selection(&summaries),
            &summaries,
            &LearnerGraph::new(),
            &coverage,
            3,
            &IdSource::seeded(1),
            t(10),
        )
        .unwrap_err();
        assert!(matches!(err, TopicError::NoValidProposal { .. }));
    }

    #[test]
    fn gateway_down_fails_both_modes() {
        let mock = Arc::new(MockProvider::new());
        mock.set_down(true);
        let ids = IdSource::seeded(3);
        let mut graph = LearnerGraph::new();
        graph.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        let summaries = vec![active("a", "Supervised Learning", 1)];
        let err = decide_and_propose(
            &gateway(&mock),
            &summaries,
            &graph,
            &Coverage::default(),
            3,
            &ids,
            t(5),
        )
        .unwrap_err();
        assert!(matches!(err, TopicError::AgentFailure(_)));
    }

    #[test]
    fn explore_failure_keeps_strengthen_results() {
        let mock = Arc::new(MockProvider::new());
        let ids = IdSource::seeded(3);
        let mut graph = LearnerGraph::new();
        graph.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        let summaries = vec![active("a", "Supervised Learning", 1)];
        mock.reply_json(
            AgentName::TopicDecider,
            "strengthen:Supervised Learning",
            json!({"proposals": [
                outline("K-means", "strengthen", 3, &["a"]),
                outline("Decision Trees", "strengthen", 3, &["a"]),
                outline("SVMs", "strengthen", 4, &["a"]),
                outline("Boosting", "strengthen", 4, &["a"]),
            ]}),
        );
        mock.script(
            AgentName::TopicExplorer,
            "*",
            vec![MockReply::Fail(ProviderErrorKind::Auth)],
        );
        let out = decide_and_propose(
            &gateway(&mock),
            &summaries,
            &graph,
            &Coverage::default(),
            3,
            &ids,
            t(5),
        )
        .unwrap();
        assert_eq!(out.proposals.len(), 3);
        assert!(out.has_agent_failure());
        assert_eq!(out.failures[0].0, ProposalMode::Explore);
    }

    #[test]
    fn explore_gets_a_reserved_slot() {
        let mock = Arc::new(MockProvider::new());
        let ids = IdSource::seeded(3);
        let mut graph = LearnerGraph::new();
        graph.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        let summaries = vec![active("a", "Supervised Learning", 1)];
        let many: Vec<_> = ["A", "B", "C"]
            .iter()
            .map(|t| outline(t, "strengthen", 3, &["a"]))
            .collect();
        mock.reply_json(
            AgentName::TopicDecider,
            "strengthen:Supervised Learning",
            json!({"proposals": many}),
        );
        mock.reply_json(
            AgentName::TopicExplorer,
            "*",
            json!({"anchor_goal": "Decision Analysis", "concept": "Influence diagrams"}),
        );
        mock.reply_json(
            AgentName::TopicDecider,
            "explore:Influence diagrams",
            json!({"proposals": [outline("Influence Diagrams", "explore", 3, &[])]}),
        );
        let out = decide_and_propose(
            &gateway(&mock),
            &summaries,
            &graph,
            &Coverage::default(),
            3,
            &ids,
            t(5),
        )
        .unwrap();
        let modes: Vec<_> = out.proposals.iter().map(|p| p.mode).collect();
        assert_eq!(
            modes,
            vec![
                ProposalMode::Strengthen,
                ProposalMode::Strengthen,
                ProposalMode::Explore
            ]
        );
        assert!(out.proposals[2].anchor_goal_id.is_some());
    }

    #[test]
    fn dismissed_titles_are_suppressed_for_the_window() {
        let storage = Storage::in_memory();
        let mut store = ProposalStore::open(&storage).unwrap();
        let p = CourseOutlineProposal {
            id: "p1".into(),
            mode: ProposalMode::Strengthen,
            goal_label: "G".into(),
            title: "K-means".into(),
            modules: vec![],
            source_chat_ids: vec![],
            anchor_goal_id: None,
            status: ProposalStatus::Proposed,
            created_at: t(0),
            status_changed_at: None,
            course_id: None,
        };
        store.insert(p).unwrap();
        store
            .set_status(&"p1".into(), ProposalStatus::Dismissed, t(0), None)
            .unwrap();
        let mut inside = Coverage::default();
        store.extend_coverage(&mut inside, t(0) + Duration::days(10), 10);
        assert!(inside.blocks_title("k-means "));
        let mut outside = Coverage::default();
        store.extend_coverage(&mut outside, t(0) + Duration::days(11), 10);
        assert!(!outside.blocks_title("K-means"));
    }

    proptest! {
        #[test]
        fn ranking_is_a_pure_function(
            items in proptest::collection::vec((0usize..4, 0i64..20), 0..30)
        ) {
            let labels = ["A", "B", "C", "D"];
            let summaries: Vec<_> = items
                .iter()
                .enumerate()
                .map(|(i, (l, r))| active(&format!("c{i}"), labels[*l], *r))
                .collect();
            let first = rank_strengthen_themes(&summaries, &Coverage::default());
            let mut reversed = summaries.clone();
            reversed.reverse();
            let second = rank_strengthen_themes(&reversed, &Coverage::default());
            let themes = |r: &[StrengthenTheme]| r.iter().map(|t| (t.theme.clone(), t.count)).collect::<Vec<_>>();
            prop_assert_eq!(themes(&first), themes(&second));
            let total: usize = first.iter().map(|t| t.count).sum();
            prop_assert_eq!(total, summaries.len());
        }
    }
}
