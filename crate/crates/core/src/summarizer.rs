//! Distills each conversation into one learner-centric statement with a
//! thematic umbrella and a difficulty estimate.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::chat::{activity_status, ActivityStatus, ChatStore, Conversation, ConversationId, Role};
use crate::gateway::{AgentName, AgentRequest, Gateway, GatewayError};
use crate::storage::{Journal, Storage, StorageError};
use crate::text::is_single_sentence;

pub const MAX_STATEMENT_CHARS: usize = 140;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Beginner,
    Intermediate,
    Advanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSummary {
    pub conversation_id: ConversationId,
    pub statement: String,
    pub umbrella: String,
    pub difficulty: Difficulty,
    pub created_at: DateTime<Utc>,
    /// Message count of the conversation when it was summarized.
    pub source_message_count: usize,
}

impl ChatSummary {
    fn same_content(&self, other: &ChatSummary) -> bool {
        self.conversation_id == other.conversation_id
            && self.statement == other.statement
            && self.umbrella == other.umbrella
            && self.difficulty == other.difficulty
            && self.source_message_count == other.source_message_count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
struct SummaryReply {
    statement: String,
    umbrella: String,
    difficulty: Difficulty,
}

#[derive(Debug, thiserror::Error)]
pub enum SummarizeError {
    #[error("conversation {0} has no user messages")]
    EmptyConversation(ConversationId),
    #[error("summarizer failed: {0}")]
    AgentFailure(#[from] GatewayError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Serialize)]
struct TranscriptTurn<'a> {
    index: usize,
    role: Role,
    text: &'a str,
}

pub fn summary_request(conversation: &Conversation) -> AgentRequest {
    let transcript: Vec<_> = conversation
        .messages
        .iter()
        .enumerate()
        .map(|(index, m)| TranscriptTurn {
            index,
            role: m.role,
            text: &m.text,
        })
        .collect();
    AgentRequest::new(AgentName::Summarizer)
        .subject(conversation.id.as_str())
        .section("title", conversation.title.clone())
        .context(&transcript)
}

fn check_reply(reply: &SummaryReply) -> Result<(), Vec<String>> {
    let mut violations = Vec::new();
    let statement = reply.statement.trim();
    let chars = statement.chars().count();
    if chars > MAX_STATEMENT_CHARS {
        violations.push(format!(
            "statement has {chars} characters, the limit is {MAX_STATEMENT_CHARS}"
        ));
    }
    if !is_single_sentence(statement) {
        violations.push("statement must be a single sentence".to_string());
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Summarizes a conversation through the gateway. Does not persist.
pub fn summarize(
    gateway: &Gateway,
    conversation: &Conversation,
    now: DateTime<Utc>,
) -> Result<ChatSummary, SummarizeError> {
    if conversation.user_message_count() == 0 {
        return Err(SummarizeError::EmptyConversation(conversation.id.clone()));
    }
    let response =
        gateway.call::<SummaryReply>(&summary_request(conversation), Some(&check_reply))?;
    let reply = response.parsed;
    Ok(ChatSummary {
        conversation_id: conversation.id.clone(),
        statement: reply.statement.trim().to_string(),
        umbrella: reply.umbrella.trim().to_string(),
        difficulty: reply.difficulty,
        created_at: now,
        source_message_count: conversation.messages.len(),
    })
}

/// True when the conversation gained or lost messages since `current`.
pub fn is_stale(conversation: &Conversation, current: Option<&ChatSummary>) -> bool {
    current.is_none_or(|s| s.source_message_count != conversation.messages.len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resummarized {
    Unchanged,
    Fresh(ChatSummary),
}

/// Produces a new summary only when the conversation changed since
/// `current`; an unchanged conversation costs no gateway call.
pub fn resummarize_if_stale(
    gateway: &Gateway,
    conversation: &Conversation,
    current: Option<&ChatSummary>,
    now: DateTime<Utc>,
) -> Result<Resummarized, SummarizeError> {
    if !is_stale(conversation, current) {
        return Ok(Resummarized::Unchanged);
    }
    summarize(gateway, conversation, now).map(Resummarized::Fresh)
}

/// Current summary per conversation, journaled.
pub struct SummaryStore {
    current: BTreeMap<ConversationId, ChatSummary>,
    journal: Journal<ChatSummary>,
}

impl SummaryStore {
    pub fn open(storage: &Storage) -> Result<Self, StorageError> {
        let (journal, records) = storage.open_journal::<ChatSummary>("summaries")?;
        let mut current = BTreeMap::new();
        for summary in records {
            current.insert(summary.conversation_id.clone(), summary);
        }
        Ok(Self { current, journal })
    }

    pub fn get(&self, id: &ConversationId) -> Option<&ChatSummary> {
        self.current.get(id)
    }

    pub fn all(&self) -> impl Iterator<Item = &ChatSummary> {
        self.current.values()
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    /// Makes `summary` current. A summary with the same content as the
    /// existing one leaves the store untouched and returns `false`.
    pub fn put(&mut self, summary: ChatSummary) -> Result<bool, StorageError> {
        if self
            .current
            .get(&summary.conversation_id)
            .is_some_and(|existing| existing.same_content(&summary))
        {
            return Ok(false);
        }
        self.journal.append(&summary)?;
        self.current
            .insert(summary.conversation_id.clone(), summary);
        Ok(true)
    }
}

/// A summary paired with when its conversation was last referenced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActiveSummary {
    pub summary: ChatSummary,
    pub last_referenced_at: DateTime<Utc>,
}

/// Summaries whose conversation is active at `now`.
pub fn active_summaries(
    summaries: &SummaryStore,
    chats: &ChatStore,
    now: DateTime<Utc>,
    window_days: u32,
) -> Vec<ActiveSummary> {
    summaries
        .all()
        .filter_map(|summary| {
            let conversation = chats.get(&summary.conversation_id)?;
            match activity_status(conversation, now, window_days) {
                Ok(ActivityStatus::Active) => Some(ActiveSummary {
                    summary: summary.clone(),
                    last_referenced_at: conversation.last_referenced_at,
                }),
                Ok(ActivityStatus::Inactive) => None,
                Err(error) => {
                    tracing::warn!(conversation = %conversation.id, %error, "skipping summary");
                    None
                }
            }
        })
        .collect()
}
