//! Conversation store and the temporal activity gate.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::{string_id, IdSource};
use crate::storage::{Journal, Storage, StorageError};

string_id!(
    /// Identifier of an observed chat session.
    ConversationId
);

pub const DEFAULT_WINDOW_DAYS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self {
            role,
            text: text.into(),
            timestamp,
        }
    }

    pub fn user(text: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self::new(Role::User, text, timestamp)
    }

    pub fn assistant(text: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self::new(Role::Assistant, text, timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: ConversationId,
    pub title: String,
    pub messages: Vec<Message>,
    pub created_at: DateTime<Utc>,
    pub last_referenced_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

impl Conversation {
    pub fn is_tombstoned(&self) -> bool {
        self.deleted_at.is_some()
    }

    pub fn user_message_count(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .count()
    }

    pub fn last_message_at(&self) -> Option<DateTime<Utc>> {
        self.messages.last().map(|m| m.timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityStatus {
    Active,
    Inactive,
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("unknown conversation {0}")]
    UnknownConversation(ConversationId),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("conversation {0} already exists")]
    DuplicateConversation(ConversationId),
    #[error("clock skew: now {now} is earlier than last reference {last_referenced_at}")]
    ClockSkew {
        now: DateTime<Utc>,
        last_referenced_at: DateTime<Utc>,
    },
    #[error("unparseable export document: {0}")]
    UnparseableDocument(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

/// Active iff at most `window_days` days (of 24 hours) have elapsed since
/// the last reference; exactly `window_days` is still active, any instant
/// later is not. Tombstoned conversations are never active.
pub fn activity_status(
    conversation: &Conversation,
    now: DateTime<Utc>,
    window_days: u32,
) -> Result<ActivityStatus, ChatError> {
    if now < conversation.last_referenced_at {
        return Err(ChatError::ClockSkew {
            now,
            last_referenced_at: conversation.last_referenced_at,
        });
    }
    if conversation.is_tombstoned() {
        return Ok(ActivityStatus::Inactive);
    }
    let elapsed = now - conversation.last_referenced_at;
    Ok(if elapsed <= Duration::days(i64::from(window_days)) {
        ActivityStatus::Active
    } else {
        ActivityStatus::Inactive
    })
}

fn check_message(message: &Message, previous: Option<&Message>) -> Result<(), ChatError> {
    if message.text.trim().is_empty() {
        return Err(ChatError::InvalidMessage("message text is empty".into()));
    }
    if let Some(prev) = previous {
        if message.timestamp < prev.timestamp {
            return Err(ChatError::InvalidMessage(format!(
                "timestamp {} precedes previous message at {}",
                message.timestamp, prev.timestamp
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum ChatRecord {
    Created {
        conversation: Conversation,
    },
    Appended {
        id: ConversationId,
        message: Message,
    },
    Referenced {
        id: ConversationId,
        at: DateTime<Utc>,
    },
    Tombstoned {
        id: ConversationId,
        at: DateTime<Utc>,
    },
}

/// Why an entry of an export document was not imported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedEntry {
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ImportReport {
    pub imported: Vec<Conversation>,
    pub skipped: Vec<SkippedEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportedMessage {
    role: Role,
    text: String,
    timestamp: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportedChat {
    id: String,
    title: String,
    messages: Vec<ExportedMessage>,
}

pub struct ChatStore {
    conversations: BTreeMap<ConversationId, Conversation>,
    journal: Journal<ChatRecord>,
}

impl ChatStore {
    pub fn open(storage: &Storage) -> Result<Self, ChatError> {
        let (journal, records) = storage.open_journal::<ChatRecord>("chats")?;
        let mut conversations = BTreeMap::new();
        for record in records {
            apply_record(&mut conversations, record);
        }
        Ok(Self {
            conversations,
            journal,
        })
    }

    pub fn get(&self, id: &ConversationId) -> Option<&Conversation> {
        self.conversations.get(id)
    }

    /// Live (non-tombstoned) conversations, most recently referenced first.
    pub fn list(&self) -> Vec<&Conversation> {
        let mut live: Vec<_> = self
            .conversations
            .values()
            .filter(|c| !c.is_tombstoned())
            .collect();
        live.sort_by(|a, b| {
            b.last_referenced_at
                .cmp(&a.last_referenced_at)
                .then_with(|| a.id.cmp(&b.id))
        });
        live
    }

    /// Every conversation including tombstones, in id order.
    pub fn all(&self) -> impl Iterator<Item = &Conversation> {
        self.conversations.values()
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn create(
        &mut self,
        id: ConversationId,
        title: impl Into<String>,
        at: DateTime<Utc>,
    ) -> Result<Conversation, ChatError> {
        if self.conversations.contains_key(&id) {
            return Err(ChatError::DuplicateConversation(id));
        }
        let conversation = Conversation {
            id,
            title: title.into(),
            messages: Vec::new(),
            created_at: at,
            last_referenced_at: at,
            deleted_at: None,
        };
        self.commit(ChatRecord::Created {
            conversation: conversation.clone(),
        })?;
        Ok(conversation)
    }

    pub fn append_message(
        &mut self,
        id: &ConversationId,
        message: Message,
    ) -> Result<Conversation, ChatError> {
        let conversation = self
            .conversations
            .get(id)
            .ok_or_else(|| ChatError::UnknownConversation(id.clone()))?;
        check_message(&message, conversation.messages.last())?;
        self.commit(ChatRecord::Appended {
            id: id.clone(),
            message,
        })?;
        Ok(self.conversations[id].clone())
    }

    /// Records a reference (chat reopened, cited by an accepted proposal).
    /// `last_referenced_at` never moves backwards.
    pub fn touch(&mut self, id: &ConversationId, at: DateTime<Utc>) -> Result<(), ChatError> {
        let conversation = self
            .conversations
            .get(id)
            .ok_or_else(|| ChatError::UnknownConversation(id.clone()))?;
        if at <= conversation.last_referenced_at {
            return Ok(());
        }
        self.commit(ChatRecord::Referenced { id: id.clone(), at })
    }

    pub fn tombstone(&mut self, id: &ConversationId, at: DateTime<Utc>) -> Result<(), ChatError> {
        let conversation = self
            .conversations
            .get(id)
            .ok_or_else(|| ChatError::UnknownConversation(id.clone()))?;
        if conversation.is_tombstoned() {
            return Ok(());
        }
        self.commit(ChatRecord::Tombstoned { id: id.clone(), at })
    }

    /// Imports an export document (a JSON list of chats). Malformed entries
    /// and ids that already exist are skipped and reported.
    pub fn import_conversations(
        &mut self,
        document: &str,
        ids: &IdSource,
        now: DateTime<Utc>,
    ) -> Result<ImportReport, ChatError> {
        let value: Value = serde_json::from_str(document)
            .map_err(|e| ChatError::UnparseableDocument(e.to_string()))?;
        let Value::Array(entries) = value else {
            return Err(ChatError::UnparseableDocument(
                "top level must be a list of chats".into(),
            ));
        };
        let mut report = ImportReport::default();
        let mut seen = HashSet::new();
        for (index, entry) in entries.iter().enumerate() {
            let declared_id = entry.get("id").and_then(Value::as_str).map(str::to_string);
            let skip = |reason: String| SkippedEntry {
                index,
                id: declared_id.clone(),
                reason,
            };
            let conversation = match parse_entry(entry, ids, now) {
                Ok(c) => c,
                Err(reason) => {
                    report.skipped.push(skip(reason));
                    continue;
                }
            };
            if self.conversations.contains_key(&conversation.id)
                || !seen.insert(conversation.id.clone())
            {
                report.skipped.push(skip(format!(
                    "conversation {} already exists",
                    conversation.id
                )));
                continue;
            }
            self.commit(ChatRecord::Created {
                conversation: conversation.clone(),
            })?;
            report.imported.push(conversation);
        }
        Ok(report)
    }

    /// Serializes the given conversations in the import schema.
    pub fn export<'a>(conversations: impl IntoIterator<Item = &'a Conversation>) -> String {
        let chats: Vec<ExportedChat> = conversations
            .into_iter()
            .map(|c| ExportedChat {
                id: c.id.0.clone(),
                title: c.title.clone(),
                messages: c
                    .messages
                    .iter()
                    .map(|m| ExportedMessage {
                        role: m.role,
                        text: m.text.clone(),
                        timestamp: m.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&chats).expect("export serializes")
    }

    fn commit(&mut self, record: ChatRecord) -> Result<(), ChatError> {
        self.journal.append(&record)?;
        apply_record(&mut self.conversations, record);
        Ok(())
    }
}

fn apply_record(conversations: &mut BTreeMap<ConversationId, Conversation>, record: ChatRecord) {
    match record {
        ChatRecord::Created { conversation } => {
            conversations.insert(conversation.id.clone(), conversation);
        }
        ChatRecord::Appended { id, message } => {
            if let Some(c) = conversations.get_mut(&id) {
                c.last_referenced_at = c.last_referenced_at.max(message.timestamp);
                c.messages.push(message);
            }
        }
        ChatRecord::Referenced { id, at } => {
            if let Some(c) = conversations.get_mut(&id) {
                c.last_referenced_at = c.last_referenced_at.max(at);
            }
        }
        ChatRecord::Tombstoned { id, at } => {
            if let Some(c) = conversations.get_mut(&id) {
                c.deleted_at = Some(at);
            }
        }
    }
}

fn parse_entry(entry: &Value, ids: &IdSource, now: DateTime<Utc>) -> Result<Conversation, String> {
    let obj = entry.as_object().ok_or("entry is not an object")?;
    let id = match obj.get("id") {
        None | Some(Value::Null) => ConversationId(ids.next()),
        Some(Value::String(s)) if !s.trim().is_empty() => ConversationId(s.clone()),
        Some(_) => return Err("id must be a nonempty string".into()),
    };
    let title = match obj.get("title") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("title must be a string".into()),
    };
    let raw_messages = obj
        .get("messages")
        .ok_or("missing messages field")?
        .as_array()
        .ok_or("messages must be a list")?;
    let mut messages: Vec<Message> = Vec::with_capacity(raw_messages.len());
    for (i, raw) in raw_messages.iter().enumerate() {
        let parsed: ExportedMessage =
            serde_json::from_value(raw.clone()).map_err(|e| format!("message {i}: {e}"))?;
        let timestamp = DateTime::parse_from_rfc3339(&parsed.timestamp)
            .map_err(|e| format!("message {i}: bad timestamp: {e}"))?
            .with_timezone(&Utc);
        let message = Message::new(parsed.role, parsed.text, timestamp);
        check_message(&message, messages.last()).map_err(|e| format!("message {i}: {e}"))?;
        messages.push(message);
    }
    let created_at = messages.first().map(|m| m.timestamp).unwrap_or(now);
    let last_referenced_at = messages.last().map(|m| m.timestamp).unwrap_or(now);
    Ok(Conversation {
        id,
        title,
        messages,
        created_at,
        last_referenced_at,
        deleted_at: None,
    })
}
