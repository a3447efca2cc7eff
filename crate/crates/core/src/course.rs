//! Expands an accepted outline into a full mini-course grounded in excerpts
//! of the learner's own chats.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::{ChatStore, Conversation, ConversationId, Role};
use crate::clock::{string_id, IdSource};
use crate::gateway::{AgentName, AgentRequest, Gateway, GatewayError};
use crate::prompts::PROMPT_VERSION;
use crate::quiz::{validate_quiz, QuizItem};
use crate::storage::{Journal, Storage, StorageError, SCHEMA_VERSION};
use crate::summarizer::{ChatSummary, Difficulty};
use crate::text::word_count;
use crate::topic::{CourseOutlineProposal, OutlineModuleStub, ProposalId, ProposalStatus};

string_id!(
    /// Identifier of a generated course.
    CourseId
);

pub const DEFAULT_EXCERPT_BUDGET: usize = 2000;
pub const MIN_LESSON_WORDS: usize = 150;
pub const MAX_LESSON_WORDS: usize = 400;
pub const MIN_QUIZ_ITEMS: usize = 1;
pub const MAX_QUIZ_ITEMS: usize = 3;

/// Position of a module in the core → application → synthesis sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleRole {
    Core,
    Application,
    Synthesis,
}

pub fn module_role(index: usize, count: usize) -> ModuleRole {
    if index == 0 {
        ModuleRole::Core
    } else if index + 1 == count {
        ModuleRole::Synthesis
    } else {
        ModuleRole::Application
    }
}

/// Verbatim text taken from one conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExcerpt {
    pub conversation_id: ConversationId,
    pub message_indices: Vec<usize>,
    /// Set when the excerpt is a prefix of the joined messages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_chars: Option<usize>,
    pub text: String,
}

/// What a stored course keeps of an excerpt: where it came from and a hash of
/// its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingRef {
    pub conversation_id: ConversationId,
    pub message_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_chars: Option<usize>,
    pub sha256: String,
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Text the references point to: messages joined by newlines, optionally
/// cut to a character prefix. `None` when an index is out of range.
pub fn excerpt_source_text(
    conversation: &Conversation,
    message_indices: &[usize],
    prefix_chars: Option<usize>,
) -> Option<String> {
    let parts: Option<Vec<&str>> = message_indices
        .iter()
        .map(|&i| conversation.messages.get(i).map(|m| m.text.as_str()))
        .collect();
    let joined = parts?.join("\n");
    Some(match prefix_chars {
        Some(n) => joined.chars().take(n).collect(),
        None => joined,
    })
}

impl ChatExcerpt {
    pub fn grounding(&self) -> GroundingRef {
        GroundingRef {
            conversation_id: self.conversation_id.clone(),
            message_indices: self.message_indices.clone(),
            prefix_chars: self.prefix_chars,
            sha256: sha256_hex(&self.text),
        }
    }

    pub fn verify(&self, conversation: &Conversation) -> bool {
        conversation.id == self.conversation_id
            && excerpt_source_text(conversation, &self.message_indices, self.prefix_chars)
                .is_some_and(|t| t == self.text)
    }
}

impl GroundingRef {
    /// Re-derives the excerpt from the conversation and checks the hash.
    pub fn verify(&self, conversation: &Conversation) -> bool {
        conversation.id == self.conversation_id
            && !self.message_indices.is_empty()
            && excerpt_source_text(conversation, &self.message_indices, self.prefix_chars)
                .is_some_and(|t| sha256_hex(&t) == self.sha256)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseModule {
    pub title: String,
    pub role: ModuleRole,
    pub time_estimate_minutes: u32,
    pub learner_question: String,
    pub lesson_text: String,
    pub quiz: Vec<QuizItem>,
    pub grounding: Vec<GroundingRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub id: CourseId,
    pub proposal_id: ProposalId,
    pub title: String,
    pub goal_label: String,
    pub difficulty: Difficulty,
    pub modules: Vec<CourseModule>,
    pub created_at: DateTime<Utc>,
    pub prompt_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CourseDocument {
    schema_version: u32,
    course: Course,
}

impl Course {
    /// Portable, versioned JSON form.
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(&CourseDocument {
            schema_version: SCHEMA_VERSION,
            course: self.clone(),
        })
        .expect("course serializes")
    }

    pub fn from_document(text: &str) -> Result<Course, CourseError> {
        let doc: CourseDocument =
            serde_json::from_str(text).map_err(|e| CourseError::BadDocument(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(CourseError::BadDocument(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        Ok(doc.course)
    }

    /// Module titles and estimates equal the outline's, index by index.
    pub fn matches_outline(&self, stubs: &[OutlineModuleStub]) -> bool {
        self.modules.len() == stubs.len()
            && self.modules.iter().zip(stubs).all(|(m, s)| {
                m.title == s.title && m.time_estimate_minutes == s.time_estimate_minutes
            })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CourseError {
    #[error("source conversation {0} cannot be resolved")]
    MissingSource(ConversationId),
    #[error("proposal {id} is {status:?}, not accepted")]
    NotAccepted {
        id: ProposalId,
        status: ProposalStatus,
    },
    #[error("proposal {0} cites chats but no excerpts were extracted")]
    NoExcerpts(ProposalId),
    #[error("module {module_index} never passed validation: {}", violations.join("; "))]
    ValidationExhausted {
        module_index: usize,
        violations: Vec<String>,
    },
    #[error("course generation failed: {0}")]
    AgentFailure(GatewayError),
    #[error("unknown course {0}")]
    UnknownCourse(CourseId),
    #[error("bad course document: {0}")]
    BadDocument(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

// ── excerpts ──────────────────────────────────────────────────────────────

/// Picks verbatim excerpts from each cited chat, user turns first, within
/// `budget` characters in total. Each chat gets an equal share.
pub fn extract_excerpts(
    proposal: &CourseOutlineProposal,
    chats: &ChatStore,
    budget: usize,
) -> Result<Vec<ChatExcerpt>, CourseError> {
    let conversations: Vec<&Conversation> = proposal
        .source_chat_ids
        .iter()
        .map(|id| {
            chats
                .get(id)
                .ok_or_else(|| CourseError::MissingSource(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(excerpts_from(&conversations, budget))
}

pub fn excerpts_from(conversations: &[&Conversation], budget: usize) -> Vec<ChatExcerpt> {
    if conversations.is_empty() {
        return Vec::new();
    }
    let share = budget / conversations.len();
    let mut out = Vec::new();
    for conversation in conversations {
        let mut remaining = share;
        let order = conversation
            .messages
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == Role::User)
            .chain(
                conversation
                    .messages
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.role == Role::Assistant),
            );
        let mut took_any = false;
        for (index, message) in order {
            let chars = message.text.chars().count();
            if chars <= remaining {
                out.push(ChatExcerpt {
                    conversation_id: conversation.id.clone(),
                    message_indices: vec![index],
                    prefix_chars: None,
                    text: message.text.clone(),
                });
                remaining -= chars;
                took_any = true;
            } else if !took_any && remaining > 0 {
                // The first user turn is too long for the share; keep its
                // opening so the chat is still represented.
                let text: String = message.text.chars().take(remaining).collect();
                let taken = text.chars().count();
                out.push(ChatExcerpt {
                    conversation_id: conversation.id.clone(),
                    message_indices: vec![index],
                    prefix_chars: Some(taken),
                    text,
                });
                remaining -= taken;
                took_any = true;
            }
            if remaining == 0 {
                break;
            }
        }
    }
    out
}

/// Majority difficulty of the source chats; ties and no data give
/// intermediate.
pub fn learner_difficulty<'a>(summaries: impl IntoIterator<Item = &'a ChatSummary>) -> Difficulty {
    let mut counts: BTreeMap<Difficulty, usize> = BTreeMap::new();
    for s in summaries {
        *counts.entry(s.difficulty).or_default() += 1;
    }
    let Some(&best) = counts.values().max() else {
        return Difficulty::Intermediate;
    };
    let leaders: Vec<Difficulty> = counts
        .iter()
        .filter(|(_, &c)| c == best)
        .map(|(&d, _)| d)
        .collect();
    match leaders.as_slice() {
        [only] => *only,
        _ => Difficulty::Intermediate,
    }
}

// ── generation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
struct ModuleReply {
    lesson_text: String,
    quiz: Vec<QuizItem>,
}

#[derive(Debug, Serialize)]
struct ModuleContext<'a> {
    course_title: &'a str,
    goal_label: &'a str,
    difficulty: Difficulty,
    module_index: usize,
    module_count: usize,
    role: ModuleRole,
    module: &'a OutlineModuleStub,
    outline: Vec<&'a str>,
    excerpts: Vec<&'a str>,
}

fn check_module(reply: &ModuleReply) -> Result<(), Vec<String>> {
    let mut violations = Vec::new();
    let words = word_count(&reply.lesson_text);
    if !(MIN_LESSON_WORDS..=MAX_LESSON_WORDS).contains(&words) {
        violations.push(format!(
            "lesson_text has {words} words, expected {MIN_LESSON_WORDS}-{MAX_LESSON_WORDS}"
        ));
    }
    if !(MIN_QUIZ_ITEMS..=MAX_QUIZ_ITEMS).contains(&reply.quiz.len()) {
        violations.push(format!(
            "quiz has {} items, expected {MIN_QUIZ_ITEMS}-{MAX_QUIZ_ITEMS}",
            reply.quiz.len()
        ));
    }
    for (i, item) in reply.quiz.iter().enumerate() {
        if let Err(vs) = validate_quiz(item) {
            violations.extend(vs.into_iter().map(|v| format!("quiz item {i}: {v}")));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Mock-script key for one module's generation call.
pub fn module_subject(course_title: &str, index: usize) -> String {
    format!("{course_title}#{index}")
}

/// Generates every module (concurrently) and assembles the course once all
/// of them validate.
pub fn generate_course(
    gateway: &Gateway,
    proposal: &CourseOutlineProposal,
    excerpts: &[ChatExcerpt],
    difficulty: Difficulty,
    ids: &IdSource,
    now: DateTime<Utc>,
    seed: Option<u64>,
) -> Result<Course, CourseError> {
    if proposal.status != ProposalStatus::Accepted {
        return Err(CourseError::NotAccepted {
            id: proposal.id.clone(),
            status: proposal.status,
        });
    }
    if excerpts.is_empty() && !proposal.source_chat_ids.is_empty() {
        return Err(CourseError::NoExcerpts(proposal.id.clone()));
    }
    let count = proposal.modules.len();
    let outline: Vec<&str> = proposal.modules.iter().map(|m| m.title.as_str()).collect();
    let excerpt_texts: Vec<&str> = excerpts.iter().map(|e| e.text.as_str()).collect();
    let requests: Vec<AgentRequest> = proposal
        .modules
        .iter()
        .enumerate()
        .map(|(index, stub)| {
            let role = module_role(index, count);
            let context = ModuleContext {
                course_title: &proposal.title,
                goal_label: &proposal.goal_label,
                difficulty,
                module_index: index,
                module_count: count,
                role,
                module: stub,
                outline: outline.clone(),
                excerpts: if role == ModuleRole::Synthesis {
                    Vec::new()
                } else {
                    excerpt_texts.clone()
                },
            };
            AgentRequest::new(AgentName::CourseGenerator)
                .subject(module_subject(&proposal.title, index))
                .context(&context)
                .with_seed(seed.map(|s| s.wrapping_add(index as u64)))
        })
        .collect();

    let results: Vec<Result<ModuleReply, GatewayError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = requests
            .iter()
            .map(|request| {
                scope.spawn(move || {
                    gateway
                        .call::<ModuleReply>(request, Some(&check_module))
                        .map(|r| r.parsed)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("module generation thread panicked"))
            .collect()
    });

    let grounding: Vec<GroundingRef> = excerpts.iter().map(ChatExcerpt::grounding).collect();
    let mut modules = Vec::with_capacity(count);
    for (index, (stub, result)) in proposal.modules.iter().zip(results).enumerate() {
        let reply = result.map_err(|e| match e {
            GatewayError::SchemaExhausted { violations, .. } => CourseError::ValidationExhausted {
                module_index: index,
                violations,
            },
            other => CourseError::AgentFailure(other),
        })?;
        let role = module_role(index, count);
        modules.push(CourseModule {
            title: stub.title.clone(),
            role,
            time_estimate_minutes: stub.time_estimate_minutes,
            learner_question: stub.learner_question.clone(),
            lesson_text: reply.lesson_text,
            quiz: reply.quiz,
            grounding: if role == ModuleRole::Synthesis {
                Vec::new()
            } else {
                grounding.clone()
            },
        });
    }
    Ok(Course {
        id: CourseId(ids.next()),
        proposal_id: proposal.id.clone(),
        title: proposal.title.clone(),
        goal_label: proposal.goal_label.clone(),
        difficulty,
        modules,
        created_at: now,
        prompt_version: PROMPT_VERSION.to_string(),
    })
}

// ── persistence ───────────────────────────────────────────────────────────

pub struct CourseStore {
    courses: BTreeMap<CourseId, Course>,
    order: Vec<CourseId>,
    journal: Journal<Course>,
}

impl CourseStore {
    pub fn open(storage: &Storage) -> Result<Self, StorageError> {
        let (journal, records) = storage.open_journal::<Course>("courses")?;
        let mut store = Self {
            courses: BTreeMap::new(),
            order: Vec::new(),
            journal,
        };
        for course in records {
            store.index(course);
        }
        Ok(store)
    }

    fn index(&mut self, course: Course) {
        if !self.courses.contains_key(&course.id) {
            self.order.push(course.id.clone());
        }
        self.courses.insert(course.id.clone(), course);
    }

    pub fn insert(&mut self, course: Course) -> Result<(), StorageError> {
        self.journal.append(&course)?;
        self.index(course);
        Ok(())
    }

    pub fn get(&self, id: &CourseId) -> Option<&Course> {
        self.courses.get(id)
    }

    pub fn by_proposal(&self, id: &ProposalId) -> Option<&Course> {
        self.order
            .iter()
            .map(|c| &self.courses[c])
            .find(|c| c.proposal_id == *id)
    }

    pub fn list(&self) -> Vec<&Course> {
        self.order.iter().map(|id| &self.courses[id]).collect()
    }

    pub fn len(&self) -> usize {
        self.courses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.courses.is_empty()
    }
}
