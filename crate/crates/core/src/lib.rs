//! Agentic learning pipeline over everyday chat conversations.
//!
//! Conversations land in the [`chat`] store, get distilled into one-line
//! learning signals by the [`summarizer`], feed the [`topic`] decider that
//! proposes 3–4 module mini-courses, which the [`course`] generator expands
//! into lessons and quizzes grounded in the learner's own messages. Progress
//! flows into the two-level learner [`graph`] (goals → courses), and the
//! [`regroup`] stage restructures goal umbrellas after each completed course.
//!
//! Every model interaction goes through the [`gateway`], which validates
//! structured output against registered schemas and retries with repair
//! instructions. [`service::Loom`] wires the stages together.

pub mod chat;
pub mod clock;
pub mod config;
pub mod course;
pub mod gateway;
pub mod graph;
pub mod prompts;
pub mod quiz;
pub mod regroup;
pub mod service;
pub mod storage;
pub mod summarizer;
pub mod text;
pub mod topic;

pub use chat::{ActivityStatus, ChatStore, Conversation, ConversationId, Message, Role};
pub use clock::{Clock, IdSource, ManualClock, SystemClock};
pub use config::LoomConfig;
pub use course::{Course, CourseId, CourseModule, ModuleRole};
pub use gateway::{AgentName, AgentRequest, AgentResponse, Gateway, GatewayError};
pub use graph::{GoalId, LearnerGraph, ModuleStatus, RegroupAction};
pub use quiz::{validate_quiz, QuizItem, QuizViolation};
pub use service::{Loom, PipelineRun, Trigger};
pub use summarizer::{ChatSummary, Difficulty};
pub use topic::{CourseOutlineProposal, ProposalId, ProposalMode, ProposalStatus};
