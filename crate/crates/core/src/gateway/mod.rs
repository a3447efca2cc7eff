//! Uniform access to language-model backends.
//!
//! Agents build an [`AgentRequest`] of named prompt sections and get back a
//! typed, schema-validated value. Raw model text stays inside this module;
//! the only thing that crosses the boundary is [`AgentResponse::parsed`].

mod log;
mod mock;
mod openai;
mod schema;
mod synthetic;

use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use log::{CallLog, CallLogEntry};
pub use mock::{MockProvider, MockReply, MockScript, ScriptEntry};
pub use openai::OpenAiCompatible;
pub use schema::{SchemaDefinition, SchemaRegistry};
pub use synthetic::SyntheticResponder;

/// The agents of the pipeline. Each one owns exactly one response schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentName {
    Assistant,
    Summarizer,
    TopicExplorer,
    TopicDecider,
    CourseGenerator,
    Regrouper,
}

impl AgentName {
    pub const ALL: [AgentName; 6] = [
        AgentName::Assistant,
        AgentName::Summarizer,
        AgentName::TopicExplorer,
        AgentName::TopicDecider,
        AgentName::CourseGenerator,
        AgentName::Regrouper,
    ];

    pub fn schema_id(self) -> &'static str {
        match self {
            AgentName::Assistant => "assistant_reply.v1",
            AgentName::Summarizer => "chat_summary.v1",
            AgentName::TopicExplorer => "adjacent_concept.v1",
            AgentName::TopicDecider => "course_outlines.v1",
            AgentName::CourseGenerator => "course_module.v1",
            AgentName::Regrouper => "regroup_actions.v1",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentName::Assistant => "assistant",
            AgentName::Summarizer => "summarizer",
            AgentName::TopicExplorer => "topic_explorer",
            AgentName::TopicDecider => "topic_decider",
            AgentName::CourseGenerator => "course_generator",
            AgentName::Regrouper => "regrouper",
        }
    }
}

impl std::fmt::Display for AgentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub name: String,
    pub text: String,
}

/// Name of the section the mock provider keys its scripts on.
pub const SUBJECT_SECTION: &str = "subject";
/// Name of the section carrying the structured JSON context.
pub const CONTEXT_SECTION: &str = "context";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentRequest {
    pub agent: AgentName,
    pub sections: Vec<PromptSection>,
    pub response_schema: String,
    pub seed: Option<u64>,
}

impl AgentRequest {
    pub fn new(agent: AgentName) -> Self {
        Self {
            agent,
            sections: Vec::new(),
            response_schema: agent.schema_id().to_string(),
            seed: None,
        }
    }

    pub fn section(mut self, name: impl Into<String>, text: impl Into<String>) -> Self {
        self.sections.push(PromptSection {
            name: name.into(),
            text: text.into(),
        });
        self
    }

    pub fn subject(self, key: impl Into<String>) -> Self {
        self.section(SUBJECT_SECTION, key)
    }

    pub fn context(self, value: &impl Serialize) -> Self {
        let text = serde_json::to_string_pretty(value).expect("context serializes");
        self.section(CONTEXT_SECTION, text)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn get_section(&self, name: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.text.as_str())
    }

    /// SHA-256 over the canonical JSON of the request.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// A validated response. `parsed` is the only payload other modules see.
#[derive(Debug, Clone)]
pub struct AgentResponse<T> {
    pub parsed: T,
    pub provider: String,
    pub latency_ms: u64,
    pub attempts: u32,
    raw_text: String,
}

impl<T> AgentResponse<T> {
    pub fn raw_len(&self) -> usize {
        self.raw_text.len()
    }
}

/// What a provider receives: the request plus the rendered prompt.
#[derive(Debug, Clone)]
pub struct ProviderRequest {
    pub agent: AgentName,
    pub system: String,
    pub sections: Vec<PromptSection>,
    pub seed: Option<u64>,
    pub attempt: u32,
}

impl ProviderRequest {
    pub fn get_section(&self, name: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.text.as_str())
    }

    pub fn render_user_prompt(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str("## ");
            out.push_str(&s.name);
            out.push('\n');
            out.push_str(&s.text);
            out.push_str("\n\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderErrorKind {
    Timeout,
    RateLimited,
    Transient,
    Auth,
    Network,
    Fatal,
}

impl ProviderErrorKind {
    pub fn retriable(self) -> bool {
        matches!(
            self,
            ProviderErrorKind::Timeout
                | ProviderErrorKind::RateLimited
                | ProviderErrorKind::Transient
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?}: {message}")]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub message: String,
}

impl ProviderError {
    pub fn new(kind: ProviderErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("{agent} call timed out after {attempts} attempt(s)")]
    Timeout { agent: AgentName, attempts: u32 },
    #[error("{agent} produced no schema-valid response in {attempts} attempt(s): {}", violations.join("; "))]
    SchemaExhausted {
        agent: AgentName,
        attempts: u32,
        violations: Vec<String>,
    },
    #[error("{agent} provider error after {attempts} attempt(s): {error}")]
    Provider {
        agent: AgentName,
        attempts: u32,
        error: ProviderError,
    },
    #[error("schema '{0}' is not registered")]
    UnregisteredSchema(String),
    #[error("agent {agent} may not use schema '{schema}'")]
    SchemaMismatch { agent: AgentName, schema: String },
    #[error("schema '{0}' is already registered")]
    DuplicateSchema(String),
    #[error("schema '{id}' is invalid: {reason}")]
    InvalidSchema { id: String, reason: String },
    #[error("too many calls in flight")]
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    #[default]
    Block,
    Reject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub retry_budget: u32,
    pub timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub inflight_limit: usize,
    pub busy_policy: BusyPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            retry_budget: 2,
            timeout_ms: 60_000,
            backoff_base_ms: 250,
            inflight_limit: 4,
            busy_policy: BusyPolicy::Block,
        }
    }
}

/// Counting semaphore bounding provider pressure.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl InFlight {
    fn acquire(&self, policy: BusyPolicy) -> Result<Permit<'_>, GatewayError> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            if policy == BusyPolicy::Reject {
                return Err(GatewayError::Busy);
            }
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Ok(Permit(self))
    }
}

/// Per-call semantic check over the typed value; returns violations.
pub type Check<'a, T> = &'a (dyn Fn(&T) -> Result<(), Vec<String>> + Sync);

pub struct Gateway {
    provider: Arc<dyn Provider>,
    registry: SchemaRegistry,
    config: GatewayConfig,
    inflight: InFlight,
    log: CallLog,
}

impl Gateway {
    pub fn new(
        provider: Arc<dyn Provider>,
        registry: SchemaRegistry,
        config: GatewayConfig,
    ) -> Self {
        let limit = config.inflight_limit.max(1);
        Self {
            provider,
            registry,
            config,
            inflight: InFlight {
                limit,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            log: CallLog::in_memory(),
        }
    }

    /// A gateway with every agent contract registered.
    pub fn with_agent_contracts(provider: Arc<dyn Provider>, config: GatewayConfig) -> Self {
        Self::new(provider, SchemaRegistry::with_agent_contracts(), config)
    }

    pub fn with_call_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn registry(&self) -> &SchemaRegistry {
        &self.registry
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Calls the agent and returns the first response that parses, matches
    /// the registered schema and passes `check`, retrying with a repair
    /// instruction up to the retry budget.
    pub fn call<T: DeserializeOwned>(
        &self,
        request: &AgentRequest,
        check: Option<Check<'_, T>>,
    ) -> Result<AgentResponse<T>, GatewayError> {
        if request.agent.schema_id() != request.response_schema {
            return Err(GatewayError::SchemaMismatch {
                agent: request.agent,
                schema: request.response_schema.clone(),
            });
        }
        let schema = self
            .registry
            .get(&request.response_schema)
            .ok_or_else(|| GatewayError::UnregisteredSchema(request.response_schema.clone()))?;
        let _permit = self.inflight.acquire(self.config.busy_policy)?;

        let started = Instant::now();
        let mut sections = request.sections.clone();
        sections.push(PromptSection {
            name: "response_schema".into(),
            text: schema.json_text(),
        });
        let mut attempts = 0u32;
        let mut prompt_tokens = 0u32;
        let mut completion_tokens = 0u32;
        let outcome = loop {
            attempts += 1;
            let provider_request = ProviderRequest {
                agent: request.agent,
                system: crate::prompts::system_prompt(request.agent).to_string(),
                sections: sections.clone(),
                seed: request.seed,
                attempt: attempts,
            };
            let may_retry = attempts <= self.config.retry_budget;
            match self.complete_with_timeout(provider_request) {
                Err(error) => {
                    tracing::debug!(agent = %request.agent, attempts, %error, "provider error");
                    if error.kind.retriable() && may_retry {
                        self.backoff(attempts);
                        continue;
                    }
                    break Err(if error.kind == ProviderErrorKind::Timeout {
                        GatewayError::Timeout {
                            agent: request.agent,
                            attempts,
                        }
                    } else {
                        GatewayError::Provider {
                            agent: request.agent,
                            attempts,
                            error,
                        }
                    });
                }
                Ok(reply) => {
                    prompt_tokens += reply.prompt_tokens.unwrap_or(0);
                    completion_tokens += reply.completion_tokens.unwrap_or(0);
                    match schema.parse::<T>(&reply.text).and_then(|v| match check {
                        Some(check) => check(&v).map(|()| v),
                        None => Ok(v),
                    }) {
                        Ok(parsed) => {
                            break Ok(AgentResponse {
                                parsed,
                                provider: self.provider.name().to_string(),
                                latency_ms: started.elapsed().as_millis() as u64,
                                attempts,
                                raw_text: reply.text,
                            })
                        }
                        Err(violations) => {
                            tracing::debug!(agent = %request.agent, attempts, ?violations, "rejected response");
                            if may_retry {
                                sections.retain(|s| s.name != "repair");
                                sections.push(PromptSection {
                                    name: "repair".into(),
                                    text: crate::prompts::repair_instruction(&violations),
                                });
                                continue;
                            }
                            break Err(GatewayError::SchemaExhausted {
                                agent: request.agent,
                                attempts,
                                violations,
                            });
                        }
                    }
                }
            }
        };
        self.log.record(CallLogEntry {
            request_hash: request.hash(),
            agent: request.agent,
            provider: self.provider.name().to_string(),
            attempts,
            latency_ms: started.elapsed().as_millis() as u64,
            ok: outcome.is_ok(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            prompt_tokens: (prompt_tokens > 0).then_some(prompt_tokens),
            completion_tokens: (completion_tokens > 0).then_some(completion_tokens),
            raw_bytes: outcome.as_ref().ok().map(|r| r.raw_text.len()),
        });
        outcome
    }

    fn backoff(&self, attempts: u32) {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << (attempts - 1).min(10));
        if ms > 0 {
            std::thread::sleep(Duration::from_millis(ms));
        }
    }

    fn complete_with_timeout(
        &self,
        request: ProviderRequest,
    ) -> Result<ProviderReply, ProviderError> {
        let (tx, rx) = mpsc::channel();
        let provider = Arc::clone(&self.provider);
        std::thread::spawn(move || {
            let _ = tx.send(provider.complete(&request));
        });
        match rx.recv_timeout(Duration::from_millis(self.config.timeout_ms)) {
            Ok(result) => result,
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ProviderError::new(
                ProviderErrorKind::Timeout,
                format!("no reply within {} ms", self.config.timeout_ms),
            )),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ProviderError::new(
                ProviderErrorKind::Fatal,
                "provider thread panicked",
            )),
        }
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.name())
            .field("config", &self.config)
            .finish()
    }
}

#[cfg(test)]
mod tests;
