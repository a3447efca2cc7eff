use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    AgentName, Provider, ProviderError, ProviderErrorKind, ProviderReply, ProviderRequest,
    SyntheticResponder, SUBJECT_SECTION,
};

/// One scripted provider reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    /// Serialized as compact JSON text.
    Json(Value),
    /// Returned verbatim (use for malformed output).
    Text(String),
    Fail(ProviderErrorKind),
    Delay {
        ms: u64,
        then: Box<MockReply>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub agent: AgentName,
    /// Matched against the request's `subject` section; `*` matches any.
    pub key: String,
    pub replies: Vec<MockReply>,
}

/// File format for scripted mock runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    /// Answer unscripted requests with the synthetic responder instead of
    /// failing.
    #[serde(default)]
    pub synthetic_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub agent: AgentName,
    pub key: String,
    pub attempt: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Default)]
struct MockState {
    scripts: HashMap<(AgentName, String), (Vec<MockReply>, usize)>,
    calls: Vec<MockCall>,
    down: bool,
}

/// Table-driven provider: `(agent, subject key)` → reply sequence. Each
/// call consumes the next reply; the last one repeats once the sequence
/// runs out.
#[derive(Debug, Default)]
pub struct MockProvider {
    state: Mutex<MockState>,
    fallback: Option<SyntheticResponder>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unscripted requests get deterministic synthetic replies.
    pub fn synthetic() -> Self {
        Self {
            state: Mutex::default(),
            fallback: Some(SyntheticResponder),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        let mock = if script.synthetic_fallback {
            Self::synthetic()
        } else {
            Self::new()
        };
        for entry in script.entries {
            mock.script(entry.agent, &entry.key, entry.replies);
        }
        mock
    }

    /// Replaces the sequence for `(agent, key)`.
    pub fn script(&self, agent: AgentName, key: &str, replies: Vec<MockReply>) -> &Self {
        self.state
            .lock()
            .unwrap()
            .scripts
            .insert((agent, key.to_string()), (replies, 0));
        self
    }

    pub fn reply_json(&self, agent: AgentName, key: &str, value: Value) -> &Self {
        self.script(agent, key, vec![MockReply::Json(value)])
    }

    /// While down, every call fails with a non-retriable network error.
    pub fn set_down(&self, down: bool) {
        self.state.lock().unwrap().down = down;
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.state.lock().unwrap().calls.clone()
    }

    pub fn call_count(&self, agent: AgentName) -> usize {
        self.state
            .lock()
            .unwrap()
            .calls
            .iter()
            .filter(|c| c.agent == agent)
            .count()
    }

    pub fn calls_for(&self, agent: AgentName, key: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .calls
            .iter()
            .filter(|c| c.agent == agent && c.key == key)
            .count()
    }

    pub fn reset_calls(&self) {
        self.state.lock().unwrap().calls.clear();
    }

    fn next_reply(&self, request: &ProviderRequest) -> Result<Option<MockReply>, ProviderError> {
        let key = request
            .get_section(SUBJECT_SECTION)
            .unwrap_or("")
            .to_string();
        let mut state = self.state.lock().unwrap();
        state.calls.push(MockCall {
            agent: request.agent,
            key: key.clone(),
            attempt: request.attempt,
            seed: request.seed,
        });
        if state.down {
            return Err(ProviderError::new(
                ProviderErrorKind::Network,
                "mock provider is down",
            ));
        }
        let slot = if state.scripts.contains_key(&(request.agent, key.clone())) {
            Some((request.agent, key))
        } else if state
            .scripts
            .contains_key(&(request.agent, "*".to_string()))
        {
            Some((request.agent, "*".to_string()))
        } else {
            None
        };
        Ok(slot.and_then(|slot| {
            let (replies, cursor) = state.scripts.get_mut(&slot)?;
            let reply = replies
                .get((*cursor).min(replies.len().checked_sub(1)?))?
                .clone();
            *cursor += 1;
            Some(reply)
        }))
    }
}

fn resolve(reply: MockReply) -> Result<ProviderReply, ProviderError> {
    match reply {
        MockReply::Json(v) => Ok(ProviderReply::text(
            serde_json::to_string(&v).expect("json serializes"),
        )),
        MockReply::Text(t) => Ok(ProviderReply::text(t)),
        MockReply::Fail(kind) => Err(ProviderError::new(kind, "scripted failure")),
        MockReply::Delay { ms, then } => {
            std::thread::sleep(Duration::from_millis(ms));
            resolve(*then)
        }
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
        match self.next_reply(request)? {
            Some(reply) => resolve(reply),
            None => match &self.fallback {
                Some(responder) => responder.respond(request),
                None => Err(ProviderError::new(
                    ProviderErrorKind::Fatal,
                    format!(
                        "no mock script for agent {} key {:?}",
                        request.agent,
                        request.get_section(SUBJECT_SECTION).unwrap_or("")
                    ),
                )),
            },
        }
    }
}
