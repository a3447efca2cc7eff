use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::{AgentName, GatewayError};

/// A registered response contract: a JSON Schema document.
#[derive(Debug, Clone)]
pub struct SchemaDefinition {
    pub json: Value,
}

impl SchemaDefinition {
    pub fn new(json: Value) -> Self {
        Self { json }
    }
}

pub(crate) struct CompiledSchema {
    json: Value,
    validator: jsonschema::Validator,
}

impl CompiledSchema {
    pub(crate) fn json_text(&self) -> String {
        serde_json::to_string(&self.json).expect("schema serializes")
    }

    /// Raw text → typed value, or the list of reasons it was rejected.
    pub(crate) fn parse<T: DeserializeOwned>(&self, raw: &str) -> Result<T, Vec<String>> {
        let body = extract_json(raw);
        let value: Value = serde_json::from_str(body)
            .map_err(|e| vec![format!("response is not valid JSON: {e}")])?;
        let errors: Vec<String> = self
            .validator
            .iter_errors(&value)
            .map(|e| {
                let path = e.instance_path().to_string();
                if path.is_empty() {
                    e.to_string()
                } else {
                    format!("{path}: {e}")
                }
            })
            .collect();
        if !errors.is_empty() {
            return Err(errors);
        }
        serde_json::from_value(value)
            .map_err(|e| vec![format!("response does not match contract: {e}")])
    }
}

/// Strips markdown fences and surrounding prose from a JSON reply.
fn extract_json(raw: &str) -> &str {
    let trimmed = raw.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(end) = rest.rfind("```") {
            return rest[..end].trim();
        }
    }
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return trimmed;
    }
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(start), Some(end)) if start < end => &trimmed[start..=end],
        _ => trimmed,
    }
}

#[derive(Default, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, Arc<CompiledSchema>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, definition: SchemaDefinition) -> Result<(), GatewayError> {
        if self.schemas.contains_key(id) {
            return Err(GatewayError::DuplicateSchema(id.to_string()));
        }
        let validator = jsonschema::validator_for(&definition.json).map_err(|e| {
            GatewayError::InvalidSchema {
                id: id.to_string(),
                reason: e.to_string(),
            }
        })?;
        self.schemas.insert(
            id.to_string(),
            Arc::new(CompiledSchema {
                json: definition.json,
                validator,
            }),
        );
        Ok(())
    }

    pub fn with_agent_contracts() -> Self {
        let mut registry = Self::new();
        for agent in AgentName::ALL {
            registry
                .register(
                    agent.schema_id(),
                    SchemaDefinition::new(agent_contract(agent)),
                )
                .expect("built-in contracts are valid and distinct");
        }
        registry
    }

    pub fn contains(&self, id: &str) -> bool {
        self.schemas.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.keys().map(String::as_str)
    }

    pub(crate) fn get(&self, id: &str) -> Option<Arc<CompiledSchema>> {
        self.schemas.get(id).cloned()
    }
}

impl std::fmt::Debug for SchemaRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.schemas.keys()).finish()
    }
}

fn nonempty() -> Value {
    json!({"type": "string", "minLength": 1, "pattern": "\\S"})
}

/// The structural contract for each agent's reply. Domain rules (module
/// counts, quiz validity, label collisions) are enforced by the agents.
pub fn agent_contract(agent: AgentName) -> Value {
    match agent {
        AgentName::Assistant => json!({
            "type": "object",
            "required": ["text"],
            "additionalProperties": false,
            "properties": {"text": nonempty()}
        }),
        AgentName::Summarizer => json!({
            "type": "object",
            "required": ["statement", "umbrella", "difficulty"],
            "additionalProperties": false,
            "properties": {
                "statement": nonempty(),
                "umbrella": nonempty(),
                "difficulty": {"enum": ["beginner", "intermediate", "advanced"]}
            }
        }),
        AgentName::TopicExplorer => json!({
            "type": "object",
            "required": ["anchor_goal", "concept"],
            "additionalProperties": false,
            "properties": {
                "anchor_goal": nonempty(),
                "concept": nonempty(),
                "rationale": {"type": "string"}
            }
        }),
        AgentName::TopicDecider => json!({
            "type": "object",
            "required": ["proposals"],
            "additionalProperties": false,
            "properties": {
                "proposals": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["title", "goal_label", "mode", "modules", "source_chat_ids"],
                        "additionalProperties": false,
                        "properties": {
                            "title": nonempty(),
                            "goal_label": nonempty(),
                            "mode": {"enum": ["strengthen", "explore"]},
                            "modules": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "required": ["title", "time_estimate_minutes", "learner_question"],
                                    "additionalProperties": false,
                                    "properties": {
                                        "title": nonempty(),
                                        "time_estimate_minutes": {"type": "integer"},
                                        "learner_question": nonempty()
                                    }
                                }
                            },
                            "source_chat_ids": {"type": "array", "items": {"type": "string"}}
                        }
                    }
                }
            }
        }),
        AgentName::CourseGenerator => json!({
            "type": "object",
            "required": ["lesson_text", "quiz"],
            "additionalProperties": false,
            "properties": {
                "lesson_text": nonempty(),
                "quiz": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["stem", "options", "correct_index", "explanation"],
                        "additionalProperties": false,
                        "properties": {
                            "stem": {"type": "string"},
                            "options": {"type": "array", "items": {"type": "string"}},
                            "correct_index": {"type": "integer"},
                            "explanation": {"type": "string"}
                        }
                    }
                }
            }
        }),
        AgentName::Regrouper => json!({
            "type": "object",
            "required": ["actions"],
            "additionalProperties": false,
            "properties": {
                "actions": {
                    "type": "array",
                    "items": {
                        "oneOf": [
                            {
                                "type": "object",
                                "required": ["kind", "course_id", "goal_id", "justification"],
                                "additionalProperties": false,
                                "properties": {
                                    "kind": {"const": "add_to_goal"},
                                    "course_id": nonempty(),
                                    "goal_id": nonempty(),
                                    "justification": {"type": "string"}
                                }
                            },
                            {
                                "type": "object",
                                "required": ["kind", "goal_id", "new_label", "justification"],
                                "additionalProperties": false,
                                "properties": {
                                    "kind": {"const": "rename_goal"},
                                    "goal_id": nonempty(),
                                    "new_label": {"type": "string"},
                                    "justification": {"type": "string"}
                                }
                            },
                            {
                                "type": "object",
                                "required": ["kind", "label", "member_course_ids", "justification"],
                                "additionalProperties": false,
                                "properties": {
                                    "kind": {"const": "create_goal"},
                                    "label": {"type": "string"},
                                    "member_course_ids": {"type": "array", "items": {"type": "string"}},
                                    "justification": {"type": "string"}
                                }
                            }
                        ]
                    }
                }
            }
        }),
    }
}
