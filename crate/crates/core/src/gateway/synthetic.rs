//! Deterministic stand-in replies derived from a request's context section.
//! Lets the full pipeline run offline without a hand-written script.

use serde_json::{json, Value};

use super::{
    AgentName, ProviderError, ProviderErrorKind, ProviderReply, ProviderRequest, CONTEXT_SECTION,
};
use crate::text::char_prefix;

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResponder;

fn str_at<'a>(v: &'a Value, pointer: &str) -> &'a str {
    v.pointer(pointer).and_then(Value::as_str).unwrap_or("")
}

fn or_default<'a>(s: &'a str, fallback: &'a str) -> &'a str {
    if s.trim().is_empty() {
        fallback
    } else {
        s
    }
}

fn first_user_text(transcript: &Value) -> &str {
    transcript
        .as_array()
        .and_then(|turns| turns.iter().find(|t| t["role"] == "user"))
        .map(|t| str_at(t, "/text"))
        .unwrap_or("")
}

fn one_sentence(text: &str, max_chars: usize) -> String {
    let first = text
        .split(['.', '?', '!', '\n'])
        .map(str::trim)
        .find(|s| !s.is_empty())
        .unwrap_or("General question");
    char_prefix(first, max_chars).to_string()
}

fn title_case(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn lesson_text(title: &str, role: &str, difficulty: &str) -> String {
    let sentences = [
        format!("This {role} module on {title} is written for a {difficulty} learner."),
        "It starts from the questions you asked and restates them in plain terms.".to_string(),
        format!("Each idea in {title} is introduced with a short definition and a worked example."),
        "The example reuses your own data and wording wherever the excerpts allow it.".to_string(),
        "After the example we compare two common ways to approach the same problem.".to_string(),
        "We then list the assumptions each approach makes and when those assumptions break."
            .to_string(),
        "A short checklist summarizes the steps you would follow in practice.".to_string(),
        "Finally the module points to what the next module builds on.".to_string(),
    ];
    let mut words: Vec<String> = Vec::new();
    let mut i = 0;
    while words.len() < 170 {
        words.extend(
            sentences[i % sentences.len()]
                .split_whitespace()
                .map(str::to_string),
        );
        i += 1;
    }
    words.join(" ")
}

impl SyntheticResponder {
    pub fn respond(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
        let context: Value = request
            .get_section(CONTEXT_SECTION)
            .and_then(|c| serde_json::from_str(c).ok())
            .unwrap_or(Value::Null);
        let reply = match request.agent {
            AgentName::Assistant => {
                let last = context
                    .as_array()
                    .and_then(|turns| turns.iter().rev().find(|t| t["role"] == "user"))
                    .map(|t| str_at(t, "/text"))
                    .unwrap_or("");
                json!({"text": format!("Here is a short answer about: {}", one_sentence(last, 200))})
            }
            AgentName::Summarizer => {
                let title = request.get_section("title").unwrap_or("").trim();
                let umbrella = if title.is_empty() {
                    "General".to_string()
                } else {
                    title_case(title)
                };
                json!({
                    "statement": one_sentence(first_user_text(&context), 120),
                    "umbrella": umbrella,
                    "difficulty": "intermediate"
                })
            }
            AgentName::TopicExplorer => {
                let anchor = or_default(str_at(&context, "/goals/0/label"), "General");
                json!({
                    "anchor_goal": anchor,
                    "concept": format!("Next Steps in {anchor}"),
                    "rationale": "extends an existing goal"
                })
            }
            AgentName::TopicDecider => {
                let selection = &context["selection"];
                let (title, goal_label, sources) = match str_at(selection, "/mode") {
                    "explore" => (
                        format!(
                            "Introduction to {}",
                            or_default(str_at(selection, "/concept"), "New Ideas")
                        ),
                        or_default(str_at(selection, "/anchor_goal"), "General").to_string(),
                        json!([]),
                    ),
                    _ => {
                        let theme = or_default(str_at(selection, "/theme"), "General");
                        (
                            format!("Foundations of {theme}"),
                            theme.to_string(),
                            if selection["source_chat_ids"].is_array() {
                                selection["source_chat_ids"].clone()
                            } else {
                                json!([])
                            },
                        )
                    }
                };
                let modules: Vec<Value> = [
                    "Core ideas",
                    "Putting it to work",
                    "Bringing it together",
                ]
                .iter()
                .enumerate()
                .map(|(i, part)| {
                    json!({
                        "title": format!("{part}: {title}"),
                        "time_estimate_minutes": 8 + 2 * i,
                        "learner_question": format!("What should I know about {part} in {title}?")
                    })
                })
                .collect();
                json!({"proposals": [{
                    "title": title,
                    "goal_label": goal_label,
                    "mode": if str_at(selection, "/mode") == "explore" { "explore" } else { "strengthen" },
                    "modules": modules,
                    "source_chat_ids": sources
                }]})
            }
            AgentName::CourseGenerator => {
                let title = or_default(str_at(&context, "/module/title"), "this module");
                json!({
                    "lesson_text": lesson_text(
                        title,
                        or_default(str_at(&context, "/role"), "core"),
                        or_default(str_at(&context, "/difficulty"), "intermediate"),
                    ),
                    "quiz": [{
                        "stem": format!("Which statement best describes the goal of '{title}'?"),
                        "options": [
                            format!("It explains {title} and when to apply it"),
                            "It is unrelated to the course".to_string(),
                            "It only lists terminology without examples".to_string()
                        ],
                        "correct_index": 0,
                        "explanation": "The module introduces the idea and shows when to use it."
                    }]
                })
            }
            AgentName::Regrouper => {
                let course = &context["completed_course"];
                let course_id = str_at(course, "/course_id");
                let ungrouped = context["ungrouped_courses"]
                    .as_array()
                    .is_some_and(|cs| cs.iter().any(|c| c["course_id"] == course_id));
                let title = str_at(course, "/title").to_lowercase();
                let goals = context["goals"].as_array().cloned().unwrap_or_default();
                let target = goals
                    .iter()
                    .find(|g| {
                        str_at(g, "/label")
                            .to_lowercase()
                            .split_whitespace()
                            .any(|w| title.contains(w))
                    })
                    .or(goals.first());
                match target {
                    Some(goal) if ungrouped => json!({"actions": [{
                        "kind": "add_to_goal",
                        "course_id": course_id,
                        "goal_id": str_at(goal, "/goal_id"),
                        "justification": "the learner just completed this course"
                    }]}),
                    _ => json!({"actions": []}),
                }
            }
        };
        serde_json::to_string(&reply)
            .map(ProviderReply::text)
            .map_err(|e| ProviderError::new(ProviderErrorKind::Fatal, e.to_string()))
    }
}
