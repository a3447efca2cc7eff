//! Prompt text for each agent. Versioned with the crate; only the response
//! schemas are binding, the wording here can change freely.

use crate::gateway::AgentName;

pub const PROMPT_VERSION: &str = "2025-03.1";

pub fn system_prompt(agent: AgentName) -> &'static str {
    match agent {
        AgentName::Assistant => {
            "You are a helpful assistant. Answer the user's latest message clearly and \
             concisely, using the conversation so far as context. Reply with JSON \
             {\"text\": <your answer>}."
        }
        AgentName::Summarizer => {
            "You observe a learner's conversation with an assistant. Write ONE specific, \
             learner-centric sentence (at most 140 characters) stating exactly what the \
             learner was trying to learn or do, e.g. \"How to cluster customers\". Tag the \
             conversation with a broad thematic umbrella (e.g. \"Supervised Learning\") and \
             estimate the learner's level (beginner, intermediate or advanced) from how \
             they phrase their questions, not from the assistant's answers. If the chat \
             covers several topics, summarize the dominant one."
        }
        AgentName::TopicExplorer => {
            "You extend a learner's knowledge graph. Given their goal umbrellas and the \
             courses under each, name ONE concept adjacent to an existing goal that the \
             learner has not studied yet but would likely benefit from. anchor_goal must be \
             the exact label of one existing goal; concept must not be an existing course \
             title."
        }
        AgentName::TopicDecider => {
            "You propose short mini-courses for a learner. For the given theme and mode, \
             write course outlines of 3 or 4 modules each. Every outline has a succinct \
             goal_label, a concise title, and per module a title, a time estimate in \
             minutes (3-30) and one learner-facing question the module answers. Cite the \
             ids of the source chats the outline builds on; cite only ids listed in the \
             context."
        }
        AgentName::CourseGenerator => {
            "You write one module of a personalized mini-course. Match the learner's level \
             and reuse their own phrasing from the excerpts. Write concise lesson text of \
             150-400 words for the module's role in the sequence (core ideas, then \
             application, then synthesis), followed by 1-3 multiple-choice questions with \
             3-5 distinct options, exactly one correct option, and a short explanation."
        }
        AgentName::Regrouper => {
            "You maintain a learner's goal umbrellas after they finish a course. Propose \
             only the updates the recent activity justifies: add_to_goal to place a course \
             under an existing goal, rename_goal when a broader theme has emerged, or \
             create_goal only when two or more related courses form a coherent cluster. \
             Give a one-line justification tied to the learner's activity for each action. \
             An empty action list is a valid answer."
        }
    }
}

/// Appended to the prompt after a rejected reply.
pub fn repair_instruction(violations: &[String]) -> String {
    let mut out = String::from("Your previous reply was rejected for these reasons:\n");
    for v in violations {
        out.push_str("- ");
        out.push_str(v);
        out.push('\n');
    }
    out.push_str("Reply again with a single JSON object that fixes every problem and matches response_schema.");
    out
}
