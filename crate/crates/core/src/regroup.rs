//! After a course is completed, asks the regrouping agent for goal-umbrella
//! updates and keeps only the ones the graph accepts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::IdSource;
use crate::course::CourseId;
use crate::gateway::{AgentName, AgentRequest, Gateway, GatewayError};
use crate::graph::{
    ActionViolation, AppliedAction, GoalId, GraphError, LearnerGraph, ModuleStatus, RegroupAction,
};
use crate::summarizer::ChatSummary;
use crate::text::labels_equal;

/// How many recent summaries the agent sees.
pub const RECENT_SUMMARY_LIMIT: usize = 10;

/// An action as the agent wrote it. References may be ids, labels or titles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateAction {
    AddToGoal {
        course_id: String,
        goal_id: String,
        justification: String,
    },
    RenameGoal {
        goal_id: String,
        new_label: String,
        justification: String,
    },
    CreateGoal {
        label: String,
        member_course_ids: Vec<String>,
        justification: String,
    },
}

#[derive(Debug, Deserialize)]
struct RegroupReply {
    actions: Vec<CandidateAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedAction {
    pub index: usize,
    pub action: CandidateAction,
    pub reason: ActionViolation,
}

/// Validated survivors, ready to apply in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegroupPlan {
    pub survivors: Vec<RegroupAction>,
    pub dropped: Vec<DroppedAction>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegroupOutcome {
    pub applied: Vec<AppliedAction>,
    pub dropped: Vec<DroppedAction>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegroupError {
    #[error("course {0} is not completed")]
    NotCompleted(CourseId),
    #[error("unknown course {0}")]
    UnknownCourse(CourseId),
    #[error("regrouping agent failed: {0}")]
    AgentFailure(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Serialize)]
struct RegroupContext<'a> {
    completed_course: ContextCourse<'a>,
    goals: Vec<ContextGoal<'a>>,
    ungrouped_courses: Vec<ContextCourse<'a>>,
    recent_summaries: Vec<ContextSummary<'a>>,
}

#[derive(Debug, Serialize)]
struct ContextGoal<'a> {
    goal_id: &'a str,
    label: &'a str,
    courses: Vec<ContextCourse<'a>>,
}

#[derive(Debug, Serialize)]
struct ContextCourse<'a> {
    course_id: &'a str,
    title: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    completed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Serialize)]
struct ContextSummary<'a> {
    statement: &'a str,
    umbrella: &'a str,
}

/// When the course became completed: the latest completion among its modules.
fn completed_at(graph: &LearnerGraph, course_id: &CourseId) -> Option<DateTime<Utc>> {
    let course = graph.course(course_id)?;
    if !course.completed {
        return None;
    }
    course
        .module_progress
        .iter()
        .filter(|m| m.status == ModuleStatus::Completed)
        .map(|m| m.updated_at)
        .max()
}

fn most_recent(summaries: &[ChatSummary]) -> Vec<&ChatSummary> {
    let mut sorted: Vec<&ChatSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| {
        b.created_at
            .cmp(&a.created_at)
            .then(a.conversation_id.cmp(&b.conversation_id))
    });
    sorted.truncate(RECENT_SUMMARY_LIMIT);
    sorted
}

fn course_title<'a>(titles: &'a BTreeMap<CourseId, String>, id: &'a CourseId) -> &'a str {
    titles.get(id).map_or(id.as_str(), String::as_str)
}

fn context_course<'a>(
    graph: &LearnerGraph,
    titles: &'a BTreeMap<CourseId, String>,
    id: &'a CourseId,
) -> ContextCourse<'a> {
    ContextCourse {
        course_id: id.as_str(),
        title: course_title(titles, id),
        completed_at: completed_at(graph, id),
    }
}

pub fn regroup_request<'a>(
    graph: &'a LearnerGraph,
    trigger: &'a CourseId,
    titles: &'a BTreeMap<CourseId, String>,
    summaries: &'a [ChatSummary],
) -> AgentRequest {
    let course = |id: &'a CourseId| context_course(graph, titles, id);
    let context = RegroupContext {
        completed_course: course(trigger),
        goals: graph
            .goals()
            .map(|g| ContextGoal {
                goal_id: g.id.as_str(),
                label: &g.label,
                courses: g.course_ids.iter().map(course).collect(),
            })
            .collect(),
        ungrouped_courses: graph
            .courses()
            .filter(|c| c.goal_id.is_none())
            .map(|c| course(&c.course_id))
            .collect(),
        recent_summaries: most_recent(summaries)
            .into_iter()
            .map(|s| ContextSummary {
                statement: &s.statement,
                umbrella: &s.umbrella,
            })
            .collect(),
    };
    AgentRequest::new(AgentName::Regrouper)
        .subject(course_title(titles, trigger))
        .context(&context)
}

fn resolve_course(
    graph: &LearnerGraph,
    titles: &BTreeMap<CourseId, String>,
    reference: &str,
) -> Result<CourseId, ActionViolation> {
    let id = CourseId::from(reference.trim());
    if graph.course(&id).is_some() {
        return Ok(id);
    }
    titles
        .iter()
        .find(|(id, title)| labels_equal(title, reference) && graph.course(id).is_some())
        .map(|(id, _)| id.clone())
        .ok_or(ActionViolation::UnknownCourse { course_id: id })
}

fn resolve_goal(graph: &LearnerGraph, reference: &str) -> Result<GoalId, ActionViolation> {
    let id = GoalId::from(reference.trim());
    if graph.goal(&id).is_some() {
        return Ok(id);
    }
    graph
        .goal_by_label(reference)
        .map(|g| g.id.clone())
        .ok_or(ActionViolation::UnknownGoal { goal_id: id })
}

fn resolve(
    graph: &LearnerGraph,
    titles: &BTreeMap<CourseId, String>,
    candidate: &CandidateAction,
) -> Result<RegroupAction, ActionViolation> {
    Ok(match candidate {
        CandidateAction::AddToGoal {
            course_id,
            goal_id,
            justification,
        } => RegroupAction::AddToGoal {
            course_id: resolve_course(graph, titles, course_id)?,
            goal_id: resolve_goal(graph, goal_id)?,
            justification: justification.trim().to_string(),
        },
        CandidateAction::RenameGoal {
            goal_id,
            new_label,
            justification,
        } => RegroupAction::RenameGoal {
            goal_id: resolve_goal(graph, goal_id)?,
            new_label: new_label.trim().to_string(),
            justification: justification.trim().to_string(),
        },
        CandidateAction::CreateGoal {
            label,
            member_course_ids,
            justification,
        } => RegroupAction::CreateGoal {
            label: label.trim().to_string(),
            member_course_ids: member_course_ids
                .iter()
                .map(|c| resolve_course(graph, titles, c))
                .collect::<Result<_, _>>()?,
            justification: justification.trim().to_string(),
        },
    })
}

/// Validates candidates one by one against a scratch graph that already
/// holds the earlier survivors. Invalid ones are dropped with a reason.
pub fn filter_candidates(
    graph: &LearnerGraph,
    titles: &BTreeMap<CourseId, String>,
    candidates: &[CandidateAction],
    ids: &IdSource,
    at: DateTime<Utc>,
) -> RegroupPlan {
    let mut scratch = graph.clone();
    let scratch_ids = ids.fork();
    let mut renamed = BTreeSet::new();
    let mut plan = RegroupPlan::default();
    for (index, candidate) in candidates.iter().enumerate() {
        let checked = resolve(&scratch, titles, candidate).and_then(|action| {
            if let RegroupAction::RenameGoal { goal_id, .. } = &action {
                if renamed.contains(goal_id) {
                    return Err(ActionViolation::RenameChurn {
                        goal_id: goal_id.clone(),
                    });
                }
            }
            scratch.validate_action(&action)?;
            Ok(action)
        });
        match checked {
            Ok(action) => {
                scratch
                    .apply_regroup_actions(std::slice::from_ref(&action), &scratch_ids, at)
                    .expect("validated action applies");
                if let RegroupAction::RenameGoal { goal_id, .. } = &action {
                    renamed.insert(goal_id.clone());
                }
                plan.survivors.push(action);
            }
            Err(reason) => {
                tracing::info!(index, %reason, "dropping regroup candidate");
                plan.dropped.push(DroppedAction {
                    index,
                    action: candidate.clone(),
                    reason,
                });
            }
        }
    }
    plan
}

/// Calls the regrouping agent for a completed course and returns the
/// validated plan. Nothing is applied.
pub fn plan_regroup(
    gateway: &Gateway,
    graph: &LearnerGraph,
    trigger: &CourseId,
    titles: &BTreeMap<CourseId, String>,
    recent_summaries: &[ChatSummary],
    ids: &IdSource,
    at: DateTime<Utc>,
) -> Result<RegroupPlan, RegroupError> {
    let course = graph
        .course(trigger)
        .ok_or_else(|| RegroupError::UnknownCourse(trigger.clone()))?;
    if !course.completed {
        return Err(RegroupError::NotCompleted(trigger.clone()));
    }
    let request = regroup_request(graph, trigger, titles, recent_summaries);
    let reply = gateway.call::<RegroupReply>(&request, None)?.parsed;
    Ok(filter_candidates(graph, titles, &reply.actions, ids, at))
}

/// Plans and applies a regroup for `trigger` in one step.
pub fn on_course_completed(
    gateway: &Gateway,
    graph: &mut LearnerGraph,
    trigger: &CourseId,
    titles: &BTreeMap<CourseId, String>,
    recent_summaries: &[ChatSummary],
    ids: &IdSource,
    at: DateTime<Utc>,
) -> Result<RegroupOutcome, RegroupError> {
    let plan = plan_regroup(gateway, graph, trigger, titles, recent_summaries, ids, at)?;
    let applied = graph.apply_regroup_for(trigger, &plan.survivors, ids, at)?;
    Ok(RegroupOutcome {
        applied,
        dropped: plan.dropped,
    })
}
