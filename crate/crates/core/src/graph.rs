//! The learner memory graph: goal umbrellas → courses → module progress.
//!
//! Every mutation is an event in `event_log`, and state is only ever changed
//! by applying an event, so replaying the log from empty reproduces the graph
//! exactly.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::{string_id, IdSource};
use crate::course::CourseId;
use crate::storage::SCHEMA_VERSION;
use crate::text::{labels_equal, normalize_label};

string_id!(
    /// Identifier of a goal umbrella.
    GoalId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleStatus {
    NotStarted,
    Completed,
    SelfReportedKnown,
    MarkedIrrelevant,
}

impl ModuleStatus {
    pub fn is_terminal(self) -> bool {
        self != ModuleStatus::NotStarted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfReportKind {
    Known,
    Irrelevant,
}

impl SelfReportKind {
    fn status(self) -> ModuleStatus {
        match self {
            SelfReportKind::Known => ModuleStatus::SelfReportedKnown,
            SelfReportKind::Irrelevant => ModuleStatus::MarkedIrrelevant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleProgress {
    pub module_index: usize,
    pub status: ModuleStatus,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quiz_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelChange {
    pub label: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: GoalId,
    pub label: String,
    pub course_ids: BTreeSet<CourseId>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renamed_at: Option<DateTime<Utc>>,
    pub label_history: Vec<LabelChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseNode {
    pub course_id: CourseId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_id: Option<GoalId>,
    pub module_progress: Vec<ModuleProgress>,
    pub completed: bool,
}

/// Completed iff every module is terminal and at least one was actually
/// completed (self-reports alone are not mastery evidence).
pub fn is_completed(progress: &[ModuleProgress]) -> bool {
    !progress.is_empty()
        && progress.iter().all(|m| m.status.is_terminal())
        && progress.iter().any(|m| m.status == ModuleStatus::Completed)
}

/// Share of modules that are no longer `not_started`.
pub fn progress_fraction(progress: &[ModuleProgress]) -> f64 {
    if progress.is_empty() {
        return 0.0;
    }
    let done = progress.iter().filter(|m| m.status.is_terminal()).count();
    done as f64 / progress.len() as f64
}

/// A structured update proposed by the regrouping stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegroupAction {
    /// Places a course under a goal; an already-grouped course is moved.
    AddToGoal {
        course_id: CourseId,
        goal_id: GoalId,
        justification: String,
    },
    RenameGoal {
        goal_id: GoalId,
        new_label: String,
        justification: String,
    },
    CreateGoal {
        label: String,
        member_course_ids: Vec<CourseId>,
        justification: String,
    },
}

impl RegroupAction {
    pub fn justification(&self) -> &str {
        match self {
            RegroupAction::AddToGoal { justification, .. }
            | RegroupAction::RenameGoal { justification, .. }
            | RegroupAction::CreateGoal { justification, .. } => justification,
        }
    }
}

/// Why a regroup action cannot be applied to a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionViolation {
    #[error("unknown course {course_id}")]
    UnknownCourse { course_id: CourseId },
    #[error("unknown goal {goal_id}")]
    UnknownGoal { goal_id: GoalId },
    #[error("justification is empty")]
    EmptyJustification,
    #[error("goal label is empty")]
    EmptyLabel,
    #[error("course {course_id} is already under goal {goal_id}")]
    AlreadyMember {
        course_id: CourseId,
        goal_id: GoalId,
    },
    #[error("new label equals the current label")]
    SameLabel,
    #[error("label '{label}' collides with goal {existing}")]
    LabelCollision { label: String, existing: GoalId },
    #[error("a new goal needs at least 2 member courses, got {count}")]
    TooFewMembers { count: usize },
    #[error("course {course_id} is listed twice")]
    DuplicateMember { course_id: CourseId },
    #[error("goal {goal_id} was already renamed in this update")]
    RenameChurn { goal_id: GoalId },
}

/// Outcome of a successful [`LearnerGraph::validate_action`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActionCheck {
    /// Courses that would leave their current goal.
    pub moves: Vec<(CourseId, GoalId)>,
}

impl ActionCheck {
    pub fn is_move(&self) -> bool {
        !self.moves.is_empty()
    }
}

/// An applied regroup action with the identifiers it resolved to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppliedAction {
    AddedToGoal {
        course_id: CourseId,
        goal_id: GoalId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        moved_from: Option<GoalId>,
        justification: String,
    },
    RenamedGoal {
        goal_id: GoalId,
        from: String,
        to: String,
        justification: String,
    },
    CreatedGoal {
        goal_id: GoalId,
        label: String,
        member_course_ids: Vec<CourseId>,
        justification: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphChange {
    /// A goal carried over from prior learner state.
    GoalSeeded { goal_id: GoalId, label: String },
    CourseRegistered {
        course_id: CourseId,
        module_count: usize,
    },
    ModuleCompleted {
        course_id: CourseId,
        module_index: usize,
        quiz_score: f64,
    },
    ModuleSelfReported {
        course_id: CourseId,
        module_index: usize,
        report: SelfReportKind,
    },
    /// Explicit user undo of a self-report.
    ModuleUnmarked {
        course_id: CourseId,
        module_index: usize,
    },
    Regrouped {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trigger: Option<CourseId>,
        actions: Vec<AppliedAction>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub change: GraphChange,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("unknown course {0}")]
    UnknownCourse(CourseId),
    #[error("unknown goal {0}")]
    UnknownGoal(GoalId),
    #[error("module index {index} out of range for a {count}-module course")]
    ModuleIndexOutOfRange { index: usize, count: usize },
    #[error("illegal transition from {from:?} to {to:?}")]
    IllegalTransition {
        from: ModuleStatus,
        to: ModuleStatus,
    },
    #[error("course {0} is already registered")]
    DuplicateCourse(CourseId),
    #[error("a course needs 3 or 4 modules, got {0}")]
    InvalidModuleCount(usize),
    #[error("goal label '{0}' is already in use")]
    DuplicateGoalLabel(String),
    #[error("quiz score {0} is outside [0, 1]")]
    InvalidScore(f64),
    #[error("action {index} is invalid: {reason}")]
    InvalidAction {
        index: usize,
        reason: ActionViolation,
    },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerGraph {
    goals: BTreeMap<GoalId, Goal>,
    courses: BTreeMap<CourseId, CourseNode>,
    event_log: Vec<GraphEvent>,
    /// Courses whose completion has not yet been followed by a regroup.
    #[serde(skip)]
    awaiting_regroup: BTreeSet<CourseId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotDocument {
    schema_version: u32,
    goals: Vec<Goal>,
    courses: Vec<CourseNode>,
    event_log: Vec<GraphEvent>,
}

impl LearnerGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn goals(&self) -> impl Iterator<Item = &Goal> {
        self.goals.values()
    }

    pub fn courses(&self) -> impl Iterator<Item = &CourseNode> {
        self.courses.values()
    }

    pub fn goal(&self, id: &GoalId) -> Option<&Goal> {
        self.goals.get(id)
    }

    pub fn course(&self, id: &CourseId) -> Option<&CourseNode> {
        self.courses.get(id)
    }

    pub fn event_log(&self) -> &[GraphEvent] {
        &self.event_log
    }

    pub fn goal_by_label(&self, label: &str) -> Option<&Goal> {
        self.goals.values().find(|g| labels_equal(&g.label, label))
    }

    pub fn awaiting_regroup(&self) -> &BTreeSet<CourseId> {
        &self.awaiting_regroup
    }

    pub fn replay(events: &[GraphEvent]) -> Result<Self, GraphError> {
        let mut graph = Self::new();
        for event in events {
            graph.apply(event.clone())?;
        }
        Ok(graph)
    }

    // ── mutations ────────────────────────────────────────────────────────

    pub fn seed_goal(
        &mut self,
        label: &str,
        ids: &IdSource,
        at: DateTime<Utc>,
    ) -> Result<GoalId, GraphError> {
        let goal_id = GoalId(ids.next());
        self.commit(
            GraphChange::GoalSeeded {
                goal_id: goal_id.clone(),
                label: label.trim().to_string(),
            },
            at,
        )?;
        Ok(goal_id)
    }

    pub fn register_course(
        &mut self,
        course_id: CourseId,
        module_count: usize,
        at: DateTime<Utc>,
    ) -> Result<(), GraphError> {
        self.commit(
            GraphChange::CourseRegistered {
                course_id,
                module_count,
            },
            at,
        )
    }

    /// Records a finished module. Retakes keep the best score.
    pub fn record_module_completion(
        &mut self,
        course_id: &CourseId,
        module_index: usize,
        quiz_score: f64,
        at: DateTime<Utc>,
    ) -> Result<(), GraphError> {
        self.commit(
            GraphChange::ModuleCompleted {
                course_id: course_id.clone(),
                module_index,
                quiz_score,
            },
            at,
        )
    }

    pub fn self_report(
        &mut self,
        course_id: &CourseId,
        module_index: usize,
        report: SelfReportKind,
        at: DateTime<Utc>,
    ) -> Result<(), GraphError> {
        self.commit(
            GraphChange::ModuleSelfReported {
                course_id: course_id.clone(),
                module_index,
                report,
            },
            at,
        )
    }

    pub fn unmark_self_report(
        &mut self,
        course_id: &CourseId,
        module_index: usize,
        at: DateTime<Utc>,
    ) -> Result<(), GraphError> {
        self.commit(
            GraphChange::ModuleUnmarked {
                course_id: course_id.clone(),
                module_index,
            },
            at,
        )
    }

    /// Applies all actions in order, or none. An empty list records a no-op
    /// marker event.
    pub fn apply_regroup_actions(
        &mut self,
        actions: &[RegroupAction],
        ids: &IdSource,
        at: DateTime<Utc>,
    ) -> Result<Vec<AppliedAction>, GraphError> {
        self.apply_regroup(None, actions, ids, at)
    }

    /// Same as [`apply_regroup_actions`](Self::apply_regroup_actions) but
    /// records the completed course that triggered the update.
    pub fn apply_regroup_for(
        &mut self,
        trigger: &CourseId,
        actions: &[RegroupAction],
        ids: &IdSource,
        at: DateTime<Utc>,
    ) -> Result<Vec<AppliedAction>, GraphError> {
        self.apply_regroup(Some(trigger.clone()), actions, ids, at)
    }

    fn apply_regroup(
        &mut self,
        trigger: Option<CourseId>,
        actions: &[RegroupAction],
        ids: &IdSource,
        at: DateTime<Utc>,
    ) -> Result<Vec<AppliedAction>, GraphError> {
        let applied = self.resolve_batch(actions, ids, at)?;
        self.commit(
            GraphChange::Regrouped {
                trigger,
                actions: applied.clone(),
            },
            at,
        )?;
        Ok(applied)
    }

    /// Validates `actions` in sequence against a scratch copy and resolves
    /// them to applied form. Nothing is changed on `self`.
    fn resolve_batch(
        &self,
        actions: &[RegroupAction],
        ids: &IdSource,
        at: DateTime<Utc>,
    ) -> Result<Vec<AppliedAction>, GraphError> {
        let mut scratch = self.clone();
        let mut renamed = BTreeSet::new();
        let mut applied = Vec::with_capacity(actions.len());
        for (index, action) in actions.iter().enumerate() {
            let invalid = |reason| GraphError::InvalidAction { index, reason };
            let check = scratch.validate_action(action).map_err(invalid)?;
            let resolved = match action {
                RegroupAction::AddToGoal {
                    course_id,
                    goal_id,
                    justification,
                } => AppliedAction::AddedToGoal {
                    course_id: course_id.clone(),
                    goal_id: goal_id.clone(),
                    moved_from: check.moves.first().map(|(_, g)| g.clone()),
                    justification: justification.clone(),
                },
                RegroupAction::RenameGoal {
                    goal_id,
                    new_label,
                    justification,
                } => {
                    if !renamed.insert(goal_id.clone()) {
                        return Err(invalid(ActionViolation::RenameChurn {
                            goal_id: goal_id.clone(),
                        }));
                    }
                    AppliedAction::RenamedGoal {
                        goal_id: goal_id.clone(),
                        from: scratch.goals[goal_id].label.clone(),
                        to: new_label.trim().to_string(),
                        justification: justification.clone(),
                    }
                }
                RegroupAction::CreateGoal {
                    label,
                    member_course_ids,
                    justification,
                } => AppliedAction::CreatedGoal {
                    goal_id: GoalId(ids.next()),
                    label: label.trim().to_string(),
                    member_course_ids: member_course_ids.clone(),
                    justification: justification.clone(),
                },
            };
            scratch.apply_action(&resolved, at);
            applied.push(resolved);
        }
        Ok(applied)
    }

    /// Checks one action against the current graph.
    pub fn validate_action(&self, action: &RegroupAction) -> Result<ActionCheck, ActionViolation> {
        if action.justification().trim().is_empty() {
            return Err(ActionViolation::EmptyJustification);
        }
        match action {
            RegroupAction::AddToGoal {
                course_id, goal_id, ..
            } => {
                let course =
                    self.courses
                        .get(course_id)
                        .ok_or_else(|| ActionViolation::UnknownCourse {
                            course_id: course_id.clone(),
                        })?;
                if !self.goals.contains_key(goal_id) {
                    return Err(ActionViolation::UnknownGoal {
                        goal_id: goal_id.clone(),
                    });
                }
                match &course.goal_id {
                    Some(current) if current == goal_id => Err(ActionViolation::AlreadyMember {
                        course_id: course_id.clone(),
                        goal_id: goal_id.clone(),
                    }),
                    Some(current) => Ok(ActionCheck {
                        moves: vec![(course_id.clone(), current.clone())],
                    }),
                    None => Ok(ActionCheck::default()),
                }
            }
            RegroupAction::RenameGoal {
                goal_id, new_label, ..
            } => {
                let goal = self
                    .goals
                    .get(goal_id)
                    .ok_or_else(|| ActionViolation::UnknownGoal {
                        goal_id: goal_id.clone(),
                    })?;
                if new_label.trim().is_empty() {
                    return Err(ActionViolation::EmptyLabel);
                }
                if new_label.trim() == goal.label {
                    return Err(ActionViolation::SameLabel);
                }
                if let Some(other) = self
                    .goals
                    .values()
                    .find(|g| g.id != *goal_id && labels_equal(&g.label, new_label))
                {
                    return Err(ActionViolation::LabelCollision {
                        label: new_label.clone(),
                        existing: other.id.clone(),
                    });
                }
                Ok(ActionCheck::default())
            }
            RegroupAction::CreateGoal {
                label,
                member_course_ids,
                ..
            } => {
                if label.trim().is_empty() {
                    return Err(ActionViolation::EmptyLabel);
                }
                if let Some(other) = self.goal_by_label(label) {
                    return Err(ActionViolation::LabelCollision {
                        label: label.clone(),
                        existing: other.id.clone(),
                    });
                }
                let mut seen = BTreeSet::new();
                let mut moves = Vec::new();
                for course_id in member_course_ids {
                    let course = self.courses.get(course_id).ok_or_else(|| {
                        ActionViolation::UnknownCourse {
                            course_id: course_id.clone(),
                        }
                    })?;
                    if !seen.insert(course_id) {
                        return Err(ActionViolation::DuplicateMember {
                            course_id: course_id.clone(),
                        });
                    }
                    if let Some(current) = &course.goal_id {
                        moves.push((course_id.clone(), current.clone()));
                    }
                }
                if seen.len() < 2 {
                    return Err(ActionViolation::TooFewMembers { count: seen.len() });
                }
                Ok(ActionCheck { moves })
            }
        }
    }

    fn commit(&mut self, change: GraphChange, at: DateTime<Utc>) -> Result<(), GraphError> {
        let event = GraphEvent {
            seq: self.event_log.len() as u64 + 1,
            at,
            change,
        };
        self.apply(event)
    }

    /// Validates and applies one event. State is untouched on error.
    fn apply(&mut self, event: GraphEvent) -> Result<(), GraphError> {
        let at = event.at;
        match &event.change {
            GraphChange::GoalSeeded { goal_id, label } => {
                if label.trim().is_empty() {
                    return Err(GraphError::DuplicateGoalLabel(label.clone()));
                }
                if self.goal_by_label(label).is_some() || self.goals.contains_key(goal_id) {
                    return Err(GraphError::DuplicateGoalLabel(label.clone()));
                }
                self.goals.insert(
                    goal_id.clone(),
                    Goal {
                        id: goal_id.clone(),
                        label: label.clone(),
                        course_ids: BTreeSet::new(),
                        created_at: at,
                        renamed_at: None,
                        label_history: vec![LabelChange {
                            label: label.clone(),
                            at,
                        }],
                    },
                );
            }
            GraphChange::CourseRegistered {
                course_id,
                module_count,
            } => {
                if self.courses.contains_key(course_id) {
                    return Err(GraphError::DuplicateCourse(course_id.clone()));
                }
                if !(3..=4).contains(module_count) {
                    return Err(GraphError::InvalidModuleCount(*module_count));
                }
                let module_progress = (0..*module_count)
                    .map(|module_index| ModuleProgress {
                        module_index,
                        status: ModuleStatus::NotStarted,
                        updated_at: at,
                        quiz_score: None,
                    })
                    .collect();
                self.courses.insert(
                    course_id.clone(),
                    CourseNode {
                        course_id: course_id.clone(),
                        goal_id: None,
                        module_progress,
                        completed: false,
                    },
                );
            }
            GraphChange::ModuleCompleted {
                course_id,
                module_index,
                quiz_score,
            } => {
                if !(0.0..=1.0).contains(quiz_score) {
                    return Err(GraphError::InvalidScore(*quiz_score));
                }
                let module = self.module_mut(course_id, *module_index)?;
                match module.status {
                    ModuleStatus::NotStarted | ModuleStatus::Completed => {}
                    from => {
                        return Err(GraphError::IllegalTransition {
                            from,
                            to: ModuleStatus::Completed,
                        })
                    }
                }
                module.status = ModuleStatus::Completed;
                module.quiz_score = Some(
                    module
                        .quiz_score
                        .map_or(*quiz_score, |s| s.max(*quiz_score)),
                );
                module.updated_at = at;
                self.refresh_completion(course_id);
            }
            GraphChange::ModuleSelfReported {
                course_id,
                module_index,
                report,
            } => {
                let module = self.module_mut(course_id, *module_index)?;
                if module.status != ModuleStatus::NotStarted {
                    return Err(GraphError::IllegalTransition {
                        from: module.status,
                        to: report.status(),
                    });
                }
                module.status = report.status();
                module.updated_at = at;
                self.refresh_completion(course_id);
            }
            GraphChange::ModuleUnmarked {
                course_id,
                module_index,
            } => {
                let module = self.module_mut(course_id, *module_index)?;
                if !matches!(
                    module.status,
                    ModuleStatus::SelfReportedKnown | ModuleStatus::MarkedIrrelevant
                ) {
                    return Err(GraphError::IllegalTransition {
                        from: module.status,
                        to: ModuleStatus::NotStarted,
                    });
                }
                module.status = ModuleStatus::NotStarted;
                module.updated_at = at;
                self.refresh_completion(course_id);
            }
            GraphChange::Regrouped { trigger, actions } => {
                if let Some(trigger) = trigger {
                    if !self.courses.contains_key(trigger) {
                        return Err(GraphError::UnknownCourse(trigger.clone()));
                    }
                }
                let mut scratch = self.clone();
                for (index, action) in actions.iter().enumerate() {
                    scratch
                        .validate_applied(action)
                        .map_err(|reason| GraphError::InvalidAction { index, reason })?;
                    scratch.apply_action(action, at);
                }
                if let Some(trigger) = trigger {
                    scratch.awaiting_regroup.remove(trigger);
                }
                self.goals = scratch.goals;
                self.courses = scratch.courses;
                self.awaiting_regroup = scratch.awaiting_regroup;
            }
        }
        self.event_log.push(event);
        Ok(())
    }

    fn validate_applied(&self, action: &AppliedAction) -> Result<(), ActionViolation> {
        let as_request = match action {
            AppliedAction::AddedToGoal {
                course_id,
                goal_id,
                justification,
                ..
            } => RegroupAction::AddToGoal {
                course_id: course_id.clone(),
                goal_id: goal_id.clone(),
                justification: justification.clone(),
            },
            AppliedAction::RenamedGoal {
                goal_id,
                to,
                justification,
                ..
            } => RegroupAction::RenameGoal {
                goal_id: goal_id.clone(),
                new_label: to.clone(),
                justification: justification.clone(),
            },
            AppliedAction::CreatedGoal {
                goal_id,
                label,
                member_course_ids,
                justification,
            } => {
                if self.goals.contains_key(goal_id) {
                    return Err(ActionViolation::LabelCollision {
                        label: label.clone(),
                        existing: goal_id.clone(),
                    });
                }
                RegroupAction::CreateGoal {
                    label: label.clone(),
                    member_course_ids: member_course_ids.clone(),
                    justification: justification.clone(),
                }
            }
        };
        self.validate_action(&as_request).map(|_| ())
    }

    /// Mutates state for an action that has already been validated.
    fn apply_action(&mut self, action: &AppliedAction, at: DateTime<Utc>) {
        match action {
            AppliedAction::AddedToGoal {
                course_id, goal_id, ..
            } => self.assign(course_id, goal_id),
            AppliedAction::RenamedGoal { goal_id, to, .. } => {
                let goal = self.goals.get_mut(goal_id).expect("validated goal");
                goal.label = to.clone();
                goal.renamed_at = Some(at);
                goal.label_history.push(LabelChange {
                    label: to.clone(),
                    at,
                });
            }
            AppliedAction::CreatedGoal {
                goal_id,
                label,
                member_course_ids,
                ..
            } => {
                self.goals.insert(
                    goal_id.clone(),
                    Goal {
                        id: goal_id.clone(),
                        label: label.clone(),
                        course_ids: BTreeSet::new(),
                        created_at: at,
                        renamed_at: None,
                        label_history: vec![LabelChange {
                            label: label.clone(),
                            at,
                        }],
                    },
                );
                for course_id in member_course_ids {
                    self.assign(course_id, goal_id);
                }
            }
        }
    }

    fn assign(&mut self, course_id: &CourseId, goal_id: &GoalId) {
        let course = self.courses.get_mut(course_id).expect("validated course");
        if let Some(previous) = course.goal_id.replace(goal_id.clone()) {
            if let Some(goal) = self.goals.get_mut(&previous) {
                goal.course_ids.remove(course_id);
            }
        }
        self.goals
            .get_mut(goal_id)
            .expect("validated goal")
            .course_ids
            .insert(course_id.clone());
    }

    fn module_mut(
        &mut self,
        course_id: &CourseId,
        module_index: usize,
    ) -> Result<&mut ModuleProgress, GraphError> {
        let course = self
            .courses
            .get_mut(course_id)
            .ok_or_else(|| GraphError::UnknownCourse(course_id.clone()))?;
        let count = course.module_progress.len();
        course
            .module_progress
            .get_mut(module_index)
            .ok_or(GraphError::ModuleIndexOutOfRange {
                index: module_index,
                count,
            })
    }

    fn refresh_completion(&mut self, course_id: &CourseId) {
        let course = self.courses.get_mut(course_id).expect("course exists");
        let was = course.completed;
        course.completed = is_completed(&course.module_progress);
        match (was, course.completed) {
            (false, true) => {
                self.awaiting_regroup.insert(course_id.clone());
            }
            (true, false) => {
                self.awaiting_regroup.remove(course_id);
            }
            _ => {}
        }
    }

    // ── integrity ────────────────────────────────────────────────────────

    /// Structural invariants that must hold after every operation.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut labels = BTreeMap::new();
        for goal in self.goals.values() {
            if goal.label.trim().is_empty() {
                out.push(format!("goal {} has an empty label", goal.id));
            }
            if let Some(other) = labels.insert(normalize_label(&goal.label), &goal.id) {
                out.push(format!(
                    "goals {other} and {} share label '{}'",
                    goal.id, goal.label
                ));
            }
            for course_id in &goal.course_ids {
                match self.courses.get(course_id) {
                    None => out.push(format!("goal {} lists missing course {course_id}", goal.id)),
                    Some(c) if c.goal_id.as_ref() != Some(&goal.id) => out.push(format!(
                        "goal {} lists course {course_id} which points to {:?}",
                        goal.id, c.goal_id
                    )),
                    _ => {}
                }
            }
        }
        for course in self.courses.values() {
            let n = course.module_progress.len();
            if !(3..=4).contains(&n) {
                out.push(format!("course {} has {n} modules", course.course_id));
            }
            if let Some(goal_id) = &course.goal_id {
                match self.goals.get(goal_id) {
                    None => out.push(format!(
                        "course {} points to missing goal {goal_id}",
                        course.course_id
                    )),
                    Some(g) if !g.course_ids.contains(&course.course_id) => out.push(format!(
                        "course {} not listed by its goal {goal_id}",
                        course.course_id
                    )),
                    _ => {}
                }
            }
            for (i, m) in course.module_progress.iter().enumerate() {
                if m.module_index != i {
                    out.push(format!(
                        "course {} module {i} has index {}",
                        course.course_id, m.module_index
                    ));
                }
                match (m.status, m.quiz_score) {
                    (ModuleStatus::Completed, Some(s)) if (0.0..=1.0).contains(&s) => {}
                    (ModuleStatus::Completed, s) => out.push(format!(
                        "course {} module {i} completed with score {s:?}",
                        course.course_id
                    )),
                    (_, Some(_)) => out.push(format!(
                        "course {} module {i} has a score without completion",
                        course.course_id
                    )),
                    _ => {}
                }
            }
            if course.completed != is_completed(&course.module_progress) {
                out.push(format!(
                    "course {} completed flag is stale",
                    course.course_id
                ));
            }
        }
        let members: usize = self.goals.values().map(|g| g.course_ids.len()).sum();
        let grouped = self
            .courses
            .values()
            .filter(|c| c.goal_id.is_some())
            .count();
        if members != grouped {
            out.push(format!(
                "{members} goal memberships for {grouped} grouped courses"
            ));
        }
        out
    }

    /// True when replaying the event log from empty reproduces this graph.
    pub fn replays_to_self(&self) -> bool {
        Self::replay(&self.event_log).is_ok_and(|g| g == *self)
    }

    // ── snapshot ─────────────────────────────────────────────────────────

    pub fn snapshot(&self) -> String {
        let doc = SnapshotDocument {
            schema_version: SCHEMA_VERSION,
            goals: self.goals.values().cloned().collect(),
            courses: self.courses.values().cloned().collect(),
            event_log: self.event_log.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("snapshot serializes")
    }

    /// Rebuilds a graph from a snapshot, checking referential integrity and
    /// that the stored state matches a replay of its event log.
    pub fn restore(document: &str) -> Result<Self, GraphError> {
        let corrupt = |m: String| GraphError::CorruptSnapshot(m);
        let doc: SnapshotDocument =
            serde_json::from_str(document).map_err(|e| corrupt(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(corrupt(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let mut stored = Self::new();
        for goal in doc.goals {
            if stored.goals.insert(goal.id.clone(), goal).is_some() {
                return Err(corrupt("duplicate goal id".into()));
            }
        }
        for course in doc.courses {
            if let Some(goal_id) = &course.goal_id {
                if !stored.goals.contains_key(goal_id) {
                    return Err(corrupt(format!(
                        "course {} references missing goal {goal_id}",
                        course.course_id
                    )));
                }
            }
            if stored
                .courses
                .insert(course.course_id.clone(), course)
                .is_some()
            {
                return Err(corrupt("duplicate course id".into()));
            }
        }
        let violations = stored.invariant_violations();
        if !violations.is_empty() {
            return Err(corrupt(violations.join("; ")));
        }
        let replayed =
            Self::replay(&doc.event_log).map_err(|e| corrupt(format!("event log: {e}")))?;
        if replayed.goals != stored.goals || replayed.courses != stored.courses {
            return Err(corrupt("state does not match its event log".into()));
        }
        Ok(replayed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn t(n: i64) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2025-03-01T12:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
            + Duration::minutes(n)
    }

    fn cid(s: &str) -> CourseId {
        CourseId::from(s)
    }

    fn graph_with_course(modules: usize) -> LearnerGraph {
        let mut g = LearnerGraph::new();
        g.register_course(cid("c1"), modules, t(0)).unwrap();
        g
    }

    #[test]
    fn completing_every_module_completes_the_course() {
        let mut g = graph_with_course(4);
        for i in 0..4 {
            assert!(!g.course(&cid("c1")).unwrap().completed);
            g.record_module_completion(&cid("c1"), i, 0.5 + i as f64 / 10.0, t(1))
                .unwrap();
        }
        assert!(g.course(&cid("c1")).unwrap().completed);
        assert!(g.awaiting_regroup().contains(&cid("c1")));
    }

    #[test]
    fn module_index_is_bounds_checked() {
        let mut g = graph_with_course(4);
        let err = g
            .record_module_completion(&cid("c1"), 5, 1.0, t(1))
            .unwrap_err();
        assert_eq!(
            err,
            GraphError::ModuleIndexOutOfRange { index: 5, count: 4 }
        );
        let err = g
            .record_module_completion(&cid("zz"), 0, 1.0, t(1))
            .unwrap_err();
        assert_eq!(err, GraphError::UnknownCourse(cid("zz")));
    }

    #[test]
    fn retakes_keep_the_best_score() {
        let mut g = graph_with_course(3);
        let scores = [0.5, 0.75, 0.25];
        let mut best: Option<f64> = None;
        for s in scores {
            g.record_module_completion(&cid("c1"), 1, s, t(1)).unwrap();
            best = Some(best.map_or(s, |b: f64| b.max(s)));
            assert_eq!(
                g.course(&cid("c1")).unwrap().module_progress[1].quiz_score,
                best
            );
        }
        assert_eq!(best, Some(0.75));
    }

    #[test]
    fn self_report_transitions() {
        let mut g = graph_with_course(4);
        g.self_report(&cid("c1"), 0, SelfReportKind::Known, t(1))
            .unwrap();
        assert_eq!(
            g.course(&cid("c1")).unwrap().module_progress[0].status,
            ModuleStatus::SelfReportedKnown
        );
        g.record_module_completion(&cid("c1"), 1, 1.0, t(1))
            .unwrap();
        let err = g
            .self_report(&cid("c1"), 1, SelfReportKind::Known, t(2))
            .unwrap_err();
        assert!(matches!(
            err,
            GraphError::IllegalTransition {
                from: ModuleStatus::Completed,
                ..
            }
        ));
        let err = g
            .record_module_completion(&cid("c1"), 0, 1.0, t(2))
            .unwrap_err();
        assert!(matches!(
            err,
            GraphError::IllegalTransition {
                from: ModuleStatus::SelfReportedKnown,
                ..
            }
        ));
        g.unmark_self_report(&cid("c1"), 0, t(3)).unwrap();
        g.record_module_completion(&cid("c1"), 0, 1.0, t(3))
            .unwrap();
    }

    #[test]
    fn self_reports_plus_one_completion_complete_the_course() {
        let mut g = graph_with_course(4);
        g.self_report(&cid("c1"), 0, SelfReportKind::Known, t(1))
            .unwrap();
        g.self_report(&cid("c1"), 1, SelfReportKind::Known, t(1))
            .unwrap();
        g.self_report(&cid("c1"), 2, SelfReportKind::Irrelevant, t(1))
            .unwrap();
        assert!(!g.course(&cid("c1")).unwrap().completed);
        g.record_module_completion(&cid("c1"), 3, 0.8, t(2))
            .unwrap();
        assert!(g.course(&cid("c1")).unwrap().completed);
    }

    #[test]
    fn completed_flag_matches_rule_for_every_status_tuple() {
        use ModuleStatus::*;
        let all = [NotStarted, Completed, SelfReportedKnown, MarkedIrrelevant];
        for a in all {
            for b in all {
                for c in all {
                    for d in all {
                        let tuple = [a, b, c, d];
                        let mut g = graph_with_course(4);
                        for (i, s) in tuple.iter().enumerate() {
                            match s {
                                NotStarted => {}
                                Completed => g
                                    .record_module_completion(&cid("c1"), i, 1.0, t(1))
                                    .unwrap(),
                                SelfReportedKnown => g
                                    .self_report(&cid("c1"), i, SelfReportKind::Known, t(1))
                                    .unwrap(),
                                MarkedIrrelevant => g
                                    .self_report(&cid("c1"), i, SelfReportKind::Irrelevant, t(1))
                                    .unwrap(),
                            }
                        }
                        // oracle: every module settled, and at least one real completion
                        let expected =
                            tuple.iter().all(|s| *s != NotStarted) && tuple.contains(&Completed);
                        assert_eq!(
                            g.course(&cid("c1")).unwrap().completed,
                            expected,
                            "{tuple:?}"
                        );
                    }
                }
            }
        }
    }

    fn two_goal_graph() -> (LearnerGraph, GoalId, GoalId, IdSource) {
        let ids = IdSource::seeded(9);
        let mut g = LearnerGraph::new();
        let sl = g.seed_goal("Supervised Learning", &ids, t(0)).unwrap();
        let da = g.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        g.register_course(cid("kmeans"), 4, t(0)).unwrap();
        g.register_course(cid("influence"), 3, t(0)).unwrap();
        (g, sl, da, ids)
    }

    #[test]
    fn rename_and_add_apply_together() {
        let (mut g, sl, da, ids) = two_goal_graph();
        let actions = vec![
            RegroupAction::AddToGoal {
                course_id: cid("kmeans"),
                goal_id: sl.clone(),
                justification: "k-means is the learner's clustering work".into(),
            },
            RegroupAction::RenameGoal {
                goal_id: sl.clone(),
                new_label: "Machine Learning".into(),
                justification: "clustering is unsupervised; broaden the umbrella".into(),
            },
            RegroupAction::AddToGoal {
                course_id: cid("influence"),
                goal_id: da.clone(),
                justification: "influence diagrams model decisions".into(),
            },
        ];
        g.apply_regroup_actions(&actions, &ids, t(5)).unwrap();
        let ml = g.goal(&sl).unwrap();
        assert_eq!(ml.label, "Machine Learning");
        assert!(ml.course_ids.contains(&cid("kmeans")));
        assert_eq!(ml.label_history.len(), 2);
        assert!(g.goal(&da).unwrap().course_ids.contains(&cid("influence")));
        assert!(g.invariant_violations().is_empty());
        assert!(g.replays_to_self());
    }

    #[test]
    fn empty_action_list_records_only_a_marker() {
        let (mut g, _, _, ids) = two_goal_graph();
        let before = g.clone();
        g.apply_regroup_actions(&[], &ids, t(5)).unwrap();
        assert_eq!(g.goals, before.goals);
        assert_eq!(g.courses, before.courses);
        assert_eq!(g.event_log.len(), before.event_log.len() + 1);
        assert!(matches!(
            &g.event_log.last().unwrap().change,
            GraphChange::Regrouped { actions, .. } if actions.is_empty()
        ));
    }

    #[test]
    fn single_member_goal_is_rejected_atomically() {
        let (mut g, sl, _, ids) = two_goal_graph();
        let before = g.clone();
        let actions = vec![
            RegroupAction::RenameGoal {
                goal_id: sl,
                new_label: "Machine Learning".into(),
                justification: "broader".into(),
            },
            RegroupAction::CreateGoal {
                label: "Clustering".into(),
                member_course_ids: vec![cid("kmeans")],
                justification: "one course".into(),
            },
        ];
        let err = g.apply_regroup_actions(&actions, &ids, t(5)).unwrap_err();
        assert_eq!(
            err,
            GraphError::InvalidAction {
                index: 1,
                reason: ActionViolation::TooFewMembers { count: 1 }
            }
        );
        assert_eq!(g, before);
    }

    #[test]
    fn validate_action_rules() {
        let (mut g, sl, da, ids) = two_goal_graph();
        g.apply_regroup_actions(
            &[RegroupAction::AddToGoal {
                course_id: cid("kmeans"),
                goal_id: sl.clone(),
                justification: "x".into(),
            }],
            &ids,
            t(1),
        )
        .unwrap();
        let mv = g
            .validate_action(&RegroupAction::AddToGoal {
                course_id: cid("kmeans"),
                goal_id: da.clone(),
                justification: "moved".into(),
            })
            .unwrap();
        assert!(mv.is_move());
        let ok = g
            .validate_action(&RegroupAction::CreateGoal {
                label: "Applied Stats".into(),
                member_course_ids: vec![cid("kmeans"), cid("influence")],
                justification: "cluster".into(),
            })
            .unwrap();
        assert_eq!(ok.moves, vec![(cid("kmeans"), sl.clone())]);
        assert_eq!(
            g.validate_action(&RegroupAction::RenameGoal {
                goal_id: sl.clone(),
                new_label: "Supervised Learning".into(),
                justification: "x".into(),
            }),
            Err(ActionViolation::SameLabel)
        );
        assert!(matches!(
            g.validate_action(&RegroupAction::RenameGoal {
                goal_id: sl.clone(),
                new_label: "decision analysis ".into(),
                justification: "x".into(),
            }),
            Err(ActionViolation::LabelCollision { .. })
        ));
        assert_eq!(
            g.validate_action(&RegroupAction::RenameGoal {
                goal_id: sl,
                new_label: "ML".into(),
                justification: " ".into(),
            }),
            Err(ActionViolation::EmptyJustification)
        );
    }

    #[test]
    fn second_rename_in_one_update_is_churn() {
        let (mut g, sl, _, ids) = two_goal_graph();
        let rename = |l: &str| RegroupAction::RenameGoal {
            goal_id: sl.clone(),
            new_label: l.into(),
            justification: "x".into(),
        };
        let err = g
            .apply_regroup_actions(&[rename("ML"), rename("AI")], &ids, t(1))
            .unwrap_err();
        assert!(matches!(
            err,
            GraphError::InvalidAction {
                index: 1,
                reason: ActionViolation::RenameChurn { .. }
            }
        ));
    }

    #[test]
    fn snapshot_round_trips() {
        let empty = LearnerGraph::new();
        assert_eq!(LearnerGraph::restore(&empty.snapshot()).unwrap(), empty);

        let (mut g, sl, _, ids) = two_goal_graph();
        g.record_module_completion(&cid("kmeans"), 0, 0.5, t(2))
            .unwrap();
        g.self_report(&cid("kmeans"), 1, SelfReportKind::Irrelevant, t(2))
            .unwrap();
        g.apply_regroup_actions(
            &[RegroupAction::AddToGoal {
                course_id: cid("kmeans"),
                goal_id: sl,
                justification: "x".into(),
            }],
            &ids,
            t(3),
        )
        .unwrap();
        assert_eq!(LearnerGraph::restore(&g.snapshot()).unwrap(), g);
    }

    #[test]
    fn snapshot_with_dangling_goal_is_corrupt() {
        let (mut g, sl, _, ids) = two_goal_graph();
        g.apply_regroup_actions(
            &[RegroupAction::AddToGoal {
                course_id: cid("kmeans"),
                goal_id: sl.clone(),
                justification: "x".into(),
            }],
            &ids,
            t(3),
        )
        .unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&g.snapshot()).unwrap();
        let goals = doc["goals"].as_array_mut().unwrap();
        goals.retain(|goal| goal["id"] != sl.0.as_str());
        let err = LearnerGraph::restore(&doc.to_string()).unwrap_err();
        assert!(matches!(err, GraphError::CorruptSnapshot(m) if m.contains("missing goal")));
    }

    #[test]
    fn snapshot_that_disagrees_with_its_log_is_corrupt() {
        let (g, _, _, _) = two_goal_graph();
        let mut doc: serde_json::Value = serde_json::from_str(&g.snapshot()).unwrap();
        doc["goals"][0]["label"] = "Tampered".into();
        doc["goals"][0]["label_history"][0]["label"] = "Tampered".into();
        assert!(matches!(
            LearnerGraph::restore(&doc.to_string()),
            Err(GraphError::CorruptSnapshot(_))
        ));
    }

    #[test]
    fn seeded_goal_labels_are_unique() {
        let ids = IdSource::seeded(1);
        let mut g = LearnerGraph::new();
        g.seed_goal("Decision Analysis", &ids, t(0)).unwrap();
        assert!(matches!(
            g.seed_goal(" decision analysis", &ids, t(0)),
            Err(GraphError::DuplicateGoalLabel(_))
        ));
    }
}
