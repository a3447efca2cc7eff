#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use loom_core::gateway::{GatewayConfig, MockProvider, MockScript};
use loom_core::service::{BackgroundMode, LoomOptions, ServiceError};
use loom_core::storage::Storage;
use loom_core::{CourseOutlineProposal, Gateway, Loom, ManualClock, ProposalStatus, Trigger};

pub const KMEANS_TITLE: &str = "K-means Clustering for Customer Segmentation";
pub const INFLUENCE_TITLE: &str = "Influence Diagrams for Structured Decisions";

pub fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn start_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2025-03-10T12:00:00Z")
        .unwrap()
        .with_timezone(&Utc)
}

pub fn running_example_mock() -> Arc<MockProvider> {
    let script: MockScript = serde_json::from_str(&fixture("running_example_mock.json")).unwrap();
    Arc::new(MockProvider::from_script(script))
}

pub fn fast_gateway(mock: Arc<MockProvider>) -> Gateway {
    Gateway::with_agent_contracts(
        mock,
        GatewayConfig {
            backoff_base_ms: 0,
            ..GatewayConfig::default()
        },
    )
}

pub fn open_loom(
    storage: Storage,
    mock: Arc<MockProvider>,
    clock: &ManualClock,
    seed: u64,
) -> Loom {
    try_open_loom(storage, mock, clock, seed).expect("service opens")
}

pub fn try_open_loom(
    storage: Storage,
    mock: Arc<MockProvider>,
    clock: &ManualClock,
    seed: u64,
) -> Result<Loom, ServiceError> {
    let options = LoomOptions {
        clock: Arc::new(clock.clone()),
        seed: Some(seed),
        background: BackgroundMode::Inline,
        ..LoomOptions::default()
    };
    Loom::open(storage, fast_gateway(mock), options)
}

fn find_proposal(loom: &Loom, title: &str) -> Option<CourseOutlineProposal> {
    loom.list_proposals().into_iter().find(|p| p.title == title)
}

/// Brings the running example to its final state from whatever state the
/// stores are in. Each step is skipped when already done, so the driver
/// also finishes a run interrupted by a crash.
pub fn drive_running_example(loom: &Loom, clock: &ManualClock) -> Result<(), ServiceError> {
    if loom.list_conversations().len() < 3 {
        loom.import_conversations(&fixture("running_example_chats.json"))?;
    }
    let labels: Vec<String> = loom.graph().goals().map(|g| g.label.clone()).collect();
    if !labels
        .iter()
        .any(|l| l == "Supervised Learning" || l == "Machine Learning")
    {
        loom.seed_goal("Supervised Learning")?;
    }
    if !labels.iter().any(|l| l == "Decision Analysis") {
        loom.seed_goal("Decision Analysis")?;
    }
    clock.advance(Duration::minutes(1));
    if find_proposal(loom, KMEANS_TITLE).is_none() || find_proposal(loom, INFLUENCE_TITLE).is_none()
    {
        loom.run_pipeline(Trigger::Manual);
    }
    for title in [KMEANS_TITLE, INFLUENCE_TITLE] {
        clock.advance(Duration::minutes(1));
        let proposal = find_proposal(loom, title)
            .ok_or_else(|| ServiceError::InvalidInput(format!("no proposal titled {title}")))?;
        let course_id = match proposal.status {
            ProposalStatus::Proposed => loom.accept_proposal(&proposal.id, None)?.id,
            ProposalStatus::Accepted => proposal
                .course_id
                .clone()
                .expect("accepted proposals name their course"),
            status => {
                return Err(ServiceError::InvalidProposalStatus {
                    id: proposal.id,
                    status,
                })
            }
        };
        let course = loom
            .course(&course_id)
            .ok_or(ServiceError::UnknownCourse(course_id.clone()))?;
        for (index, module) in course.modules.iter().enumerate() {
            let done = loom
                .graph()
                .course(&course_id)
                .is_some_and(|c| c.module_progress[index].status.is_terminal());
            if done {
                continue;
            }
            clock.advance(Duration::minutes(10));
            let answers: Vec<usize> = module
                .quiz
                .iter()
                .map(|q| q.correct_index as usize)
                .collect();
            loom.submit_quiz(&course_id, index, &answers, None)?;
        }
    }
    loom.resume();
    Ok(())
}

/// Goal label → sorted course titles.
pub fn goal_titles(loom: &Loom) -> Vec<(String, Vec<String>)> {
    let view = loom.graph_view();
    let mut out: Vec<(String, Vec<String>)> = view
        .goals
        .iter()
        .map(|g| {
            let mut titles: Vec<String> = g.courses.iter().map(|c| c.title.clone()).collect();
            titles.sort();
            (g.label.clone(), titles)
        })
        .collect();
    out.sort();
    out
}

pub fn expected_final_goals() -> Vec<(String, Vec<String>)> {
    vec![
        (
            "Decision Analysis".to_string(),
            vec![INFLUENCE_TITLE.to_string()],
        ),
        (
            "Machine Learning".to_string(),
            vec![KMEANS_TITLE.to_string()],
        ),
    ]
}
