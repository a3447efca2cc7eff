mod common;

use common::*;
use loom_core::storage::Storage;
use loom_core::{ManualClock, ProposalMode, ProposalStatus, Trigger};

#[test]
fn pipeline_proposes_a_strengthen_and_an_explore_outline() {
    let clock = ManualClock::new(start_time());
    let loom = open_loom(Storage::in_memory(), running_example_mock(), &clock, 1);
    loom.import_conversations(&fixture("running_example_chats.json"))
        .unwrap();
    loom.seed_goal("Supervised Learning").unwrap();
    loom.seed_goal("Decision Analysis").unwrap();

    let run = loom.run_pipeline(Trigger::Manual);
    assert_eq!(run.errors(), Vec::<&str>::new());
    let proposals = loom.list_proposals();
    let kmeans = proposals
        .iter()
        .find(|p| p.title == KMEANS_TITLE)
        .expect("k-means outline");
    assert_eq!(kmeans.mode, ProposalMode::Strengthen);
    let influence = proposals
        .iter()
        .find(|p| p.title == INFLUENCE_TITLE)
        .expect("influence outline");
    assert_eq!(influence.mode, ProposalMode::Explore);
    assert!(proposals
        .iter()
        .all(|p| p.status == ProposalStatus::Proposed));
}

#[test]
fn completing_both_courses_regroups_the_graph() {
    let clock = ManualClock::new(start_time());
    let loom = open_loom(Storage::in_memory(), running_example_mock(), &clock, 2);
    drive_running_example(&loom, &clock).unwrap();
    assert_eq!(goal_titles(&loom), expected_final_goals());
    assert!(
        loom.consistency_violations().is_empty(),
        "{:?}",
        loom.consistency_violations()
    );
    let ml = loom
        .graph_view()
        .goals
        .into_iter()
        .find(|g| g.label == "Machine Learning")
        .unwrap();
    let history: Vec<&str> = ml.label_history.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(history, ["Supervised Learning", "Machine Learning"]);
    assert!(loom.pending_regroups().is_empty());
}

#[test]
fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(start_time());
    let before = {
        let loom = open_loom(
            Storage::at(dir.path()).unwrap(),
            running_example_mock(),
            &clock,
            3,
        );
        drive_running_example(&loom, &clock).unwrap();
        (loom.graph(), loom.list_courses(), loom.list_proposals())
    };
    let loom = open_loom(
        Storage::at(dir.path()).unwrap(),
        running_example_mock(),
        &clock,
        99,
    );
    assert_eq!(loom.graph(), before.0);
    assert_eq!(loom.list_courses(), before.1);
    assert_eq!(loom.list_proposals(), before.2);
    assert_eq!(goal_titles(&loom), expected_final_goals());
}
