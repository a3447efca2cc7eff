use std::hint::black_box;

use chrono::{DateTime, Duration, Utc};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use loom_core::clock::IdSource;
use loom_core::summarizer::ActiveSummary;
use loom_core::topic::{rank_strengthen_themes, Coverage};
use loom_core::{
    ChatSummary, ConversationId, CourseId, Difficulty, LearnerGraph, QuizItem, RegroupAction,
};

fn epoch() -> DateTime<Utc> {
    "2025-03-10T12:00:00Z".parse().unwrap()
}

fn quiz_items() -> Vec<QuizItem> {
    (0..64)
        .map(|i| QuizItem {
            stem: format!("Question {i}: which statement holds?"),
            options: (0..(3 + i % 3))
                .map(|o| format!("  Option   {o} for {i} "))
                .collect(),
            correct_index: (i % 3) as i64,
            explanation: "Only that one follows from the definition.".into(),
        })
        .collect()
}

fn built_graph(courses: usize) -> LearnerGraph {
    let ids = IdSource::seeded(1);
    let at = epoch();
    let mut graph = LearnerGraph::new();
    let goal = graph.seed_goal("Statistics", &ids, at).unwrap();
    for c in 0..courses {
        let id = CourseId(format!("course-{c}"));
        graph.register_course(id.clone(), 4, at).unwrap();
        for m in 0..4 {
            graph.record_module_completion(&id, m, 0.75, at).unwrap();
        }
        let action = RegroupAction::AddToGoal {
            course_id: id.clone(),
            goal_id: goal.clone(),
            justification: "same area".into(),
        };
        graph.apply_regroup_for(&id, &[action], &ids, at).unwrap();
    }
    graph
}

fn summaries(n: usize) -> Vec<ActiveSummary> {
    (0..n)
        .map(|i| ActiveSummary {
            summary: ChatSummary {
                conversation_id: ConversationId(format!("chat-{i}")),
                statement: "The learner asked about a topic.".into(),
                umbrella: format!("Theme {}", i % 17),
                difficulty: Difficulty::Beginner,
                created_at: epoch(),
                source_message_count: 2,
            },
            last_referenced_at: epoch() - Duration::minutes(i as i64),
        })
        .collect()
}

fn validate(c: &mut Criterion) {
    let items = quiz_items();
    c.bench_function("validate_quiz/64", |b| {
        b.iter(|| {
            items
                .iter()
                .filter(|i| loom_core::validate_quiz(black_box(i)).is_ok())
                .count()
        })
    });
}

fn replay(c: &mut Criterion) {
    let events = built_graph(200).event_log().to_vec();
    c.bench_function("graph_replay/200_courses", |b| {
        b.iter(|| LearnerGraph::replay(black_box(&events)).unwrap())
    });
    c.bench_function("graph_add_course", |b| {
        b.iter_batched(
            || built_graph(50),
            |mut g| {
                g.register_course(CourseId("extra".into()), 4, epoch())
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn ranking(c: &mut Criterion) {
    let active = summaries(500);
    let coverage = Coverage::default();
    c.bench_function("rank_strengthen_themes/500", |b| {
        b.iter(|| rank_strengthen_themes(black_box(&active), &coverage))
    });
}

criterion_group!(benches, validate, replay, ranking);
criterion_main!(benches);
