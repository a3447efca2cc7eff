use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::*;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
struct Summary {
    statement: String,
    umbrella: String,
    difficulty: String,
}

fn fast() -> GatewayConfig {
    GatewayConfig {
        backoff_base_ms: 0,
        ..GatewayConfig::default()
    }
}

fn summary(statement: &str) -> serde_json::Value {
    json!({"statement": statement, "umbrella": "Supervised Learning", "difficulty": "beginner"})
}

fn request() -> AgentRequest {
    AgentRequest::new(AgentName::Summarizer).subject("conv-1")
}

fn setup(replies: Vec<MockReply>) -> (Arc<MockProvider>, Gateway) {
    let mock = Arc::new(MockProvider::new());
    mock.script(AgentName::Summarizer, "conv-1", replies);
    let gateway = Gateway::with_agent_contracts(mock.clone(), fast());
    (mock, gateway)
}

#[test]
fn happy_path_takes_one_attempt() {
    let (_, gw) = setup(vec![MockReply::Json(summary("How to cluster customers"))]);
    let r = gw.call::<Summary>(&request(), None).unwrap();
    assert_eq!(r.attempts, 1);
    assert_eq!(r.parsed.statement, "How to cluster customers");
    assert_eq!(r.provider, "mock");
}

#[test]
fn invalid_then_valid_takes_two_attempts() {
    let (mock, gw) = setup(vec![
        MockReply::Json(json!({"statement": "x", "umbrella": "y", "difficulty": "expert"})),
        MockReply::Json(summary("second")),
    ]);
    let r = gw.call::<Summary>(&request(), None).unwrap();
    assert_eq!(r.attempts, 2);
    assert_eq!(r.parsed.statement, "second");
    let attempts: Vec<u32> = mock.calls().iter().map(|c| c.attempt).collect();
    assert_eq!(attempts, vec![1, 2]);
}

#[test]
fn all_invalid_exhausts_at_budget_plus_one() {
    let (mock, gw) = setup(vec![MockReply::Text("not json".into())]);
    let err = gw.call::<Summary>(&request(), None).unwrap_err();
    match err {
        GatewayError::SchemaExhausted {
            attempts,
            violations,
            ..
        } => {
            assert_eq!(attempts, 3);
            assert!(violations[0].contains("not valid JSON"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(mock.calls().len(), 3);
}

#[test]
fn retry_budget_is_configurable() {
    let mock = Arc::new(MockProvider::new());
    mock.script(
        AgentName::Summarizer,
        "*",
        vec![MockReply::Text("{}".into())],
    );
    let gw = Gateway::with_agent_contracts(
        mock.clone(),
        GatewayConfig {
            retry_budget: 0,
            ..fast()
        },
    );
    assert!(matches!(
        gw.call::<Summary>(&request(), None),
        Err(GatewayError::SchemaExhausted { attempts: 1, .. })
    ));
}

#[test]
fn repair_section_quotes_the_violation() {
    #[derive(Debug)]
    struct Recorder(std::sync::Mutex<Vec<ProviderRequest>>);
    impl Provider for Recorder {
        fn name(&self) -> &str {
            "recorder"
        }
        fn complete(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
            let mut seen = self.0.lock().unwrap();
            seen.push(request.clone());
            let reply = if seen.len() == 1 {
                json!({"statement": "s", "umbrella": "u"})
            } else {
                summary("ok")
            };
            Ok(ProviderReply::text(reply.to_string()))
        }
    }
    let recorder = Arc::new(Recorder(Default::default()));
    let gw = Gateway::with_agent_contracts(recorder.clone(), fast());
    gw.call::<Summary>(&request(), None).unwrap();
    let seen = recorder.0.lock().unwrap();
    assert!(seen[0].get_section("repair").is_none());
    let repair = seen[1].get_section("repair").unwrap();
    assert!(repair.contains("difficulty"), "{repair}");
    assert!(seen[0]
        .get_section("response_schema")
        .unwrap()
        .contains("statement"));
}

#[test]
fn semantic_check_failures_are_retried() {
    let (_, gw) = setup(vec![
        MockReply::Json(summary("bad")),
        MockReply::Json(summary("good")),
    ]);
    let check = |s: &Summary| {
        if s.statement == "bad" {
            Err(vec!["statement is bad".to_string()])
        } else {
            Ok(())
        }
    };
    let r = gw.call::<Summary>(&request(), Some(&check)).unwrap();
    assert_eq!((r.attempts, r.parsed.statement.as_str()), (2, "good"));
}

#[test]
fn non_retriable_errors_fail_fast() {
    for kind in [
        ProviderErrorKind::Auth,
        ProviderErrorKind::Network,
        ProviderErrorKind::Fatal,
    ] {
        let (mock, gw) = setup(vec![MockReply::Fail(kind)]);
        let err = gw.call::<Summary>(&request(), None).unwrap_err();
        assert!(
            matches!(err, GatewayError::Provider { attempts: 1, .. }),
            "{kind:?}"
        );
        assert_eq!(mock.calls().len(), 1);
    }
}

#[test]
fn retriable_errors_are_retried() {
    let (_, gw) = setup(vec![
        MockReply::Fail(ProviderErrorKind::RateLimited),
        MockReply::Fail(ProviderErrorKind::Transient),
        MockReply::Json(summary("third time")),
    ]);
    let r = gw.call::<Summary>(&request(), None).unwrap();
    assert_eq!(r.attempts, 3);
}

#[test]
fn slow_provider_times_out() {
    let mock = Arc::new(MockProvider::new());
    mock.script(
        AgentName::Summarizer,
        "conv-1",
        vec![MockReply::Delay {
            ms: 300,
            then: Box::new(MockReply::Json(summary("late"))),
        }],
    );
    let gw = Gateway::with_agent_contracts(
        mock,
        GatewayConfig {
            timeout_ms: 20,
            retry_budget: 1,
            ..fast()
        },
    );
    assert!(matches!(
        gw.call::<Summary>(&request(), None),
        Err(GatewayError::Timeout { attempts: 2, .. })
    ));
}

#[test]
fn rejects_when_saturated_under_reject_policy() {
    let mock = Arc::new(MockProvider::new());
    mock.script(
        AgentName::Summarizer,
        "*",
        vec![MockReply::Delay {
            ms: 200,
            then: Box::new(MockReply::Json(summary("slow"))),
        }],
    );
    let gw = Arc::new(Gateway::with_agent_contracts(
        mock,
        GatewayConfig {
            inflight_limit: 1,
            busy_policy: BusyPolicy::Reject,
            ..fast()
        },
    ));
    let background = {
        let gw = gw.clone();
        std::thread::spawn(move || gw.call::<Summary>(&request(), None).map(|r| r.attempts))
    };
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(
        gw.call::<Summary>(&request(), None).unwrap_err(),
        GatewayError::Busy
    );
    assert_eq!(background.join().unwrap().unwrap(), 1);
}

#[test]
fn blocking_policy_bounds_concurrency() {
    #[derive(Default)]
    struct Counting {
        now: std::sync::Mutex<(usize, usize)>,
    }
    impl Provider for Counting {
        fn name(&self) -> &str {
            "counting"
        }
        fn complete(&self, _: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
            {
                let mut g = self.now.lock().unwrap();
                g.0 += 1;
                g.1 = g.1.max(g.0);
            }
            std::thread::sleep(Duration::from_millis(20));
            self.now.lock().unwrap().0 -= 1;
            Ok(ProviderReply::text(summary("s").to_string()))
        }
    }
    let provider = Arc::new(Counting::default());
    let gw = Gateway::with_agent_contracts(
        provider.clone(),
        GatewayConfig {
            inflight_limit: 2,
            ..fast()
        },
    );
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| gw.call::<Summary>(&request(), None).unwrap());
        }
    });
    assert!(provider.now.lock().unwrap().1 <= 2);
}

#[test]
fn agent_schema_pairing_is_enforced() {
    let (_, gw) = setup(vec![]);
    let mut req = request();
    req.response_schema = AgentName::Regrouper.schema_id().into();
    assert!(matches!(
        gw.call::<Summary>(&req, None),
        Err(GatewayError::SchemaMismatch { .. })
    ));
    let empty = Gateway::new(Arc::new(MockProvider::new()), SchemaRegistry::new(), fast());
    assert!(matches!(
        empty.call::<Summary>(&request(), None),
        Err(GatewayError::UnregisteredSchema(_))
    ));
}

#[test]
fn every_agent_resolves_its_schema() {
    let registry = SchemaRegistry::with_agent_contracts();
    for agent in AgentName::ALL {
        assert!(registry.contains(agent.schema_id()), "{agent}");
    }
    assert_eq!(registry.ids().count(), AgentName::ALL.len());
    let mut again = registry.clone();
    assert!(matches!(
        again.register(
            AgentName::Summarizer.schema_id(),
            SchemaDefinition::new(schema::agent_contract(AgentName::Summarizer))
        ),
        Err(GatewayError::DuplicateSchema(_))
    ));
}

#[test]
fn mock_is_deterministic() {
    let run = || {
        let mock = Arc::new(MockProvider::synthetic());
        let gw = Gateway::with_agent_contracts(mock, fast());
        let req = AgentRequest::new(AgentName::Summarizer)
            .subject("c")
            .section("title", "customer segments")
            .context(&json!([{"index": 0, "role": "user", "text": "How do I group my customers? Thanks."}]))
            .with_seed(Some(3));
        serde_json::to_string(&gw.call::<Summary>(&req, None).unwrap().parsed).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn synthetic_replies_satisfy_every_contract() {
    let gw = Gateway::with_agent_contracts(Arc::new(MockProvider::synthetic()), fast());
    for agent in AgentName::ALL {
        let req = AgentRequest::new(agent)
            .subject("anything")
            .context(&json!({}));
        let r = gw.call::<serde_json::Value>(&req, None);
        assert!(r.is_ok(), "{agent}: {r:?}");
    }
}

#[test]
fn calls_are_logged_with_request_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calls.jsonl");
    let mock = Arc::new(MockProvider::new());
    mock.script(
        AgentName::Summarizer,
        "conv-1",
        vec![
            MockReply::Text("junk".into()),
            MockReply::Json(summary("s")),
        ],
    );
    let gw = Gateway::with_agent_contracts(mock, fast()).with_call_log(CallLog::at(&path).unwrap());
    let req = request();
    gw.call::<Summary>(&req, None).unwrap();
    let entries = gw.call_log().entries();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].request_hash, req.hash());
    assert_eq!(entries[0].attempts, 2);
    let line = std::fs::read_to_string(&path).unwrap();
    let parsed: CallLogEntry = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(parsed, entries[0]);
}

#[test]
fn fenced_json_is_accepted() {
    let (_, gw) = setup(vec![MockReply::Text(format!(
        "Sure!\n```json\n{}\n```",
        summary("fenced")
    ))]);
    assert_eq!(
        gw.call::<Summary>(&request(), None)
            .unwrap()
            .parsed
            .statement,
        "fenced"
    );
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn reply_strategy() -> impl Strategy<Value = MockReply> {
        prop_oneof![
            Just(MockReply::Text("nope".into())),
            Just(MockReply::Json(json!({"statement": "s"}))),
            Just(MockReply::Json(summary("valid"))),
            Just(MockReply::Fail(ProviderErrorKind::Transient)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn attempts_never_exceed_budget_plus_one(
            replies in proptest::collection::vec(reply_strategy(), 1..6),
            budget in 0u32..4,
        ) {
            let mock = Arc::new(MockProvider::new());
            mock.script(AgentName::Summarizer, "conv-1", replies.clone());
            let gw = Gateway::with_agent_contracts(mock.clone(), GatewayConfig { retry_budget: budget, ..fast() });
            let attempts = match gw.call::<Summary>(&request(), None) {
                Ok(r) => r.attempts,
                Err(GatewayError::SchemaExhausted { attempts, .. })
                | Err(GatewayError::Provider { attempts, .. })
                | Err(GatewayError::Timeout { attempts, .. }) => attempts,
                Err(e) => return Err(TestCaseError::fail(format!("{e:?}"))),
            };
            prop_assert!(attempts <= budget + 1);
            let seen: Vec<u32> = mock.calls().iter().map(|c| c.attempt).collect();
            prop_assert_eq!(seen, (1..=attempts).collect::<Vec<_>>());
        }
    }
}
