mod common;

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use coem::service::{Components, Service, EVENT_LOG_FILE};
use coem::snapshot;
use coem_core::attribution::{AttributionError, Uniform};
use coem_core::extraction::NullExtractor;
use coem_core::{
    AttributionRequest, AttributionResult, Attributor, BackendError, EngineState, GenerationRequest, Generator,
    MockGenerator, PoolConfig, Strategy,
};
use common::{spawn_server, Client};
use serde_json::{json, Value};

fn uniform_components() -> Components {
    Components {
        generator: Arc::new(MockGenerator::new(0)),
        attributor: Arc::new(Uniform),
        extractor: Arc::new(NullExtractor),
    }
}

fn start(components: Components) -> (Arc<Service>, Client) {
    let svc = Arc::new(Service::in_memory(PoolConfig::default(), components).unwrap());
    let base = spawn_server(svc.clone());
    (svc, Client::new(&base))
}

fn add(c: &Client, text: &str) -> u64 {
    let (status, body) = c.post("/fragments", json!({"text": text, "source": "news"}));
    assert!(status == 201 || status == 200, "{status} {body}");
    body["fragment"]["id"].as_u64().unwrap()
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or_default()
}

#[test]
fn fresh_server_has_an_empty_pool() {
    let (_, c) = start(Components::mock(0));
    let (status, body) = c.get("/pool");
    assert_eq!(status, 200);
    assert_eq!(body["fragments"], json!([]));
    assert_eq!(body["total"], 0);
    let (status, stats) = c.get("/pool/stats");
    assert_eq!(status, 200);
    assert_eq!(stats["retained_fraction"], Value::Null);
    assert_eq!(stats["histogram"].as_array().unwrap().len(), 20);
    let (status, events) = c.get("/events");
    assert_eq!(status, 200);
    assert_eq!(events["events"], json!([]));
}

#[test]
fn add_fragment_validation() {
    let (_, c) = start(Components::mock(0));
    let (status, body) = c.post("/fragments", json!({"text": "Fed raises rates"}));
    assert_eq!(status, 201);
    assert_eq!(body["fragment"]["value"], 1.0);
    assert_eq!(body["created"], true);
    let (status, body) = c.post("/fragments", json!({"text": "  fed RAISES rates "}));
    assert_eq!(status, 200);
    assert_eq!(body["created"], false);

    let (status, body) = c.post("/fragments", json!({"text": "   "}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));
    let (status, body) = c.post("/fragments", json!({"txt": "x"}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));
    let (status, body) = c.post_text("/fragments", "{not json");
    assert_eq!(status, 422);
    assert_eq!(error_code(&serde_json::from_str(&body).unwrap()), "validation_error");
    let (status, body) = c.post("/fragments", json!({"text": "x y", "source": "Alice Smith"}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));
    let (status, body) = c.get("/nope");
    assert_eq!((status, error_code(&body)), (404, "not_found"));
}

#[test]
fn like_and_dislike_move_values_by_the_ema() {
    let (_, c) = start(uniform_components());
    for t in ["Fed raises rates", "BTC halving cuts issuance", "Gold holds steady", "Oil slides on supply"] {
        add(&c, t);
    }
    let (status, session) = c.post("/sessions", json!({}));
    assert_eq!(status, 201, "{session}");
    let sid = session["session_id"].as_u64().unwrap();
    let cited: Vec<u64> = session["cited"].as_array().unwrap().iter().map(|f| f["id"].as_u64().unwrap()).collect();
    assert_eq!(cited.len(), 3);
    assert!(session["output"].as_str().unwrap().starts_with("[mock-digest v1 seed=0"));

    let (status, fb) = c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": "like"}));
    assert_eq!(status, 200, "{fb}");
    assert_eq!(fb["r"], 1.0);
    // uniform weight 1/3, alpha 0.03: 1 - 0.03 * (1 - 1/3)
    let expected_like = 1.0 - 0.03 * (1.0 - 1.0 / 3.0);
    let (_, pool) = c.get("/pool");
    for f in pool["fragments"].as_array().unwrap() {
        let id = f["id"].as_u64().unwrap();
        let v = f["value"].as_f64().unwrap();
        if cited.contains(&id) {
            assert!((v - expected_like).abs() < 1e-15, "{v}");
            assert_eq!(f["feedback_count"], 1);
        } else {
            assert_eq!(v, 1.0);
            assert_eq!(f["feedback_count"], 0);
        }
    }

    let (_, session) = c.post("/sessions", json!({}));
    let sid = session["session_id"].as_u64().unwrap();
    let cited2: Vec<u64> = session["cited"].as_array().unwrap().iter().map(|f| f["id"].as_u64().unwrap()).collect();
    let (status, _) = c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": "dislike"}));
    assert_eq!(status, 200);
    let (_, pool) = c.get("/pool");
    for f in pool["fragments"].as_array().unwrap() {
        let id = f["id"].as_u64().unwrap();
        let before = if cited.contains(&id) { expected_like } else { 1.0 };
        let expected = if cited2.contains(&id) {
            before - 0.03 * (before + 1.0 / 3.0)
        } else {
            before
        };
        assert!((f["value"].as_f64().unwrap() - expected).abs() < 1e-15);
    }
}

#[test]
fn feedback_errors() {
    let (_, c) = start(uniform_components());
    add(&c, "Fed raises rates");
    let (_, session) = c.post("/sessions", json!({"k": 1}));
    let sid = session["session_id"].as_u64().unwrap();
    let path = format!("/sessions/{sid}/feedback");

    let (status, body) = c.post(&path, json!({"rating": "meh"}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));
    let (status, body) = c.post(&path, json!({"rating": 1.5}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));

    let (status, _) = c.post(&path, json!({"rating": "like"}));
    assert_eq!(status, 200);
    let (_, snapshot_before) = c.get_text("/pool/snapshot");
    let (status, body) = c.post(&path, json!({"rating": "like"}));
    assert_eq!((status, error_code(&body)), (409, "duplicate_feedback"));
    let (status, _) = c.post(&path, json!({"rating": "dislike"}));
    assert_eq!(status, 409);
    assert_eq!(c.get_text("/pool/snapshot").1, snapshot_before);

    let (status, body) = c.post("/sessions/99/feedback", json!({"rating": "like"}));
    assert_eq!((status, error_code(&body)), (404, "unknown_session"));
    let (status, body) = c.get("/sessions/99");
    assert_eq!((status, error_code(&body)), (404, "unknown_session"));
    let (status, _) = c.get("/sessions/abc");
    assert_eq!(status, 404);
    let (status, body) = c.get(&format!("/sessions/{sid}"));
    assert_eq!(status, 200);
    assert_eq!(body["status"], "applied");
}

#[test]
fn scalar_ratings_use_the_affine_map() {
    let (_, c) = start(uniform_components());
    add(&c, "Fed raises rates");
    let (_, session) = c.post("/sessions", json!({"k": 1}));
    let sid = session["session_id"].as_u64().unwrap();
    let (status, fb) = c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": 0.25}));
    assert_eq!(status, 200);
    assert_eq!(fb["r"], -0.5);
    assert_eq!(fb["updated"][0]["value"], 1.0 - 0.03 * (1.0 + 0.5));
}

#[test]
fn empty_pool_and_bad_queries() {
    let (_, c) = start(Components::mock(0));
    let (status, body) = c.post("/sessions", json!({}));
    assert_eq!((status, error_code(&body)), (422, "empty_pool"));
    add(&c, "Fed raises rates");
    let (status, body) = c.post("/sessions", json!({"k": 0}));
    assert_eq!((status, error_code(&body)), (422, "validation_error"));
    let (status, _) = c.get("/pool?limit=0");
    assert_eq!(status, 422);
    let (status, _) = c.get("/pool?limit=5000");
    assert_eq!(status, 422);
    let (status, _) = c.get("/pool?offset=-1");
    assert_eq!(status, 422);
    let (status, _) = c.get("/events?from=x");
    assert_eq!(status, 422);
}

struct DownBackend;

impl Generator for DownBackend {
    fn generate(&self, _: &GenerationRequest) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("connection refused".into()))
    }
}

#[test]
fn backend_down_gives_503_and_leaves_the_pool_alone() {
    let (_, c) = start(Components {
        generator: Arc::new(DownBackend),
        ..uniform_components()
    });
    add(&c, "Fed raises rates");
    let (_, before) = c.get_text("/pool/snapshot");
    let (status, body) = c.post("/sessions", json!({}));
    assert_eq!((status, error_code(&body)), (503, "backend_unavailable"));
    assert_eq!(c.get_text("/pool/snapshot").1, before);
    let (_, events) = c.get("/events");
    let last = events["events"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["kind"], "backend_error");
    let (_, metrics) = c.get("/metrics");
    assert_eq!(metrics["backend_errors_total"], 1);
    assert_eq!(metrics["sessions"], 0);
}

#[test]
fn pagination_is_ordered_by_id() {
    let (_, c) = start(Components::mock(0));
    for i in 0..250 {
        add(&c, &format!("fact {i}"));
    }
    let (_, page) = c.get("/pool");
    let ids: Vec<u64> = page["fragments"].as_array().unwrap().iter().map(|f| f["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, (0..100).collect::<Vec<_>>());
    assert_eq!(page["total"], 250);
    assert_eq!(page["limit"], 100);
    assert_eq!(page["next_offset"], 100);
    let (_, page) = c.get("/pool?offset=200");
    let ids: Vec<u64> = page["fragments"].as_array().unwrap().iter().map(|f| f["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, (200..250).collect::<Vec<_>>());
    assert_eq!(page["next_offset"], Value::Null);
    let (_, page) = c.get("/pool?offset=10&limit=3");
    assert_eq!(page["fragments"].as_array().unwrap().len(), 3);
    assert_eq!(page["fragments"][0]["id"], 10);
    let (_, page) = c.get("/pool?offset=900");
    assert_eq!(page["fragments"], json!([]));
}

#[test]
fn events_tail_and_metrics() {
    let (_, c) = start(uniform_components());
    for t in ["a b c", "d e f", "g h i"] {
        add(&c, t);
    }
    let (_, session) = c.post("/sessions", json!({}));
    let sid = session["session_id"].as_u64().unwrap();
    c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": "like"}));

    let (_, all) = c.get("/events");
    let seqs: Vec<u64> = all["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (0..7).collect::<Vec<_>>());
    let kinds: Vec<&str> = all["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(
        kinds,
        [
            "fragment_added",
            "fragment_added",
            "fragment_added",
            "session_generated",
            "feedback_applied",
            "fragments_extracted",
            "pruned"
        ]
    );
    assert_eq!(all["next"], 7);
    let (_, tail) = c.get("/events?from=4&limit=2");
    let seqs: Vec<u64> = tail["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, [4, 5]);
    assert_eq!(tail["next"], 6);
    let (_, past) = c.get("/events?from=50");
    assert_eq!(past["events"], json!([]));

    let (_, m) = c.get("/metrics");
    assert_eq!(m["sessions_generated_total"], 1);
    assert_eq!(m["feedback_applied_total"], 1);
    assert_eq!(m["fragments_added_total"], 3);
    assert_eq!(m["events_in_log"], 7);
    assert_eq!(m["fragments_alive"], 3);
    assert!(m["requests_total"].as_u64().unwrap() >= 7);

    let (_, stats) = c.get("/pool/stats");
    assert_eq!(stats["alive"], 3);
    assert_eq!(stats["retained_fraction"], 1.0);
    let counts: u64 = stats["histogram"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(counts, 3);
}

#[test]
fn static_token_guards_every_route_but_health() {
    let svc = Arc::new(
        Service::in_memory(PoolConfig::default(), Components::mock(0))
            .unwrap()
            .with_api_token(Some("s3cret".into())),
    );
    let base = spawn_server(svc);
    let anon = Client::new(&base);
    let (status, body) = anon.get("/pool");
    assert_eq!((status, error_code(&body)), (401, "unauthorized"));
    let (status, _) = anon.post("/fragments", json!({"text": "x"}));
    assert_eq!(status, 401);
    assert_eq!(anon.get("/health").0, 200);
    let wrong = Client::new(&base).with_token("nope");
    assert_eq!(wrong.get("/pool").0, 401);
    let authed = Client::new(&base).with_token("s3cret");
    assert_eq!(authed.get("/pool").0, 200);
    assert_eq!(authed.post("/fragments", json!({"text": "x"})).0, 201);
}

/// Fails the first `fail_first` attributions.
struct Flaky {
    calls: AtomicUsize,
    fail_first: usize,
}

impl Attributor for Flaky {
    fn strategy(&self) -> Strategy {
        Strategy::Uniform
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
            return Err(AttributionError::Judge("judge offline".into()));
        }
        Uniform.attribute(req)
    }
}

#[test]
fn deferred_feedback_is_retried_by_resubmitting() {
    let (_, c) = start(Components {
        attributor: Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 1,
        }),
        ..uniform_components()
    });
    add(&c, "Fed raises rates");
    let (_, session) = c.post("/sessions", json!({}));
    let sid = session["session_id"].as_u64().unwrap();
    let path = format!("/sessions/{sid}/feedback");
    let (_, before) = c.get_text("/pool/snapshot");

    let (status, body) = c.post(&path, json!({"rating": "like"}));
    assert_eq!((status, error_code(&body)), (503, "feedback_deferred"));
    assert_eq!(c.get_text("/pool/snapshot").1, before);
    assert_eq!(c.get(&format!("/sessions/{sid}")).1["pending_feedback"], true);

    let (status, body) = c.post(&path, json!({"rating": "dislike"}));
    assert_eq!((status, error_code(&body)), (409, "duplicate_feedback"));
    let (status, body) = c.post(&path, json!({"rating": "like"}));
    assert_eq!(status, 200, "{body}");
    assert_ne!(c.get_text("/pool/snapshot").1, before);
    let (status, _) = c.post(&path, json!({"rating": "like"}));
    assert_eq!(status, 409);
    assert_eq!(c.get("/metrics").1["feedback_deferred_total"], 1);
}

const IDENTIFIERS: [&str; 4] = ["u-7731-alice", "alice@example.com", "Alice Liddell", "10.1.2.3"];

#[test]
fn user_identifiers_are_never_persisted_or_returned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = coem::config::Config::default();
    cfg.service.data_dir = dir.path().to_path_buf();
    cfg.service.fsync = false;
    let svc = Arc::new(Service::from_config(&cfg).unwrap());
    let c = Client::new(&spawn_server(svc));
    let who = json!({
        "user_id": IDENTIFIERS[0],
        "email": IDENTIFIERS[1],
        "user": {"name": IDENTIFIERS[2], "ip": IDENTIFIERS[3]},
    });
    let mut responses = Vec::new();
    for (text, source) in [
        ("Fed raises rates by 25bp", "analyst"),
        ("BTC halving cuts issuance", "news"),
        ("Gold holds near record", "analyst"),
    ] {
        let mut body = who.clone();
        body["text"] = json!(text);
        body["source"] = json!(source);
        responses.push(c.post("/fragments", body).1);
    }
    for _ in 0..3 {
        let mut body = who.clone();
        body["user_input"] = json!("I think the Fed will pause. Miners look weak after the halving.");
        let (status, session) = c.post("/sessions", body);
        assert_eq!(status, 201, "{session}");
        let labels: Vec<&str> = session["cited"].as_array().unwrap().iter().map(|f| f["source"].as_str().unwrap()).collect();
        assert!(labels.iter().all(|l| l.starts_with('S')), "{labels:?}");
        assert!(!session.to_string().contains("analyst"));
        let sid = session["session_id"].as_u64().unwrap();
        let mut fb = who.clone();
        fb["rating"] = json!("like");
        let (status, resp) = c.post(&format!("/sessions/{sid}/feedback"), fb);
        assert_eq!(status, 200, "{resp}");
        responses.push(session);
        responses.push(resp);
    }
    for path in ["/pool?include_pruned=true", "/pool/stats", "/events?limit=1000", "/metrics", "/sessions/0", "/pool/snapshot"] {
        responses.push(Value::String(c.get_text(path).1));
    }
    let mut haystack: Vec<String> = responses.iter().map(Value::to_string).collect();
    for entry in fs::read_dir(dir.path()).unwrap() {
        haystack.push(fs::read_to_string(entry.unwrap().path()).unwrap());
    }
    for text in &haystack {
        for id in IDENTIFIERS {
            assert!(!text.contains(id), "{id} leaked into {text}");
        }
    }
    // the scan is not vacuous: the log holds the dialogue text itself
    assert!(haystack.iter().any(|t| t.contains("Miners look weak")));
}

#[test]
fn restart_replays_the_log_and_snapshot_matches_replay() {
    let dir = tempfile::tempdir().unwrap();
    let open = || Arc::new(Service::open(dir.path(), PoolConfig::default(), uniform_components(), false).unwrap());
    let svc = open();
    let c = Client::new(&spawn_server(svc.clone()));
    for i in 0..8 {
        add(&c, &format!("fact number {i}"));
    }
    for i in 0..12 {
        let (_, s) = c.post("/sessions", json!({"hint": format!("number {}", i % 8)}));
        let sid = s["session_id"].as_u64().unwrap();
        let rating = if i % 3 == 0 { "dislike" } else { "like" };
        assert_eq!(c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": rating})).0, 200);
    }
    let live = c.get_text("/pool/snapshot").1;

    let events = coem::journal::read_strict(&dir.path().join(EVENT_LOG_FILE)).unwrap();
    let replayed = EngineState::replay(PoolConfig::default(), &events).unwrap();
    assert_eq!(String::from_utf8(snapshot::snapshot_bytes(&replayed.state.pool)).unwrap(), live);

    drop(c);
    let again = open();
    assert_eq!(String::from_utf8(again.snapshot()).unwrap(), live);
    assert_eq!(again.events(), events);

    let other = PoolConfig {
        alpha: 0.1,
        ..PoolConfig::default()
    };
    assert!(Service::open(dir.path(), other, uniform_components(), false).is_err());
}

#[test]
fn concurrent_clients_keep_the_log_consistent() {
    let (svc, c) = start(uniform_components());
    for i in 0..20 {
        add(&c, &format!("fact number {i}"));
    }
    let base = c.base.clone();
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let base = base.clone();
            thread::spawn(move || {
                let c = Client::new(&base);
                for i in 0..10 {
                    let (status, s) = c.post("/sessions", json!({"hint": format!("number {}", (t + i) % 20)}));
                    assert_eq!(status, 201, "{s}");
                    let sid = s["session_id"].as_u64().unwrap();
                    let rating = if (t + i) % 4 == 0 { "dislike" } else { "like" };
                    let (status, _) = c.post(&format!("/sessions/{sid}/feedback"), json!({"rating": rating}));
                    assert!(status == 200 || status == 409, "{status}");
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let events = svc.events();
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
    }
    let replayed = EngineState::replay(PoolConfig::default(), &events).unwrap();
    assert_eq!(snapshot::snapshot_bytes(&replayed.state.pool), svc.snapshot());
    assert_eq!(c.get("/metrics").1["sessions"], 80);
}
