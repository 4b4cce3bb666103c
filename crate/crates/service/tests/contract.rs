//! HTTP contract of the session service, driven in-process.

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use homodiv_core::config::GlobalConfig;
use homodiv_service::session::{Event, Session};
use homodiv_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const FAST: &[&str] = &[
    "scorer.dim=96",
    "inversion.steps=25",
    "expansion.pool_size=12",
    "filter.select_count=4",
];

fn config(dir: &Path) -> GlobalConfig {
    let mut overrides = vec![format!("paths.data_dir={}", dir.display())];
    overrides.extend(FAST.iter().map(|s| s.to_string()));
    let mut c = GlobalConfig::resolve(None, &[], &overrides).unwrap();
    c.force_mock();
    c
}

fn app(dir: &Path) -> (AppState, Router) {
    let c = config(dir);
    let state = AppState::open(&c, c.build_stack().unwrap()).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

async fn create(app: &Router, mode: &str, scenario: Option<&str>) -> Value {
    let mut b = json!({"user_id": "u1", "mode": mode});
    if let Some(s) = scenario {
        b["scenario_id"] = json!(s);
    }
    let (st, v) = call(app, Method::POST, "/sessions", Some(b)).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v
}

/// Submits a prompt and waits for the round to leave `pending`.
async fn round(app: &Router, id: &str, prompt: &str) -> Value {
    let (st, h) = call(app, Method::POST, &format!("/sessions/{id}/prompts"), Some(json!({"prompt": prompt}))).await;
    assert_eq!(st, StatusCode::ACCEPTED, "{h}");
    assert_eq!(h["status"], "pending");
    let poll = h["poll_url"].as_str().unwrap().to_string();
    for _ in 0..2400 {
        let (st, r) = call(app, Method::GET, &poll, None).await;
        assert_eq!(st, StatusCode::OK);
        if r["status"] != "pending" {
            return r;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("round did not finish");
}

fn shown(round: &Value) -> Vec<String> {
    let mut ids: Vec<String> = round["generation"]["images"]["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["content_hash"].as_str().unwrap().to_string())
        .collect();
    if let Some(e) = round["expansion"].as_object() {
        ids.extend(
            e["selected_images"]["images"]
                .as_array()
                .unwrap()
                .iter()
                .map(|h| h["content_hash"].as_str().unwrap().to_string()),
        );
    }
    ids
}

async fn rate(app: &Router, id: &str, sat: u8, most: &str, least: &str) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/sessions/{id}/feedback"),
        Some(json!({"satisfaction": sat, "most_preferred": most, "least_preferred": least})),
    )
    .await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let (st, v) = call(&app, Method::POST, "/sessions", Some(json!({"user_id": "u", "mode": "turbo"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "validation");
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"user_id": "../x", "mode": "base"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"mode": "base"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scenario_sessions_start_from_the_fixed_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let a = create(&app, "base", Some("S3")).await;
    let b = create(&app, "poet", Some("S3")).await;
    assert_eq!(a["scenario"]["initial_prompt"], "Design a video game superhero character that is relatable.");
    assert_ne!(a["session_id"], b["session_id"]);
    // fixed seeds: both sessions see the same starting images
    assert_eq!(a["initial_images"]["images"], b["initial_images"]["images"]);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({"user_id": "u", "mode": "base", "scenario_id": "S9"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn mode_decides_whether_rounds_expand() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let base = create(&app, "base", None).await;
    let r = round(&app, base["session_id"].as_str().unwrap(), "A chef cooking a meal").await;
    assert_eq!(r["status"], "completed", "{r}");
    assert!(r["expansion"].is_null());
    assert_eq!(r["generation"]["images"]["images"].as_array().unwrap().len(), 4);

    let poet = create(&app, "poet", None).await;
    let r = round(&app, poet["session_id"].as_str().unwrap(), "A chef cooking a meal").await;
    assert_eq!(r["status"], "completed", "{r}");
    let e = &r["expansion"];
    assert!(!e["t1"].as_str().unwrap().is_empty());
    assert_eq!(e["inversion"]["token_ids"].as_array().unwrap().len(), 15);
    assert_eq!(e["selected_images"]["images"].as_array().unwrap().len(), 4);

    // images are served from the store
    let id = &shown(&r)[0];
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/images/{id}")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let (st, _) = call(&app, Method::GET, "/images/zz", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, Method::GET, &format!("/images/{}", "0".repeat(64)), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn six_rounds_then_capped_and_finalize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app(dir.path());
    let s = create(&app, "base", None).await;
    let id = s["session_id"].as_str().unwrap();

    let (st, v) = rate(&app, id, 3, "a", "b").await;
    assert_eq!(st, StatusCode::CONFLICT, "{v}");

    let mut first = Vec::new();
    for k in 0..6 {
        let r = round(&app, id, &format!("A chef cooking a meal, take {k}")).await;
        assert_eq!(r["round_index"], k);
        let ids = shown(&r);
        if k == 0 {
            first = ids.clone();
        }
        // a prompt before feedback is refused
        let (st, v) = call(&app, Method::POST, &format!("/sessions/{id}/prompts"), Some(json!({"prompt": "x"}))).await;
        assert_eq!(st, StatusCode::CONFLICT);
        assert_eq!(v["error"]["kind"], "feedback_required");
        let (st, v) = rate(&app, id, 2, &ids[0], &first[1]).await;
        assert_eq!(st, StatusCode::OK, "{v}");
    }
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["status"], "capped");
    let (st, v) = call(&app, Method::POST, &format!("/sessions/{id}/prompts"), Some(json!({"prompt": "x"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "session_capped");

    let fin = json!({"favorite_image": first[0], "final_satisfaction": 5.5});
    let (st, a) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(fin.clone())).await;
    assert_eq!(st, StatusCode::OK, "{a}");
    let other = json!({"favorite_image": first[1], "final_satisfaction": 2.0});
    let (st, b) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(other)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a, b);
    let finals = state
        .event_store()
        .read(id)
        .unwrap()
        .iter()
        .filter(|e| matches!(e, Event::Finalized { .. }))
        .count();
    assert_eq!(finals, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn satisfaction_six_ends_and_finalize_checks_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let s = create(&app, "base", None).await;
    let id = s["session_id"].as_str().unwrap();
    let r = round(&app, id, "A poet by the sea").await;
    let ids = shown(&r);
    let fin = |img: &str, score: f64| json!({"favorite_image": img, "final_satisfaction": score});
    let (st, v) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(fin(&ids[0], 6.0))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "not_finalizable");

    let (st, _) = rate(&app, id, 8, &ids[0], &ids[1]).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = rate(&app, id, 6, &ids[0], &ids[0]).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = rate(&app, id, 6, &ids[0], &"f".repeat(64)).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, v) = rate(&app, id, 6, &ids[0], &ids[1]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["session_status"], "satisfied");

    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(fin(&ids[0], 10.5))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(fin("nope", 5.0))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, v) = call(&app, Method::POST, &format!("/sessions/{id}/finalize"), Some(fin(&ids[2], 5.0))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["favorite_image"], ids[2].as_str());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn personalize_mode_needs_picks_and_accepts_earlier_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app(dir.path());
    let s = create(&app, "base_personalize", None).await;
    let id = s["session_id"].as_str().unwrap();
    let r0 = round(&app, id, "A chef cooking a meal").await;
    let first = shown(&r0);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({"satisfaction": 3}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = rate(&app, id, 3, &first[0], &first[1]).await;
    assert_eq!(st, StatusCode::OK);
    let r1 = round(&app, id, "A chef cooking a meal at night").await;
    let second = shown(&r1);
    let (st, _) = rate(&app, id, 4, &second[0], &first[2]).await;
    assert_eq!(st, StatusCode::OK);
    let r2 = round(&app, id, "A chef cooking a meal outdoors").await;
    assert_eq!(r2["status"], "completed");
    // a round-0 image cited in round 2
    let (st, v) = rate(&app, id, 5, &first[3], &shown(&r2)[0]).await;
    assert_eq!(st, StatusCode::OK, "{v}");

    let profile: Value =
        serde_json::from_slice(&std::fs::read(state.profile_path("u1")).unwrap()).unwrap();
    assert_eq!(profile["history"].as_array().unwrap().len(), 3);
    assert_eq!(profile["history"][2]["most_preferred"], first[3].as_str());
    assert!(!profile["image_pattern_notes"].as_array().unwrap().is_empty());

    // plain base sessions accept ratings without picks
    let b = create(&app, "base", None).await;
    let bid = b["session_id"].as_str().unwrap();
    round(&app, bid, "A chef").await;
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{bid}/feedback"), Some(json!({"satisfaction": 3}))).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn poet_personalize_round_completes_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let s = create(&app, "poet_personalize", None).await;
    let id = s["session_id"].as_str().unwrap();
    let r = round(&app, id, "A scientist in a laboratory").await;
    let ids = shown(&r);
    let (st, _) = rate(&app, id, 2, &ids[5], &ids[0]).await;
    assert_eq!(st, StatusCode::OK);
    let r = round(&app, id, "A scientist in a laboratory").await;
    assert_eq!(r["status"], "completed", "{r}");
    assert!(r["expansion"]["scored_pool"]["selected"].as_array().unwrap().len() <= 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replaying_the_log_rebuilds_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let id;
    let before: Value;
    {
        let (_, app) = app(dir.path());
        let s = create(&app, "base", Some("S1")).await;
        id = s["session_id"].as_str().unwrap().to_string();
        let r = round(&app, &id, "A barista at work").await;
        let ids = shown(&r);
        rate(&app, &id, 4, &ids[0], &ids[1]).await;
        round(&app, &id, "A barista at work, smiling").await;
        before = call(&app, Method::GET, &format!("/sessions/{id}"), None).await.1;
    }
    let (state, app) = app(dir.path());
    let after = call(&app, Method::GET, &format!("/sessions/{id}"), None).await.1;
    assert_eq!(before, after);
    let events = state.event_store().read(&id).unwrap();
    let replayed = Session::replay(&events).unwrap();
    assert_eq!(serde_json::to_value(&replayed).unwrap(), after);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interrupted_round_is_failed_on_restart_and_retried_in_place() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path());
    let id = {
        let (_, app) = app(dir.path());
        create(&app, "base", None).await["session_id"].as_str().unwrap().to_string()
    };
    // simulate a crash after the round started
    let store = homodiv_service::store::EventStore::open(c.data_dir().join("sessions")).unwrap();
    store
        .append(&id, &Event::RoundStarted { round_index: 0, prompt: "A chef".into() })
        .unwrap();
    let (_, app) = app(dir.path());
    let (_, r) = call(&app, Method::GET, &format!("/sessions/{id}/rounds/0"), None).await;
    assert_eq!(r["status"], "failed");
    let r = round(&app, &id, "A chef").await;
    assert_eq!(r["round_index"], 0);
    assert_eq!(r["status"], "completed");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_bodies_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path());
    let s = create(&app, "base", None).await;
    let id = s["session_id"].as_str().unwrap();
    let req = Request::post(format!("/sessions/{id}/prompts"))
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/prompts"), Some(json!({"prompt": "   "}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}
