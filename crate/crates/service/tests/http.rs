use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use prefqrels_core::ids::{ItemId, QueryId};
use prefqrels_core::judgment_log::JudgmentLog;
use prefqrels_core::tasking::{
    assemble_tasks, ExclusionList, ExportedPair, ExportedTask, JudgmentPair, QcBank, QcEntry, TaskConfig,
};
use prefqrels_service::{router, ManualClock, Service, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const RELEVANT: &str = "a clear answer";
const DISTRACTOR: &str = "unrelated text";

fn tasks(n_real: usize) -> Vec<ExportedTask> {
    let q = |s: String| QueryId::new(s).unwrap();
    let d = |s: &str| ItemId::new(s).unwrap();
    let pairs: Vec<JudgmentPair> = (0..n_real)
        .map(|i| JudgmentPair::real(&q(format!("q{i}")), &d("a"), &d("b")))
        .collect();
    let bank = QcBank {
        entries: (0..5)
            .map(|i| QcEntry {
                query: q(format!("c{i}")),
                relevant: d("rel"),
                distractor: d("junk"),
            })
            .collect(),
    };
    let text = |item: &ItemId| match item.as_str() {
        "rel" => RELEVANT.to_string(),
        "junk" => DISTRACTOR.to_string(),
        other => format!("passage {other}"),
    };
    assemble_tasks(&pairs, &bank, &TaskConfig::with_seed(11), None)
        .unwrap()
        .into_iter()
        .map(|t| ExportedTask {
            task_id: t.task_id.clone(),
            seed: t.seed,
            created_at: None,
            attempt: t.attempt,
            pairs: t
                .pairs
                .iter()
                .map(|p| ExportedPair {
                    query_text: format!("question {}", p.query),
                    left_text: text(&p.left),
                    right_text: text(&p.right),
                    pair: p.clone(),
                })
                .collect(),
        })
        .collect()
}

fn app(n_real: usize) -> (Router, Arc<Service>) {
    let svc = Arc::new(Service::new(
        tasks(n_real),
        JudgmentLog::in_memory(1),
        ExclusionList::in_memory(),
        Arc::new(ManualClock::new(1_000)),
        ServiceConfig::default(),
    ));
    (router(svc.clone(), false), svc)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn open_session(app: &Router, assessor: &str) -> String {
    let (status, body) = call(app, Method::POST, "/sessions", Some(json!({ "assessor": assessor }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// Answers every pair, picking the relevant side of QC pairs unless
/// `fail_qc`, and returns the final acknowledgement.
async fn complete(app: &Router, id: &str, fail_qc: bool) -> Value {
    let mut last = Value::Null;
    let mut failed = false;
    loop {
        let (status, next) = call(app, Method::GET, &format!("/sessions/{id}/next"), None).await;
        assert_eq!(status, StatusCode::OK);
        if next["status"] == "done" {
            return last;
        }
        let left = next["left"].as_str().unwrap();
        let right = next["right"].as_str().unwrap();
        let mut choice = if right == RELEVANT { "right" } else { "left" };
        if fail_qc && !failed && (left == RELEVANT || right == RELEVANT) {
            choice = if choice == "left" { "right" } else { "left" };
            failed = true;
        }
        let (status, ack) = call(
            app,
            Method::POST,
            &format!("/sessions/{id}/answer"),
            Some(json!({ "pair_index": next["index"], "choice": choice })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{ack}");
        last = ack;
    }
}

#[tokio::test]
async fn consent_gates_pairs() {
    let (app, _) = app(10);
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({ "assessor": "w1" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["state"], "consent_pending");
    assert_eq!(body["total"], 0);
    assert!(body.get("pairs").is_none());
    let id = body["session_id"].as_str().unwrap();

    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"], "active");
    assert_eq!(body["total"], 13);

    let (status, first) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["index"], 0);
    let (_, again) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(first, again);
}

#[tokio::test]
async fn pair_payload_is_blind() {
    let (app, _) = app(10);
    let id = open_session(&app, "w1").await;
    call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    for i in 0..13 {
        let (_, next) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
        let mut keys: Vec<&str> = next.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["index", "left", "query", "right", "status", "total"]);
        let text = next.to_string();
        for leak in ["qc", "kind", "real", "pair_id", "flipped", "replica"] {
            assert!(!text.contains(&format!("\"{leak}")), "{text}");
        }
        call(
            &app,
            Method::POST,
            &format!("/sessions/{id}/answer"),
            Some(json!({ "pair_index": i, "choice": "left" })),
        )
        .await;
    }
}

#[tokio::test]
async fn accepted_task_commits_ten_judgments() {
    let (app, svc) = app(10);
    let id = open_session(&app, "w1").await;
    call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    let ack = complete(&app, &id, false).await;
    assert_eq!(ack["state"], "completed");
    assert_eq!(ack["index"], 13);
    assert_eq!(svc.with_log(|l| l.preference_set().len()), 10);

    let (_, progress) = call(&app, Method::GET, "/admin/progress", None).await;
    assert_eq!(progress["real_pairs_judged"], 10);
    assert_eq!(progress["real_pairs_remaining"], 0);
    assert_eq!(progress["tasks_accepted"], 1);

    let (_, pay) = call(&app, Method::GET, "/admin/payments", None).await;
    assert_eq!(pay, json!([{ "assessor": "w1", "tasks_accepted": 1, "tasks_rejected": 0, "tasks_abandoned": 0, "pairs_answered": 13 }]));
}

#[tokio::test]
async fn failed_qc_commits_nothing_and_requeues() {
    let (app, svc) = app(10);
    let id = open_session(&app, "w1").await;
    call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    let ack = complete(&app, &id, true).await;
    assert_eq!(ack["state"], "rejected");
    assert_eq!(svc.with_log(|l| l.preference_set().len()), 0);

    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({ "assessor": "w1" }))).await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let other = open_session(&app, "w2").await;
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{other}/consent"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(complete(&app, &other, false).await["state"], "completed");
    assert_eq!(svc.with_log(|l| l.preference_set().len()), 10);
}

#[tokio::test]
async fn out_of_order_and_unknown() {
    let (app, _) = app(10);
    let id = open_session(&app, "w1").await;
    call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    let answer = |i: usize, c: &str| json!({ "pair_index": i, "choice": c });
    let uri = format!("/sessions/{id}/answer");
    assert_eq!(call(&app, Method::POST, &uri, Some(answer(3, "left"))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, Method::POST, &uri, Some(answer(0, "left"))).await.0, StatusCode::OK);
    assert_eq!(call(&app, Method::POST, &uri, Some(answer(0, "left"))).await.0, StatusCode::OK);
    assert_eq!(call(&app, Method::POST, &uri, Some(answer(0, "right"))).await.0, StatusCode::CONFLICT);
    let (status, body) = call(&app, Method::POST, &uri, Some(json!({ "choice": "tie" }))).await;
    assert!(status.is_client_error(), "{body}");
    assert_eq!(
        call(&app, Method::GET, "/sessions/nope/next", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn abandon_midway() {
    let (app, svc) = app(10);
    let id = open_session(&app, "w1").await;
    call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
    for i in 0..5 {
        call(
            &app,
            Method::POST,
            &format!("/sessions/{id}/answer"),
            Some(json!({ "pair_index": i, "choice": "right" })),
        )
        .await;
    }
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/abandon"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"], "abandoned");
    assert_eq!(body["index"], 5);
    assert_eq!(svc.with_log(|l| l.preference_set().len()), 0);
    let (_, pay) = call(&app, Method::GET, "/admin/payments", None).await;
    assert_eq!(pay[0]["pairs_answered"], 5);
    let (_, progress) = call(&app, Method::GET, "/admin/progress", None).await;
    assert_eq!(progress["tasks_queued"], 1);

    // declining before consent never reveals a pair
    let other = open_session(&app, "w2").await;
    let (_, body) = call(&app, Method::POST, &format!("/sessions/{other}/abandon"), None).await;
    assert_eq!(body["state"], "abandoned");
    assert_eq!(
        call(&app, Method::GET, &format!("/sessions/{other}/next"), None).await.0,
        StatusCode::CONFLICT
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_checkout_is_exclusive() {
    let (app, _) = app(50);
    let mut handles = Vec::new();
    for w in 0..20 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let id = open_session(&app, &format!("w{w}")).await;
            let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/consent"), None).await;
            (status, id, body)
        }));
    }
    let mut ok = 0;
    for h in handles {
        let (status, _, _) = h.await.unwrap();
        if status == StatusCode::OK {
            ok += 1;
        } else {
            assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        }
    }
    assert_eq!(ok, 5);
    let (_, progress) = call(&app, Method::GET, "/admin/progress", None).await;
    assert_eq!(progress["tasks_active"], 5);
    assert_eq!(progress["tasks_queued"], 0);
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let svc = Arc::new(Service::new(
        tasks(10),
        JudgmentLog::in_memory(1),
        ExclusionList::in_memory(),
        Arc::new(ManualClock::new(0)),
        ServiceConfig::default(),
    ));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(prefqrels_service::serve(listener, svc, true, async {
        rx.await.ok();
    }));

    let body = r#"{"assessor":"tcp"}"#;
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "POST /sessions HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");
    assert!(resp.contains("consent_pending"));

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
