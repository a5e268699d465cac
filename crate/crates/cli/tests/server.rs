use std::io::Cursor;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::SeedableRng;
use serde_json::{json, Value};
use tower::ServiceExt;

use mmgpt_cli::commands::{chat_repl, decoding, TurnReply};
use mmgpt_cli::server::{router, AppState};
use mmgpt_core::chat::ChatModel;
use mmgpt_core::dataops::synth_scene;
use mmgpt_core::model::{Decoding, Model, ModelConfig};
use mmgpt_core::templates::PREAMBLE;
use mmgpt_core::tokenizer::Vocab;

fn engine() -> ChatModel {
    let corpus = [
        PREAMBLE,
        "### Image: ### Instruction: ### Response: How many squares are there?",
        "What color are they? Describe the picture. Tell me more.",
    ];
    let vocab = Vocab::build(corpus, 300).unwrap();
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.max_seq_len = 128;
    let mut e = ChatModel::new(Model::new(cfg).unwrap(), vocab);
    e.max_new = 5;
    e
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn new_session(app: &axum::Router, body: &str) -> String {
    let (s, v) = call(app, "POST", "/api/v1/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn scene_text() -> String {
    synth_scene(&mut rand_chacha::ChaCha8Rng::seed_from_u64(9)).to_text()
}

#[tokio::test]
async fn health_reports_model() {
    let e = engine();
    let summary = e.model.cfg.summary();
    let app = router(AppState::new(e));
    let (s, v) = call(&app, "GET", "/api/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "model": summary}));
}

#[tokio::test]
async fn sessions_are_fresh_and_isolated() {
    let app = router(AppState::new(engine()));
    let a = new_session(&app, "{}").await;
    let b = new_session(&app, "").await;
    assert_ne!(a, b);
    let (s, v) = call(&app, "POST", &format!("/api/v1/sessions/{a}/message"), Some(r#"{"text":"Tell me more."}"#)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["round_index"], 0);
    let (_, v) = call(&app, "POST", &format!("/api/v1/sessions/{a}/message"), Some(r#"{"text":"Describe the picture."}"#)).await;
    assert_eq!(v["round_index"], 1);

    let (_, ga) = call(&app, "GET", &format!("/api/v1/sessions/{a}"), None).await;
    let (_, gb) = call(&app, "GET", &format!("/api/v1/sessions/{b}"), None).await;
    assert_eq!(ga["history"].as_array().unwrap().len(), 2);
    assert_eq!(ga["history"][0]["instruction"], "Tell me more.");
    assert_eq!(ga["history"][1]["response"], v["response"]);
    assert_eq!(gb["history"], json!([]));
    assert!(ga.get("image").is_none());
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = router(AppState::new(engine()));
    let (s, _) = call(&app, "GET", "/api/v1/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/v1/sessions/nope/message", Some(r#"{"text":"hi"}"#)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = new_session(&app, "{}").await;
    let uri = format!("/api/v1/sessions/{id}/message");
    for bad in ["{not json", r#"{"txt":"hi"}"#, "{}", r#"{"text":5}"#, r#"{"text":"  "}"#] {
        let (s, v) = call(&app, "POST", &uri, Some(bad)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}: {v}");
        assert!(v["error"].is_string());
    }
    let (s, _) = call(&app, "POST", "/api/v1/sessions", Some(r#"{"image":"/missing.toyimg"}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/v1/sessions", Some("[1,2]")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let long = "Describe the picture. ".repeat(60);
    let (s, v) = call(&app, "POST", &uri, Some(&json!({ "text": long }).to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "context_overflow");
    let (_, g) = call(&app, "GET", &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(g["history"], json!([]));
}

#[tokio::test]
async fn service_replays_cli_chat() {
    let e = engine();
    let img = scene_text();
    let turns = ["How many squares are there?", "What color are they?", "Describe the picture."];

    let mut out = Vec::new();
    let input = turns.join("\n");
    let cli_session = chat_repl(&e, Some(&img), Decoding::Greedy, true, Cursor::new(input), &mut out).unwrap();
    let cli: Vec<TurnReply> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(cli.len(), 3);

    let app = router(AppState::new(e.clone()));
    let id = new_session(&app, &json!({ "image": img }).to_string()).await;
    for (i, t) in turns.iter().enumerate() {
        let (s, v) = call(&app, "POST", &format!("/api/v1/sessions/{id}/message"), Some(&json!({ "text": t }).to_string())).await;
        assert_eq!(s, StatusCode::OK);
        let reply: TurnReply = serde_json::from_value(v).unwrap();
        assert_eq!(reply, cli[i]);
    }
    let (_, g) = call(&app, "GET", &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(g["image"], "<inline>");
    assert_eq!(g["history"], serde_json::to_value(&cli_session.history).unwrap());

    // Sampled decoding is reproducible from the request seed as well.
    let body = json!({ "text": turns[0], "temperature": 1.3, "seed": 4 }).to_string();
    let a = new_session(&app, "{}").await;
    let b = new_session(&app, "{}").await;
    let (_, ra) = call(&app, "POST", &format!("/api/v1/sessions/{a}/message"), Some(&body)).await;
    let (_, rb) = call(&app, "POST", &format!("/api/v1/sessions/{b}/message"), Some(&body)).await;
    assert_eq!(ra, rb);
    let mut out = Vec::new();
    chat_repl(&e, None, decoding(Some(1.3), Some(4)), true, Cursor::new(turns[0]), &mut out).unwrap();
    let cli: TurnReply = serde_json::from_slice(out.trim_ascii_end()).unwrap();
    assert_eq!(serde_json::to_value(cli).unwrap(), ra);
}

#[tokio::test]
async fn malformed_session_images_rejected() {
    let app = router(AppState::new(engine()));
    let (s, v) = call(&app, "POST", "/api/v1/sessions", Some(&json!({ "image": "TOYIMG v1 2 2 3\n0 0" }).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    let (s, _) = call(&app, "POST", "/api/v1/sessions", Some(r#"{"image":"x","extra":1}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
