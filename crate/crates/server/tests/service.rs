mod common;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use objfind_core::encoder::{EncoderBackendConfig, PrecomputedEncoder};
use objfind_core::synthetic::SyntheticCorpus;
use objfind_server::config::ServiceConfig;
use objfind_server::service::{router, AppState, Engine, SearchResponse, API_VERSION};
use common::{synthetic_engine, synthetic_parts, ASSET_BASE};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const PROMPT: &str = "height adjustable office chair";

fn app(engine: Engine) -> Router {
    router(AppState::new(Some(engine), None, 4))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(Body::from(body.unwrap_or("").to_owned())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn search(app: &Router, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, "/api/search", Some(&body.to_string())).await
}

fn assert_error(status: StatusCode, body: &Value, expected: StatusCode, code: &str) {
    assert_eq!(status, expected, "{body}");
    assert_eq!(body["api_version"], API_VERSION);
    assert_eq!(body["error"]["code"], code, "{body}");
    assert!(!body["error"]["message"].as_str().unwrap().is_empty());
}

fn ids(body: &Value) -> Vec<String> {
    body["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["object_id"].as_str().unwrap().to_owned())
        .collect()
}

#[tokio::test]
async fn search_returns_default_k_ranked_results() {
    let app = app(synthetic_engine(30, 3));
    let (status, body) = search(&app, json!({ "query": PROMPT })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: SearchResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.api_version, API_VERSION);
    assert_eq!(resp.results.len(), 8);
    for (i, r) in resp.results.iter().enumerate() {
        assert_eq!(r.rank, i + 1);
        let expected = 0.5 * r.image_score + 0.5 * r.text_score;
        assert!((r.score - expected).abs() < 1e-12);
        assert_eq!(r.image_url.as_deref(), Some(format!("{ASSET_BASE}/images/{}.png", r.object_id).as_str()));
        assert_eq!(
            r.model_download_url.as_deref(),
            Some(format!("{ASSET_BASE}/models/{}.obj", r.object_id).as_str())
        );
        assert!(r.description.as_deref().unwrap().contains(&r.object_id));
    }
    for w in resp.results.windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].object_id < w[1].object_id));
    }
    assert!(resp.elapsed_ms >= 0.0);
}

#[tokio::test]
async fn search_matches_library_ranking() {
    let engine = synthetic_engine(30, 4);
    let query = objfind_core::index::SearchQuery::new(PROMPT, 5, 0.25).unwrap();
    let expected = engine
        .index
        .search_text(&query, &engine.heads, engine.encoder.as_ref())
        .unwrap();
    let app = app(engine);
    let (_, body) = search(&app, json!({ "query": PROMPT, "k": 5, "visual_focus": 0.25 })).await;
    let resp: SearchResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.results.len(), expected.len());
    for (got, want) in resp.results.iter().zip(&expected) {
        assert_eq!(got.object_id, want.object_id);
        assert!((got.score - want.score).abs() <= 1e-15);
    }
}

#[tokio::test]
async fn search_is_deterministic() {
    let app = app(synthetic_engine(30, 3));
    let body = json!({ "query": PROMPT, "k": 10, "visual_focus": 0.7 });
    let (_, first) = search(&app, body.clone()).await;
    for _ in 0..5 {
        let (_, again) = search(&app, body.clone()).await;
        assert_eq!(again["results"], first["results"]);
    }
}

#[tokio::test]
async fn search_response_is_byte_stable() {
    let app = app(synthetic_engine(30, 3));
    let (status, bytes) = call_raw(
        &app,
        Method::POST,
        "/api/search",
        Some(&json!({ "query": PROMPT, "k": 3, "visual_focus": 0.5 }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let mut value: Value = serde_json::from_slice(&bytes).unwrap();
    value.as_object_mut().unwrap().remove("elapsed_ms");
    let rendered = serde_json::to_string_pretty(&value).unwrap() + "\n";
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/search_response.json");
    if std::env::var_os("OBJFIND_UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &rendered).unwrap();
    }
    let expected = fs::read_to_string(&golden).expect("golden file; regenerate with OBJFIND_UPDATE_GOLDEN=1");
    assert_eq!(rendered, expected);
}

#[tokio::test]
async fn search_rejects_out_of_range_k() {
    let app = app(synthetic_engine(12, 3));
    for k in [0, -1, 11, 1000] {
        let (status, body) = search(&app, json!({ "query": PROMPT, "k": k })).await;
        assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
        assert!(body["error"]["message"].as_str().unwrap().contains("between 1 and 10"));
    }
    let (status, body) = search(&app, json!({ "query": PROMPT, "k": 10 })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ids(&body).len(), 10);
}

#[tokio::test]
async fn search_rejects_bad_visual_focus() {
    let app = app(synthetic_engine(12, 3));
    for alpha in [1.5, -0.1] {
        let (status, body) = search(&app, json!({ "query": PROMPT, "visual_focus": alpha })).await;
        assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
        assert!(body["error"]["message"].as_str().unwrap().contains("visual_focus"));
    }
    for alpha in [0.0, 1.0] {
        let (status, _) = search(&app, json!({ "query": PROMPT, "visual_focus": alpha })).await;
        assert_eq!(status, StatusCode::OK);
    }
}

#[tokio::test]
async fn search_rejects_malformed_requests() {
    let app = app(synthetic_engine(12, 3));
    let (status, body) = call(&app, Method::POST, "/api/search", Some("{not json")).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
    let (status, body) = search(&app, json!({ "k": 3 })).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
    let (status, body) = search(&app, json!({ "query": "   " })).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
    let (status, body) = search(&app, json!({ "query": PROMPT, "k": "five" })).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
}

#[tokio::test]
async fn similar_excludes_the_query_object() {
    let engine = synthetic_engine(30, 5);
    let expected = engine.index.search_similar("syn00007", 5).unwrap();
    let app = app(engine);
    let (status, body) = call(&app, Method::GET, "/api/similar/syn00007?k=5", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let got = ids(&body);
    assert_eq!(got.len(), 5);
    assert!(!got.contains(&"syn00007".to_owned()));
    assert_eq!(got, expected.iter().map(|r| r.object_id.clone()).collect::<Vec<_>>());
    let (_, body) = call(&app, Method::GET, "/api/similar/syn00007", None).await;
    assert_eq!(ids(&body).len(), 8);
}

#[tokio::test]
async fn similar_reports_unknown_ids_and_bad_k() {
    let app = app(synthetic_engine(12, 5));
    let (status, body) = call(&app, Method::GET, "/api/similar/nope", None).await;
    assert_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    for k in ["0", "11", "abc", "-2"] {
        let (status, body) = call(&app, Method::GET, &format!("/api/similar/syn00001?k={k}"), None).await;
        assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
    }
}

#[tokio::test]
async fn object_detail_returns_descriptions_and_links() {
    let mut engine = synthetic_engine(12, 6);
    engine.catalog.descriptions.remove("syn00004");
    let labeled = engine.catalog.descriptions_of("syn00002")[0].clone();
    let app = app(engine);

    let (status, body) = call(&app, Method::GET, "/api/objects/syn00002", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["object"]["object_id"], "syn00002");
    assert_eq!(body["descriptions"][0]["text"], labeled.text.as_str());
    assert_eq!(body["model_download_url"], format!("{ASSET_BASE}/models/syn00002.obj"));
    assert_eq!(body["image_url"], format!("{ASSET_BASE}/images/syn00002.png"));
    assert_eq!(body["indexed"], true);

    let (status, body) = call(&app, Method::GET, "/api/objects/syn00004", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["descriptions"], json!([]));

    let (status, body) = call(&app, Method::GET, "/api/objects/missing", None).await;
    assert_error(status, &body, StatusCode::NOT_FOUND, "not_found");
}

#[tokio::test]
async fn unlabeled_results_carry_no_description() {
    let mut engine = synthetic_engine(12, 6);
    engine.catalog.descriptions.clear();
    let app = app(engine);
    let (_, body) = search(&app, json!({ "query": PROMPT, "k": 10 })).await;
    for r in body["results"].as_array().unwrap() {
        assert!(r["description"].is_null());
    }
}

#[tokio::test]
async fn service_without_index_is_unavailable() {
    let app = router(AppState::new(None, None, 2));
    let (status, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "unavailable");
    let (status, body) = search(&app, json!({ "query": PROMPT })).await;
    assert_error(status, &body, StatusCode::SERVICE_UNAVAILABLE, "index_unavailable");
    let (status, body) = call(&app, Method::GET, "/api/similar/syn00001", None).await;
    assert_error(status, &body, StatusCode::SERVICE_UNAVAILABLE, "index_unavailable");
    let (status, body) = call(&app, Method::POST, "/api/reload", None).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST, "invalid_parameter");
}

#[tokio::test]
async fn health_reports_index_size() {
    let engine = synthetic_engine(17, 2);
    let version = engine.heads.version.clone();
    let app = app(engine);
    let (status, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["index_size"], 17);
    assert_eq!(body["heads_version"], version.as_str());
}

#[tokio::test]
async fn encoder_failure_maps_to_bad_gateway() {
    let (catalog, index, heads) = synthetic_parts(12, 7);
    let corpus = SyntheticCorpus::standard(12, 0.05, 7);
    let encoder = PrecomputedEncoder::new(Some(corpus.bases().images), None).unwrap();
    let engine = Engine::new(catalog, index, heads, Arc::new(encoder), ASSET_BASE).unwrap();
    let app = app(engine);
    let (status, body) = search(&app, json!({ "query": PROMPT })).await;
    assert_error(status, &body, StatusCode::BAD_GATEWAY, "encoder_failure");
    let (status, _) = call(&app, Method::GET, "/api/similar/syn00001", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn engine_rejects_mismatched_heads() {
    let (catalog, index, _) = synthetic_parts(6, 1);
    let other = objfind_core::associate::ProjectionHeads::random_standard(99);
    let encoder = Arc::new(objfind_core::encoder::MockEncoder::new(0));
    assert!(Engine::new(catalog, index, other, encoder, ASSET_BASE).is_err());
}

fn write_artifacts(dir: &Path, n: usize, seed: u64) -> String {
    let (catalog, index, heads) = synthetic_parts(n, seed);
    fs::write(dir.join("catalog.json"), catalog.to_json()).unwrap();
    index
        .write_to(BufWriter::new(File::create(dir.join("index.objf")).unwrap()))
        .unwrap();
    heads
        .write_to(BufWriter::new(File::create(dir.join("heads.ckpt")).unwrap()), "test")
        .unwrap();
    heads.version
}

fn service_config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:0".into(),
        index_path: dir.join("index.objf"),
        heads_path: dir.join("heads.ckpt"),
        catalog_path: dir.join("catalog.json"),
        encoder: EncoderBackendConfig::mock(0),
        asset_base_url: ASSET_BASE.into(),
        max_inflight_encodes: 2,
    }
}

#[tokio::test]
async fn reload_swaps_in_new_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let first = write_artifacts(dir.path(), 10, 1);
    let (state, err) = AppState::from_config(service_config(dir.path()));
    assert!(err.is_none());
    let app = router(state.clone());
    let (_, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(body["heads_version"], first.as_str());
    assert_eq!(body["generation"], 1);

    let second = write_artifacts(dir.path(), 14, 2);
    assert_ne!(first, second);
    let (status, body) = call(&app, Method::POST, "/api/reload", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["generation"], 2);
    assert_eq!(body["index_size"], 14);
    let (_, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(body["heads_version"], second.as_str());

    fs::remove_file(dir.path().join("index.objf")).unwrap();
    let (status, body) = call(&app, Method::POST, "/api/reload", None).await;
    assert_error(status, &body, StatusCode::INTERNAL_SERVER_ERROR, "internal");
    let (_, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(body["heads_version"], second.as_str());
    assert_eq!(state.generation(), 2);
}

#[tokio::test]
async fn missing_artifacts_start_the_service_unloaded() {
    let dir = tempfile::tempdir().unwrap();
    let (state, err) = AppState::from_config(service_config(dir.path()));
    assert!(err.unwrap().to_string().contains("index.objf"));
    let app = router(state);
    let (status, _) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    write_artifacts(dir.path(), 8, 3);
    let (status, _) = call(&app, Method::POST, "/api/reload", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, body) = search(&app, json!({ "query": PROMPT })).await;
    assert_eq!(ids(&body).len(), 8);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_searches_all_complete() {
    let state = AppState::new(Some(synthetic_engine(20, 8)), None, 1);
    let app = router(state);
    let mut tasks = Vec::new();
    for i in 0..12 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            search(&app, json!({ "query": format!("chair number {i}"), "k": 4 })).await
        }));
    }
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ids(&body).len(), 4);
    }
}
