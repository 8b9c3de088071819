use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use tsdiff_core::bases::generate_base_signals;
use tsdiff_core::nn::{DualEncoder, EncoderConfig, Vocab};
use tsdiff_core::perturb::{generate_dataset, PairSample, SplitCounts};
use tsdiff_core::query::generate_query_pool;
use tsdiff_core::retrieval::{build_index, search as core_search};
use tsdiff_service::{router, AppState, Loaded};

fn tiny_model(vocab: Vocab) -> DualEncoder<f32> {
    let cfg = EncoderConfig {
        embed_dim: 16,
        series_length: 64,
        patch_size: 8,
        transformer_layers: 1,
        transformer_heads: 2,
        transformer_ff: 16,
        text_layers: 1,
        text_heads: 2,
        text_ff: 16,
        ..Default::default()
    };
    DualEncoder::new(cfg, vocab, 5).unwrap()
}

fn fixture() -> (DualEncoder<f32>, Vec<PairSample>) {
    let bases = generate_base_signals(20, 64, 1).unwrap();
    let counts = SplitCounts {
        train: 2,
        val: 1,
        test: 30,
    };
    let pairs = generate_dataset(&bases, counts, 1).unwrap().test;
    let pool = generate_query_pool(5, 1).unwrap();
    let model = tiny_model(Vocab::build(pool.iter().map(|q| q.text.as_str())));
    (model, pairs)
}

fn ready_state() -> AppState {
    let (model, pairs) = fixture();
    let index = build_index(&model, &pairs).unwrap();
    AppState::ready(Loaded::new(model, index, pairs).unwrap())
}

async fn call(state: AppState, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn post_search(body: Value) -> Request<Body> {
    Request::post("/search")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

const NOISE_QUERY: &str = "The target data has larger noise than the reference data.";

#[tokio::test]
async fn search_returns_k_results_in_descending_order() {
    let state = ready_state();
    let (status, body) = call(state, post_search(json!({"query": NOISE_QUERY, "k": 5}))).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    let scores: Vec<f64> = results
        .iter()
        .map(|r| r["score"].as_f64().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(results[0]["ref_preview"].as_array().unwrap().len() <= 512);
    assert!(body["fingerprint"].is_string());
}

#[tokio::test]
async fn default_k_is_ten() {
    let (status, body) = call(ready_state(), post_search(json!({"query": NOISE_QUERY}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["results"].as_array().unwrap().len(), 10);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    for body in [
        json!({"query": NOISE_QUERY, "k": 0}),
        json!({"query": NOISE_QUERY, "k": 31}),
        json!({"query": "   ", "k": 3}),
    ] {
        let (status, v) = call(ready_state(), post_search(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn loading_state_answers_503_and_health_reports_it() {
    let state = AppState::new();
    let (status, _) = call(state.clone(), post_search(json!({"query": NOISE_QUERY}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(state.clone(), get("/pairs/test-000000")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (_, h) = call(state.clone(), get("/health")).await;
    assert_eq!(h["status"], "loading");
    let (model, pairs) = fixture();
    let index = build_index(&model, &pairs).unwrap();
    state.set_ready(Loaded::new(model, index, pairs).unwrap());
    let (_, h) = call(state, get("/health")).await;
    assert_eq!(h["status"], "ready");
    assert_eq!(h["index_size"], 30);
}

#[tokio::test]
async fn pair_lookup_returns_full_resolution_samples() {
    let (_, pairs) = fixture();
    let (status, body) = call(ready_state(), get("/pairs/test-000003")).await;
    assert_eq!(status, StatusCode::OK);
    let reference: Vec<f64> = serde_json::from_value(body["reference"].clone()).unwrap();
    let target: Vec<f64> = serde_json::from_value(body["target"].clone()).unwrap();
    assert_eq!(reference.len(), 64);
    assert_eq!(reference, pairs[3].reference.values());
    assert_eq!(target, pairs[3].target.values());
    let (status, _) = call(ready_state(), get("/pairs/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn labels_endpoint_lists_twelve_relationships() {
    let (status, body) = call(AppState::new(), get("/labels")).await;
    assert_eq!(status, StatusCode::OK);
    let rows = body.as_array().unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0]["label"], 1);
    assert_eq!(rows[0]["characteristic"], "UpwardTrend");
    assert_eq!(rows[0]["direction"], "Larger");
    assert_eq!(rows[8]["template"], NOISE_QUERY);
}

#[tokio::test]
async fn scores_match_core_search_bit_for_bit_and_repeat() {
    let (model, pairs) = fixture();
    let index = build_index(&model, &pairs).unwrap();
    let q = model.embed_texts(&[NOISE_QUERY]).unwrap();
    let expected = core_search(&index, &q[0], 7).unwrap();
    let state = AppState::ready(Loaded::new(model, index, pairs).unwrap());
    let (_, a) = call(
        state.clone(),
        post_search(json!({"query": NOISE_QUERY, "k": 7})),
    )
    .await;
    let (_, b) = call(state, post_search(json!({"query": NOISE_QUERY, "k": 7}))).await;
    assert_eq!(a["results"], b["results"]);
    for (r, h) in a["results"].as_array().unwrap().iter().zip(&expected.hits) {
        assert_eq!(r["pair_id"], h.pair_id.as_str());
        assert_eq!(r["score"].as_f64().unwrap().to_bits(), h.score.to_bits());
    }
}

#[test]
fn mismatched_index_is_refused() {
    let (model, pairs) = fixture();
    let mut index = build_index(&model, &pairs).unwrap();
    index.fingerprint = "0000".into();
    assert!(Loaded::new(model, index, pairs[..3].to_vec()).is_err());
}
