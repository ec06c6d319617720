mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use recovery_service::posterior::{LoadedPosterior, SAMPLES_FILE};
use recovery_service::server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn loaded_app() -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(Some(common::fixture().fit.clone())));
    state.reload().unwrap();
    (router(state.clone()), state)
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn no_posterior_gives_conflict() {
    let app = router(Arc::new(AppState::new(None)));
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["fit_id"].is_null());
    let (status, _) = call(&app, "POST", "/predict", Some(json!({ "age": 60, "pre_treatment": 0.5 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", "/reload", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn classes_list_bins_and_edges() {
    let app = router(Arc::new(AppState::new(None)));
    let (status, body) = call(&app, "GET", "/classes", None).await;
    assert_eq!(status, StatusCode::OK);
    let classes = body.as_array().unwrap();
    assert_eq!(classes.len(), 12);
    let edges = |key: &str| {
        let mut v: Vec<f64> =
            classes.iter().flat_map(|c| c[key].as_array().unwrap().iter().filter_map(Value::as_f64)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    assert_eq!(edges("age_range"), [55.0, 65.0]);
    assert_eq!(edges("init_range"), [0.0, 0.41, 0.60, 0.80, 1.0]);
    for (i, c) in classes.iter().enumerate() {
        assert_eq!(c["index"], i);
    }
}

#[tokio::test]
async fn median_starts_at_s_and_never_decreases() {
    let (app, state) = loaded_app();
    let s = 0.73;
    let times: Vec<f64> = (0..=60).map(f64::from).collect();
    let (status, body) = call(
        &app,
        "POST",
        "/predict",
        Some(json!({ "age": 58, "pre_treatment": s, "times": times, "quantiles": [0.5] })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["fit_id"], state.current().unwrap().report.fit_id);
    assert_eq!(body["class"]["age_bin"], 1);
    assert_eq!(body["class"]["init_bin"], 2);
    let median: Vec<f64> = body["values"].as_array().unwrap().iter().map(|v| v[0].as_f64().unwrap()).collect();
    assert_eq!(median[0], s);
    assert!(median[1..].windows(2).all(|w| w[1] >= w[0]));
    assert!(median.iter().all(|&v| (0.0..=s).contains(&v)));
}

#[tokio::test]
async fn default_band_is_ordered_and_enveloped() {
    let (app, _) = loaded_app();
    for noise in [false, true] {
        let (status, body) = call(
            &app,
            "POST",
            "/predict",
            Some(json!({ "age_bin": 2, "init_bin": 0, "pre_treatment": 0.35, "observation_noise": noise, "draw_sample": 25 })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(floats(&body["quantiles"]), [0.1, 0.25, 0.5, 0.75, 0.9]);
        assert_eq!(body["times"].as_array().unwrap().len(), 11);
        for row in body["values"].as_array().unwrap() {
            let row = floats(row);
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!(row.iter().all(|&v| (0.0..=0.35).contains(&v)));
        }
        let draws = body["draws"].as_array().unwrap();
        assert_eq!(draws.len(), 25);
        for d in draws {
            let d = floats(d);
            assert!(d.iter().all(|&v| (0.0..=0.35).contains(&v)));
            if !noise {
                assert!(d.windows(2).all(|w| w[1] >= w[0]));
            }
        }
    }
}

#[tokio::test]
async fn invalid_requests_name_their_fields() {
    let (app, _) = loaded_app();
    let (status, body) = call(
        &app,
        "POST",
        "/predict",
        Some(json!({ "age": 60, "pre_treatment": 1.2, "times": [3, 2], "quantiles": [0.5, 2.0] })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = body["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["pre_treatment", "times", "quantiles"]);

    for bad in [json!({ "age": 60 }), json!({ "age": 60, "pre_treatment": 0.5, "colour": 1 }), json!([1, 2])] {
        let (status, body) = call(&app, "POST", "/predict", Some(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["errors"][0]["field"], "body");
    }
    let (status, body) = call(&app, "POST", "/predict", Some(json!({ "pre_treatment": 0.5 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["errors"][0]["field"], "age");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_match() {
    let (app, _) = loaded_app();
    let req = json!({ "age": 70, "pre_treatment": 0.9, "observation_noise": true, "seed": 11 });
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (app, req) = (app.clone(), req.clone());
            tokio::spawn(async move { call(&app, "POST", "/predict", Some(req)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn reload_swaps_and_failed_reload_keeps_the_old_fit() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit");
    std::fs::create_dir_all(&fit).unwrap();
    for f in std::fs::read_dir(&common::fixture().fit).unwrap() {
        let f = f.unwrap();
        std::fs::copy(f.path(), fit.join(f.file_name())).unwrap();
    }
    let state = Arc::new(AppState::new(Some(fit.clone())));
    let app = router(state.clone());
    let (status, body) = call(&app, "POST", "/reload", None).await;
    assert_eq!(status, StatusCode::OK);
    let id = body["fit_id"].clone();
    let (_, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(health["fit_id"], id);

    // A samples file that no longer matches its summary is refused.
    let samples = fit.join(SAMPLES_FILE);
    let text = std::fs::read_to_string(&samples).unwrap();
    std::fs::write(&samples, text.lines().take(5).collect::<Vec<_>>().join("\n")).unwrap();
    assert!(LoadedPosterior::load(&fit).is_err());
    let (status, _) = call(&app, "POST", "/reload", None).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    let (_, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(health["fit_id"], id);

    let old = state.swap(None).unwrap();
    assert_eq!(json!(old.report.fit_id), id);
    let (status, _) = call(&app, "POST", "/predict", Some(json!({ "age": 60, "pre_treatment": 0.5 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}
