use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use screenline_core::analytics;
use screenline_core::charts::{episode_chart, ChartParams};
use screenline_core::store::{QueryFilter, Store};
use screenline_core::synth::{rng, EpisodeParams, SynthEpisode};
use screenline_core::workflow::write_synth;
use screenline_core::{AppearanceRecord, BBox, ChartSpec, ChartType, CoalesceParams, EpisodeMeta, Metric, Timeline};
use screenline_service::{router, ServiceConfig};

fn timeline(seed: u64, meta: EpisodeMeta, n: usize, celebs: usize) -> Timeline {
    let mut r = rng(seed);
    let steps = meta.duration_ms / 100;
    let records = (0..n)
        .map(|i| {
            let t = r.random_range(0..=steps) * 100;
            let c = format!("celeb_{:03}", r.random_range(0..celebs));
            AppearanceRecord::new(meta.episode_id.clone(), c, t, i as u64, BBox::new(0.1, 0.1, 0.2, 0.2), r.random_range(0.5f32..=1.0))
        })
        .collect();
    Timeline::new(meta, records).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    store: Arc<Store>,
    app: Router,
}

fn fixture_with(config: ServiceConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path().join("db")).unwrap());
    store.put_timeline(timeline(55, EpisodeMeta::new("demo55", "demo", 1, 1, 3_300_000), 400, 5)).unwrap();
    for (i, season) in [(1, 1), (2, 1), (3, 2)] {
        store.put_timeline(timeline(60 + i, EpisodeMeta::new(format!("demo_s{i}"), "demo", season, i as u32, 1_800_000), 150, 4)).unwrap();
    }
    store.register(EpisodeMeta::new("pending", "other", 1, 1, 600_000), None).unwrap();
    let app = router(store.clone(), config);
    Fixture { _dir: dir, store, app }
}

fn fixture() -> Fixture {
    fixture_with(ServiceConfig::default())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, String) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: impl Into<Body>) -> (StatusCode, String) {
    send(app, Request::post(uri).body(body.into()).unwrap()).await
}

fn error_code(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap();
    assert!(v.get("message").is_some() && v.get("detail").is_some(), "{body}");
    v["error_code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_listing() {
    let f = fixture();
    assert_eq!(get(&f.app, "/healthz").await, (StatusCode::OK, r#"{"status":"ok"}"#.to_string()));

    let (status, body) = get(&f.app, "/episodes").await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<Value> = serde_json::from_str(&body).unwrap();
    assert_eq!(list.len(), 5);

    let (status, body) = get(&f.app, "/episodes/demo55").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["record_count"], 400);
    assert_eq!(v["meta"]["processed"], true);

    let (status, body) = get(&f.app, "/episodes/nope").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "UnknownScope"));
}

#[tokio::test]
async fn every_episode_chart_matches_in_process_call() {
    let f = fixture();
    let t = f.store.timeline("demo55").unwrap();
    for chart in ChartType::ALL.into_iter().filter(|c| *c != ChartType::SeasonalComparison) {
        let (status, body) = get(&f.app, &format!("/episodes/demo55/charts/{chart}")).await;
        assert_eq!(status, StatusCode::OK, "{chart}: {body}");
        let expected = episode_chart(&t, chart, &ChartParams::default(), CoalesceParams::default()).unwrap();
        assert_eq!(body, expected.to_json(), "{chart}");
    }
}

#[tokio::test]
async fn trend_lines_equal_direct_analytics() {
    let f = fixture();
    let t = f.store.timeline("demo55").unwrap();
    let (status, body) = get(&f.app, "/episodes/demo55/charts/trend_lines?bucket_ms=60000").await;
    assert_eq!(status, StatusCode::OK);
    let direct = analytics::trend_lines(&t, 60_000).unwrap();
    assert_eq!(body, direct.to_json());
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    assert_eq!(spec.schema, 1);
    assert_eq!(spec.meta["bucket_ms"], json!(60_000));
}

#[tokio::test]
async fn overrides_are_applied_and_echoed() {
    let f = fixture();
    let t = f.store.timeline("demo55").unwrap();
    let params = ChartParams { gap_ms: Some(500), tail_ms: Some(250), ..Default::default() };
    let (_, body) = get(&f.app, &format!("/episodes/demo55/charts/total_durations?{}", params.to_query())).await;
    assert_eq!(body, episode_chart(&t, ChartType::TotalDurations, &params, CoalesceParams::default()).unwrap().to_json());
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    assert_eq!(spec.meta["gap_ms"], json!(500));
    assert_eq!(spec.meta["tail_ms"], json!(250));

    let (_, body) = get(&f.app, "/episodes/demo55/charts/coappearance_network?window_ms=0&min_edge_weight=3").await;
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    assert!(spec.graph.unwrap().edges.iter().all(|e| e.weight >= 3.0));
}

#[tokio::test]
async fn heatmap_of_55_minutes_has_eleven_segments() {
    let f = fixture();
    let (status, body) = get(&f.app, "/episodes/demo55/charts/segment_heatmap?segment_ms=300000").await;
    assert_eq!(status, StatusCode::OK);
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    assert_eq!(spec.matrix.unwrap().col_labels.len(), 11);
}

#[tokio::test]
async fn seasonal_comparison_over_series() {
    let f = fixture();
    let (status, body) = get(&f.app, "/series/demo/charts/seasonal_comparison?seasons=1,2").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    assert_eq!(spec.series.as_ref().unwrap().len(), 2);

    // one season gives one group holding every celebrity
    let (status, body) = get(&f.app, "/series/demo/charts/seasonal_comparison?seasons=2").await;
    assert_eq!(status, StatusCode::OK);
    let spec: ChartSpec = serde_json::from_str(&body).unwrap();
    let series = spec.series.unwrap();
    assert_eq!(series.len(), 1);
    let t = f.store.timeline("demo_s3").unwrap();
    assert_eq!(series[0].points.len(), analytics::appearance_counts(&t).len());

    let (status, body) = get(&f.app, "/series/demo/charts/seasonal_comparison?seasons=9").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "UnknownScope"));
    let (status, body) = get(&f.app, "/series/other/charts/seasonal_comparison").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "NotProcessed"));
    let (status, body) = get(&f.app, "/series/demo/charts/per_minute_bars").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "BadParams"));
}

#[tokio::test]
async fn chart_errors_have_stable_codes() {
    let f = fixture();
    let cases = [
        ("/episodes/nope/charts/trend_lines", StatusCode::NOT_FOUND, "UnknownScope"),
        ("/episodes/pending/charts/trend_lines", StatusCode::CONFLICT, "NotProcessed"),
        ("/episodes/demo55/charts/bubble", StatusCode::UNPROCESSABLE_ENTITY, "BadParams"),
        ("/episodes/demo55/charts/trend_lines?bucket_ms=0", StatusCode::UNPROCESSABLE_ENTITY, "BadParams"),
        ("/episodes/demo55/charts/trend_lines?bucket_ms=abc", StatusCode::UNPROCESSABLE_ENTITY, "BadParams"),
        ("/episodes/demo55/charts/trend_lines?colour=red", StatusCode::UNPROCESSABLE_ENTITY, "BadParams"),
        ("/episodes/demo55/charts/seasonal_comparison", StatusCode::UNPROCESSABLE_ENTITY, "BadParams"),
    ];
    for (uri, status, code) in cases {
        let (got, body) = get(&f.app, uri).await;
        assert_eq!((got, error_code(&body).as_str()), (status, code), "{uri}");
    }
}

#[tokio::test]
async fn empty_episode_pie_is_422() {
    let f = fixture();
    f.store.put_timeline(Timeline::new(EpisodeMeta::new("empty", "demo", 3, 1, 60_000), vec![]).unwrap()).unwrap();
    let (status, body) = get(&f.app, "/episodes/empty/charts/distribution_pie").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "EmptyTimeline"));
    let (status, _) = get(&f.app, "/episodes/empty/charts/total_counts").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn appearances_match_store_query() {
    let f = fixture();
    let (status, body) = get(&f.app, "/episodes/demo55/appearances?celebrity=celeb_001,celeb_003&from_ms=600000&to_ms=1800000").await;
    assert_eq!(status, StatusCode::OK);
    let got: Vec<AppearanceRecord> = serde_json::from_str(&body).unwrap();
    let filter = QueryFilter {
        celebrities: Some(["celeb_001".to_string(), "celeb_003".to_string()].into()),
        from_ms: Some(600_000),
        to_ms: Some(1_800_000),
        ..QueryFilter::episode("demo55")
    };
    let expected = f.store.query_appearances(&filter).unwrap();
    assert!(!expected.is_empty());
    assert_eq!(got, expected);

    let (status, _) = get(&f.app, "/episodes/demo55/appearances?from_ms=-1").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = get(&f.app, "/episodes/pending/appearances").await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn reads_are_repeatable() {
    let f = fixture();
    let uri = "/episodes/demo55/charts/coappearance_matrix?window_ms=2000";
    let (_, first) = get(&f.app, uri).await;
    for _ in 0..3 {
        assert_eq!(get(&f.app, uri).await.1, first);
    }
    assert_eq!(f.store.record_count(), 850);
}

fn ingest_body(meta: &EpisodeMeta, n: usize) -> Vec<String> {
    let t = timeline(7, meta.clone(), n, 3);
    let mut lines = vec![json!({ "meta": meta }).to_string()];
    lines.extend(t.records().iter().map(|r| serde_json::to_string(r).unwrap()));
    lines
}

#[tokio::test]
async fn ingest_round_trip() {
    let f = fixture();
    let meta = EpisodeMeta::new("fresh", "demo", 4, 1, 600_000);
    let lines = ingest_body(&meta, 100);
    let (status, body) = post(&f.app, "/episodes/fresh/ingest", lines.join("\n") + "\n").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({ "episode_id": "fresh", "stored": 100 }));
    assert_eq!(*f.store.timeline("fresh").unwrap(), timeline(7, meta, 100, 3).with_processed(true));
    let (status, _) = get(&f.app, "/episodes/fresh/charts/per_minute_bars").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn malformed_line_is_cited_and_nothing_is_stored() {
    let f = fixture();
    let meta = EpisodeMeta::new("fresh", "demo", 4, 1, 600_000);
    let mut lines = ingest_body(&meta, 20);
    lines[6] = r#"{"episode_id": "fresh", "celebrity_id": "#.to_string();
    let (status, body) = post(&f.app, "/episodes/fresh/ingest", lines.join("\n")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["error_code"], "ParseError");
    assert_eq!(v["detail"]["line"], 7);
    assert!(f.store.episode("fresh").is_none());
}

#[tokio::test]
async fn ingest_rejections() {
    let f = fixture();
    let meta = EpisodeMeta::new("fresh", "demo", 4, 1, 600_000);

    let mut lines = ingest_body(&meta, 10);
    let dup = lines[3].clone();
    lines.push(dup);
    let (status, body) = post(&f.app, "/episodes/fresh/ingest", lines.join("\n")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "DuplicateKey"));

    let lines = ingest_body(&meta, 10);
    let (status, body) = post(&f.app, "/episodes/other/ingest", lines.join("\n")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "BadParams"));

    let (status, body) = post(&f.app, "/episodes/fresh/ingest", "").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "ParseError"));

    let mut late = serde_json::to_value(&timeline(7, meta.clone(), 1, 3).records()[0]).unwrap();
    late["t_ms"] = json!(600_001);
    let mut lines = ingest_body(&meta, 3);
    lines.push(late.to_string());
    let (status, body) = post(&f.app, "/episodes/fresh/ingest", lines.join("\n")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["detail"]["line"], 5);
    assert!(f.store.episode("fresh").is_none());
}

#[tokio::test]
async fn oversized_ingest_is_413() {
    let f = fixture_with(ServiceConfig { max_ingest_bytes: 1_000, ..Default::default() });
    let meta = EpisodeMeta::new("fresh", "demo", 4, 1, 600_000);
    let (status, body) = post(&f.app, "/episodes/fresh/ingest", ingest_body(&meta, 50).join("\n")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::PAYLOAD_TOO_LARGE, "TooLarge"));
    assert!(f.store.episode("fresh").is_none());
}

#[tokio::test]
async fn ingest_over_capacity_is_507() {
    let dir = tempfile::tempdir().unwrap();
    let config = screenline_core::store::StoreConfig { max_records: 10, ..Default::default() };
    let store = Arc::new(Store::open_with(dir.path(), config).unwrap());
    let app = router(store, ServiceConfig::default());
    let meta = EpisodeMeta::new("fresh", "demo", 4, 1, 600_000);
    let (status, body) = post(&app, "/episodes/fresh/ingest", ingest_body(&meta, 11).join("\n")).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::INSUFFICIENT_STORAGE, "StorageFull"));
}

#[tokio::test]
async fn process_registered_episode() {
    let f = fixture();
    let (status, body) = post(&f.app, "/episodes/pending/process", "").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "NoDetectionFile"));
    let (status, body) = post(&f.app, "/episodes/nope/process", "").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "UnknownScope"));

    let params = EpisodeParams { seed: 3, duration_ms: 300_000, dim: 64, ..Default::default() };
    let synth = SynthEpisode::generate(&params).unwrap();
    let dets = write_synth(&f._dir.path().join("synth"), &synth, Metric::Cosine).unwrap();
    f.store.register(EpisodeMeta::new("synth", "s", 1, 1, params.duration_ms), Some(dets)).unwrap();

    let (status, body) = get(&f.app, "/episodes/synth/charts/total_counts").await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let (status, body) = post(&f.app, "/episodes/synth/process?workers=3&detect_batch=7&embed_batch=5&metric=l2&threshold=1.0", "").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let report: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(report["workers"], 3);
    assert_eq!(report["detections"], synth.events.len() as u64);
    assert_eq!(report["accepted"], synth.events.len() as u64);

    let (status, _) = get(&f.app, "/episodes/synth/charts/total_counts").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(f.store.timeline("synth").unwrap().len(), synth.events.len());

    let (status, body) = post(&f.app, "/episodes/synth/process?metric=manhattan", "").await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "BadParams"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn reads_proceed_during_ingest() {
    let f = fixture();
    let meta = EpisodeMeta::new("big", "demo", 5, 1, 3_600_000);
    let body = ingest_body(&meta, 20_000).join("\n");
    let writer = {
        let app = f.app.clone();
        tokio::spawn(async move { post(&app, "/episodes/big/ingest", body).await })
    };
    for _ in 0..20 {
        let (status, _) = get(&f.app, "/episodes/demo55/charts/per_minute_bars").await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, body) = writer.await.unwrap();
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(f.store.timeline("big").unwrap().len(), 20_000);
}
