use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cadret_core::corpus::{decode_points, read_points_file};
use cadret_core::eval::{evaluate, write_index_dir, GalleryIndex};
use cadret_core::model::default_provider;
use cadret_core::synthetic::{synthetic_corpus, Family, Shape, Size, SyntheticSpec};
use cadret_core::trainer::{fit, FitOptions};
use cadret_core::{Checkpoint, Corpus, InferenceModel, ModelConfig, Split, TrainConfig, Trainer};
use cadret_service::{get_points, handle_query, router, AppState, Health, QueryRequest, QueryResponse, ServiceError, Snapshot};
use http_body_util::BodyExt;
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    checkpoint: PathBuf,
    index_dir: PathBuf,
    ckpt: Checkpoint,
    corpus: Corpus,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ModelConfig::desk();
        let spec = default_provider(&cfg, 1);
        let provider = spec.build();
        let corpus = synthetic_corpus(
            &SyntheticSpec {
                train: 100,
                val: 0,
                test: 0,
                points_per_model: cfg.n_points,
                max_seq_len: cfg.max_seq_len,
                seed: 4,
            },
            provider.as_ref(),
        )
        .unwrap();
        let tc = TrainConfig { lr: 1e-3, batch_size: 20, epochs: 30, seed: 2, eval_every: 30, ..TrainConfig::default() };
        let mut trainer = Trainer::new(cfg, spec, tc).unwrap();
        let out = fit(&mut trainer, &corpus, &FitOptions { log_path: None, select_on: Some(Split::Train) }).unwrap();
        let ckpt = out.last;
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("model.ckpt");
        ckpt.save(&checkpoint).unwrap();
        let index_dir = dir.path().join("index");
        let records: Vec<_> = corpus.records.iter().collect();
        write_index_dir(&trainer.model, &ckpt.params, &records, &ckpt.model_version(), &index_dir).unwrap();
        Fixture { _dir: dir, checkpoint, index_dir, ckpt, corpus }
    })
}

fn snapshot() -> Snapshot {
    let f = fixture();
    Snapshot::load(&f.checkpoint, &f.index_dir).unwrap()
}

async fn send(app: axum::Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn post_query(body: &str) -> Request<Body> {
    Request::post("/query")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn app() -> axum::Router {
    router(Arc::new(AppState::new(snapshot())))
}

#[tokio::test]
async fn healthz_reports_version() {
    let (status, _, body) = send(app(), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_version, fixture().ckpt.model_version());
}

#[tokio::test]
async fn query_returns_k_sorted_results() {
    let (status, _, body) = send(app(), post_query(r#"{"text": "a small hexagonal flat plate", "k": 3}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.results.len(), 3);
    assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(r.results[0].preview_url, format!("/model/{}/points", r.results[0].id));
    assert!(!r.results[0].text_snippet.is_empty());
    assert!(r.latency_ms >= 0.0);

    let (status, _, body) = send(app(), post_query(r#"{"text": "a small hexagonal flat plate"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.results.len(), 10);
}

#[tokio::test]
async fn bad_queries_are_client_errors() {
    for body in [
        r#"{"text": "", "k": 3}"#,
        r#"{"text": "   ", "k": 3}"#,
        r#"{"text": "plate", "k": 0}"#,
        r#"{"text": "plate", "k": -2}"#,
        r#"{"text": "plate", "k": 101}"#,
        r#"{"k": 3}"#,
        "not json",
    ] {
        let (status, _, resp) = send(app(), post_query(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let v: serde_json::Value = serde_json::from_slice(&resp).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn full_gallery_k_returns_everything() {
    let (status, _, body) = send(app(), post_query(r#"{"text": "plate", "k": 100}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.results.len(), 100);
}

#[tokio::test]
async fn points_endpoint_serves_the_indexed_cloud() {
    let f = fixture();
    let id = &f.corpus.records[7].id;
    let (status, headers, body) = send(app(), Request::get(format!("/model/{id}/points")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let n: usize = headers["x-point-count"].to_str().unwrap().parse().unwrap();
    assert_eq!(n, ModelConfig::desk().n_points);
    assert_eq!(body.len(), n * 12);
    let decoded = decode_points(&body).unwrap();
    let index = GalleryIndex::load(&f.index_dir).unwrap();
    let on_disk = read_points_file(&index.points_file(&f.index_dir, id).unwrap()).unwrap();
    assert_eq!(decoded, on_disk);
    let want = f.corpus.records[7].points.coords.mapv(|x| x as f32 as f64);
    assert_eq!(decoded, want);

    let (status, _, _) = send(app(), Request::get("/model/nope/points").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn decoder_weights_are_not_loaded() {
    let f = fixture();
    assert!(f.ckpt.params.keys().any(|k| k.starts_with("decoder.")));
    let s = snapshot();
    assert_eq!(s.model.decoder_param_count(), 0);
    assert!(s.model.dropped > 0);
}

#[test]
fn mismatched_versions_refuse_to_start() {
    let f = fixture();
    let model = InferenceModel::load(&f.checkpoint).unwrap();
    let index = GalleryIndex::load(&f.index_dir).unwrap();
    let rebuilt: Vec<_> = (0..index.len()).map(|i| index.row(i)).collect();
    let ids = index.ids().to_vec();
    let meta = ids.iter().map(|id| index.meta(id).unwrap().clone()).collect();
    let stale = GalleryIndex::from_vectors(ids, &rebuilt, meta, "0000000000000000").unwrap();
    match Snapshot::new(model, stale, &f.index_dir) {
        Err(ServiceError::VersionMismatch { .. }) => {}
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}

#[test]
fn service_matches_offline_ranking() {
    let f = fixture();
    let s = snapshot();
    let cfg = f.ckpt.config.clone();
    let provider = f.ckpt.provider.build();
    let model = cadret_core::Model::new(cfg, provider.dim()).unwrap();
    let index = GalleryIndex::load(&f.index_dir).unwrap();
    let queries: Vec<(String, ndarray::Array1<f64>)> = f
        .corpus
        .records
        .iter()
        .step_by(5)
        .map(|r| (r.id.clone(), model.embed_text(&f.ckpt.params, provider.as_ref(), &r.text.raw).unwrap()))
        .collect();
    let truth: HashMap<String, String> = queries.iter().map(|(q, _)| (q.clone(), q.clone())).collect();
    let (_, offline) = evaluate(&queries, &index, &truth).unwrap();
    for (res, r) in offline.iter().zip(f.corpus.records.iter().step_by(5)) {
        let online = handle_query(&s, &QueryRequest { text: r.text.raw.clone(), k: 10 }).unwrap();
        let ids: Vec<_> = online.results.iter().map(|h| h.id.clone()).collect();
        assert_eq!(ids, res.ranked_ids[..10]);
        for (h, &sc) in online.results.iter().zip(&res.scores) {
            assert!((h.score - sc).abs() < 1e-6);
        }
    }
}

#[test]
fn repeated_queries_are_identical() {
    let s = snapshot();
    let req = QueryRequest { text: "a large rectangular tall block".into(), k: 5 };
    let a = handle_query(&s, &req).unwrap();
    let b = handle_query(&s, &req).unwrap();
    assert_eq!(a.results, b.results);
}

#[test]
fn geometry_words_change_the_ranking() {
    let f = fixture();
    let model = InferenceModel::load(&f.checkpoint).unwrap();
    let provider = f.ckpt.provider.build();
    let cfg = &f.ckpt.config;
    let records: Vec<_> = [Family::Cylindrical, Family::Rectangular]
        .iter()
        .enumerate()
        .map(|(i, &fam)| {
            Shape::new(fam, Size::Medium, false, 0)
                .record(format!("{fam:?}"), Split::Test, provider.as_ref(), cfg.n_points, cfg.max_seq_len, i as u64)
                .unwrap()
        })
        .collect();
    let refs: Vec<_> = records.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let index = write_index_dir(&model.model, &model.params, &refs, &model.model_version, dir.path()).unwrap();
    let s = Snapshot::new(model, index, dir.path()).unwrap();
    let top = |text: &str| {
        handle_query(&s, &QueryRequest { text: text.into(), k: 2 })
            .unwrap()
            .results
            .into_iter()
            .map(|h| h.id)
            .collect::<Vec<_>>()
    };
    let cyl = top("cylindrical base");
    let rect = top("rectangular base");
    assert_ne!(cyl, rect);
    assert_eq!(cyl[0], "Cylindrical");
    assert_eq!(rect[0], "Rectangular");
}

#[tokio::test]
async fn snapshot_swap_is_atomic() {
    let f = fixture();
    let state = Arc::new(AppState::new(snapshot()));
    let old_version = state.snapshot().model_version().to_string();

    // A second checkpoint with one encoder weight nudged gets a new version.
    let mut ckpt = f.ckpt.clone();
    let key = ckpt.params.keys().find(|k| k.starts_with("text.")).unwrap().clone();
    ckpt.params.get_mut(&key).unwrap()[[0, 0]] += 0.25;
    let model = InferenceModel::from_checkpoint(ckpt.clone()).unwrap();
    assert_ne!(model.model_version, old_version);
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<_> = f.corpus.records.iter().collect();
    let index = write_index_dir(&model.model, &model.params, &records, &model.model_version, dir.path()).unwrap();
    let next = Snapshot::new(model, index, dir.path()).unwrap();
    let new_version = next.model_version().to_string();

    let readers: Vec<_> = (0..4)
        .map(|_| {
            let st = state.clone();
            let (a, b) = (old_version.clone(), new_version.clone());
            std::thread::spawn(move || {
                for _ in 0..25 {
                    let snap = st.snapshot();
                    let r = handle_query(&snap, &QueryRequest { text: "flat plate".into(), k: 3 }).unwrap();
                    assert!(r.model_version == a || r.model_version == b);
                    assert_eq!(r.model_version, snap.index.model_version());
                }
            })
        })
        .collect();
    let previous = state.swap(next);
    assert_eq!(previous.model_version(), old_version);
    for r in readers {
        r.join().unwrap();
    }
    let (status, _, body) = send(router(state), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.model_version, new_version);
}

#[test]
fn point_payload_round_trips() {
    let s = snapshot();
    let f = fixture();
    let (bytes, n) = get_points(&s, &f.corpus.records[0].id).unwrap();
    let decoded = decode_points(&bytes).unwrap();
    assert_eq!(decoded.nrows(), n);
    assert_eq!(cadret_core::corpus::encode_points(&decoded), bytes);
}
