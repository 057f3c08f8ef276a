use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use olive_core::decoder::DecoderConfig;
use olive_core::features::{save_features, Annotation};
use olive_core::model::{ModelConfig, OliveModel};
use olive_core::object_encoder::{MaskRle, ObjectEncoderConfig, ObjectMask};
use olive_core::prompt::Vocabulary;
use olive_core::training::{generate_corpus, Corpus, CorpusSpec};
use olive_service::*;

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
    corpus: Corpus,
}

fn corpus() -> Corpus {
    generate_corpus(&CorpusSpec {
        classes: 3,
        objects_per_class: 4,
        n: 4,
        dim: 8,
        attribute_scale: 0.0,
        seed: 11,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn small_model(labels: &[String]) -> OliveModel {
    let mut decoder = DecoderConfig::new(0);
    decoder.width = 16;
    decoder.layers = 1;
    decoder.heads = 2;
    decoder.max_len = 128;
    let config = ModelConfig {
        encoder: ObjectEncoderConfig {
            grid_n: 4,
            feat_dim: 8,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            layers: 1,
            out_dim: 16,
        },
        decoder,
        lora: None,
    };
    OliveModel::init(config, Vocabulary::standard(labels, &[]), 5).unwrap()
}

fn fixture(with_model: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus();
    let fdir = dir.path().join("features");
    std::fs::create_dir(&fdir).unwrap();
    for (id, g) in &corpus.features {
        save_features(g, &fdir.join(format!("{id}.olvf"))).unwrap();
    }
    let checkpoint = with_model.then(|| {
        let p = dir.path().join("model.olvc");
        small_model(&corpus.domain.labels).save(&p).unwrap();
        p
    });
    let config = ServiceConfig {
        index: dir.path().join("index.jsonl"),
        checkpoint,
        features_dir: Some(fdir),
    };
    Fixture {
        _dir: dir,
        config,
        corpus,
    }
}

fn open(config: &ServiceConfig) -> axum::Router {
    router(Arc::new(AppState::load(config).unwrap()))
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
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
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

fn parse<T: DeserializeOwned>(v: Value) -> T {
    serde_json::from_value(v).unwrap()
}

fn region(a: &Annotation) -> Value {
    json!({ "image_id": a.image_id, "mask_rle": a.mask_rle })
}

async fn add_all(app: &axum::Router, anns: &[Annotation]) -> Vec<u64> {
    let mut ids = Vec::new();
    for a in anns {
        let mut body = region(a);
        body["description"] = json!(a.label);
        body["label"] = json!(a.label);
        let (status, v) = call(app, Method::POST, "/records", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        ids.push(parse::<AddRecordResponse>(v).record_id);
    }
    ids
}

fn assert_error(status: StatusCode, v: &Value, want_status: StatusCode, code: &str) {
    assert_eq!(status, want_status, "{v}");
    let e: ErrorBody = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(e.code, code);
    assert!(!e.message.is_empty());
}

#[tokio::test]
async fn health_and_scenes() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let (status, v) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = parse(v);
    assert_eq!((h.revision, h.records, h.scenes, h.checkpoint), (0, 0, 12, false));

    let (_, v) = call(&app, Method::GET, "/scenes", None).await;
    let scenes: Vec<SceneInfo> = parse(v);
    let ids: Vec<&str> = scenes.iter().map(|s| s.image_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let g = &fx.corpus.features[&scenes[0].image_id];
    assert_eq!(scenes[0].thumbnail.len(), 16);
    let norm0 = g.patch_row(0).iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((scenes[0].thumbnail[0] - norm0).abs() < 1e-5);
}

#[tokio::test]
async fn embed_reports_resampler_only_with_checkpoint() {
    let a = &corpus().annotations[0];
    let fx = fixture(false);
    let (status, v) = call(&open(&fx.config), Method::POST, "/embed", Some(region(a))).await;
    assert_eq!(status, StatusCode::OK);
    let e: EmbedResponse = parse(v);
    assert_eq!(e.meanpool.len(), 8);
    assert!(e.resampler.is_none());
    assert_eq!(e.l, a.mask().unwrap().popcount());
    let g = &fx.corpus.features[&a.image_id];
    let idx = a.mask().unwrap().indices();
    for (j, &m) in e.meanpool.iter().enumerate() {
        let want = idx.iter().map(|&p| g.patch_row(p)[j] as f64).sum::<f64>() / idx.len() as f64;
        assert!((m as f64 - want).abs() < 1e-6);
    }

    let fx = fixture(true);
    let (_, v) = call(&open(&fx.config), Method::POST, "/embed", Some(region(a))).await;
    let e: EmbedResponse = parse(v);
    assert_eq!(e.resampler.map(|r| r.len()), Some(16));
}

#[tokio::test]
async fn curation_round_trip() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let anns = &fx.corpus.annotations;

    let (status, v) = call(&app, Method::POST, "/query", Some(region(&anns[0]))).await;
    assert_error(status, &v, StatusCode::CONFLICT, "EMPTY_INDEX");

    let ids = add_all(&app, &anns[..6]).await;
    let (_, v) = call(&app, Method::GET, "/records", None).await;
    let listed: RecordsResponse = parse(v);
    assert_eq!(listed.revision, 6);
    assert_eq!(listed.records.iter().map(|r| r.record_id).collect::<Vec<_>>(), ids);

    // A query on a stored region finds itself first with similarity 1.
    let mut body = region(&anns[2]);
    body["k"] = json!(3);
    let (_, v) = call(&app, Method::POST, "/query", Some(body.clone())).await;
    let q: QueryResponse = parse(v);
    assert_eq!(q.revision, 6);
    assert_eq!(q.hits.len(), 3);
    assert_eq!(q.hits[0].record.record_id, ids[2]);
    assert!((q.hits[0].similarity - 1.0).abs() < 1e-5);
    assert_eq!(q.hits[0].record.label.as_deref(), Some(anns[2].label.as_str()));
    assert!(q.hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));

    body["exclude"] = json!([ids[2]]);
    let (_, v) = call(&app, Method::POST, "/query", Some(body)).await;
    let q: QueryResponse = parse(v);
    assert!(q.hits.iter().all(|h| h.record.record_id != ids[2]));

    let (status, v) = call(&app, Method::DELETE, &format!("/records/{}", ids[2]), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(parse::<RevisionResponse>(v).revision, 7);
    let (status, v) = call(&app, Method::DELETE, &format!("/records/{}", ids[2]), None).await;
    assert_error(status, &v, StatusCode::NOT_FOUND, "NOT_FOUND");

    // k beyond the index size returns every record.
    let mut body = region(&anns[0]);
    body["k"] = json!(50);
    let (_, v) = call(&app, Method::POST, "/query", Some(body)).await;
    assert_eq!(parse::<QueryResponse>(v).hits.len(), 5);
}

#[tokio::test]
async fn restart_restores_exact_state() {
    let fx = fixture(false);
    let anns = &fx.corpus.annotations;
    let before = {
        let app = open(&fx.config);
        let ids = add_all(&app, &anns[..5]).await;
        call(&app, Method::DELETE, &format!("/records/{}", ids[1]), None).await;
        let (_, v) = call(&app, Method::GET, "/records", None).await;
        parse::<RecordsResponse>(v)
    };
    assert_eq!(before.revision, 6);

    let app = open(&fx.config);
    let (_, v) = call(&app, Method::GET, "/records", None).await;
    let after: RecordsResponse = parse(v);
    assert_eq!(after, before);

    // Record ids keep increasing across restarts.
    let new = add_all(&app, &anns[5..6]).await;
    assert!(new[0] > before.records.iter().map(|r| r.record_id).max().unwrap());
    let (_, v) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(parse::<Health>(v).revision, 7);
}

#[tokio::test]
async fn error_mapping() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let a = &fx.corpus.annotations[0];

    let (status, v) = call(
        &app,
        Method::POST,
        "/embed",
        Some(json!({"image_id": "nope", "mask_rle": a.mask_rle})),
    )
    .await;
    assert_error(status, &v, StatusCode::NOT_FOUND, "NOT_FOUND");

    let empty = MaskRle { n: 4, counts: vec![16] };
    let (status, v) = call(
        &app,
        Method::POST,
        "/embed",
        Some(json!({"image_id": a.image_id, "mask_rle": empty})),
    )
    .await;
    assert_error(status, &v, StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_MASK");

    let wrong_n = ObjectMask::full(3).unwrap().to_rle();
    let (status, v) = call(
        &app,
        Method::POST,
        "/embed",
        Some(json!({"image_id": a.image_id, "mask_rle": wrong_n})),
    )
    .await;
    assert_error(status, &v, StatusCode::BAD_REQUEST, "INVALID_ARGUMENT");

    let (status, v) = call(&app, Method::POST, "/query", Some(json!({"image_id": 3}))).await;
    assert_error(status, &v, StatusCode::BAD_REQUEST, "BAD_REQUEST");

    add_all(&app, &fx.corpus.annotations[..2]).await;
    let mut body = region(a);
    body["k"] = json!(0);
    let (status, v) = call(&app, Method::POST, "/query", Some(body)).await;
    assert_error(status, &v, StatusCode::BAD_REQUEST, "INVALID_ARGUMENT");
}

#[tokio::test]
async fn predict_modes() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let anns = &fx.corpus.annotations;
    let q = &anns[anns.len() - 1];

    let mut body = region(q);
    body["mode"] = json!("RG");
    let (status, v) = call(&app, Method::POST, "/predict", Some(body.clone())).await;
    assert_error(status, &v, StatusCode::PRECONDITION_FAILED, "PRECONDITION_FAILED");

    body["mode"] = json!("R");
    let (status, v) = call(&app, Method::POST, "/predict", Some(body.clone())).await;
    assert_error(status, &v, StatusCode::PRECONDITION_FAILED, "PRECONDITION_FAILED");

    add_all(&app, &anns[..anns.len() - 1]).await;
    body["k"] = json!(3);
    let (status, v) = call(&app, Method::POST, "/predict", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let p: PredictResponse = parse(v);
    assert_eq!(p.answer, q.label);
    assert_eq!(p.hits.len(), 3);
    assert!(p.prompt.is_none());

    let fx = fixture(true);
    let app = open(&fx.config);
    add_all(&app, &anns[..anns.len() - 1]).await;
    let mut body = region(q);
    body["mode"] = json!("G");
    let (status, v) = call(&app, Method::POST, "/predict", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let g: PredictResponse = parse(v);
    assert_eq!(g.prompt.as_deref().map(|t| t.matches("[obj]").count()), Some(1));
    assert!(g.hits.is_empty());
    assert_eq!(g.tokens.len(), g.logprobs.len());

    body["mode"] = json!("RG");
    body["k"] = json!(2);
    let (status, v) = call(&app, Method::POST, "/predict", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let rg: PredictResponse = parse(v);
    assert_eq!(rg.hits.len(), 2);
    assert_eq!(rg.revision, 11);
    let text = rg.prompt.clone().unwrap();
    assert_eq!(text.matches("[obj]").count(), 3);
    for h in &rg.hits {
        assert!(text.contains(h.record.label.as_deref().unwrap()));
    }

    // Same request, same answer.
    let (_, v) = call(&app, Method::POST, "/predict", Some(body.clone())).await;
    let mut expected = rg.clone();
    expected.prompt = Some(text.clone());
    assert_eq!(parse::<PredictResponse>(v), expected);

    body["k"] = json!(0);
    let (status, v) = call(&app, Method::POST, "/predict", Some(body)).await;
    assert_error(status, &v, StatusCode::BAD_REQUEST, "INVALID_ARGUMENT");
}

#[tokio::test]
async fn rasterize_polygon_and_pixels() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let body = json!({
        "region": {"kind": "polygon", "width": 8.0, "height": 8.0,
                   "points": [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]]},
        "n": 4
    });
    let (status, v) = call(&app, Method::POST, "/rasterize", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let r: RasterizeResponse = parse(v);
    assert_eq!(r.l, 4);
    assert_eq!(ObjectMask::from_rle(&r.mask_rle).unwrap().indices(), vec![0, 1, 4, 5]);

    let body = json!({
        "region": {"kind": "pixels", "width": 2, "height": 2, "bits": [false, false, false, false]},
        "n": 2
    });
    let (status, v) = call(&app, Method::POST, "/rasterize", Some(body)).await;
    assert_error(status, &v, StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_MASK");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_writes_get_distinct_revisions() {
    let fx = fixture(false);
    let app = open(&fx.config);
    let anns = fx.corpus.annotations.clone();
    let mut tasks = Vec::new();
    for a in anns.iter().take(8).cloned() {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let mut body = region(&a);
            body["description"] = json!(a.label);
            let (status, v) = call(&app, Method::POST, "/records", Some(body)).await;
            assert_eq!(status, StatusCode::OK);
            parse::<AddRecordResponse>(v)
        }));
    }
    let mut revisions = Vec::new();
    let mut ids = Vec::new();
    for t in tasks {
        let r = t.await.unwrap();
        revisions.push(r.revision);
        ids.push(r.record_id);
    }
    revisions.sort();
    ids.sort();
    ids.dedup();
    assert_eq!(revisions, (1..=8).collect::<Vec<_>>());
    assert_eq!(ids.len(), 8);
    let persisted = olive_core::retrieval::RetrievalIndex::load(&fx.config.index).unwrap();
    assert_eq!(persisted.revision(), 8);
    assert_eq!(persisted.len(), 8);
}

#[test]
fn config_precedence() {
    let env: BTreeMap<&str, &str> = [(ENV_INDEX, "/env/index.jsonl"), (ENV_CHECKPOINT, "/env/model.olvc")]
        .into_iter()
        .collect();
    let lookup = |k: &str| env.get(k).map(|s| s.to_string());
    let default = Path::new("index.jsonl");

    let c = ServiceConfig::resolve(None, None, None, lookup, default);
    assert_eq!(c.index, PathBuf::from("/env/index.jsonl"));
    assert_eq!(c.checkpoint, Some(PathBuf::from("/env/model.olvc")));
    assert_eq!(c.features_dir, None);

    let c = ServiceConfig::resolve(Some("/flag/i.jsonl".into()), None, Some("/f".into()), lookup, default);
    assert_eq!(c.index, PathBuf::from("/flag/i.jsonl"));
    assert_eq!(c.checkpoint, Some(PathBuf::from("/env/model.olvc")));
    assert_eq!(c.features_dir, Some(PathBuf::from("/f")));

    let c = ServiceConfig::resolve(None, None, None, |_| None, default);
    assert_eq!(c.index, PathBuf::from("index.jsonl"));
}

#[tokio::test]
async fn serves_over_tcp() {
    let fx = fixture(false);
    let state = Arc::new(AppState::load(&fx.config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(serve(listener, state));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"status\":\"ok\""));
    server.abort();
}
