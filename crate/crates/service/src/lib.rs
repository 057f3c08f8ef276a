//! JSON-over-HTTP front end for interactive retrieval-set curation and
//! R / G / RG predictions.
//!
//! Reads run against an immutable snapshot of the retrieval index. Index
//! mutations go through a single writer, are persisted with an atomic
//! rename and then published as a new snapshot with a higher revision.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use olive_core::features::{load_feature_dir, PatchGrid};
use olive_core::model::{lookup_grid, meanpool_embedding, predict_retrieval, OliveModel};
use olive_core::object_encoder::{rasterize_mask, MaskRle, ObjectMask, RegionInput};
use olive_core::retrieval::{QueryResult, RetrievalIndex};
use olive_core::training::{Task, Variant};
use olive_core::Error;

pub const DEFAULT_K: usize = 5;
const MAX_NEW_TOKENS: usize = 16;

pub const ENV_INDEX: &str = "OLIVE_INDEX";
pub const ENV_CHECKPOINT: &str = "OLIVE_CHECKPOINT";
pub const ENV_FEATURES_DIR: &str = "OLIVE_FEATURES_DIR";

/// Where the service finds its assets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServiceConfig {
    pub index: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
}

impl ServiceConfig {
    /// Explicit values win, then the environment, then `default_index`.
    pub fn resolve(
        index: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        features_dir: Option<PathBuf>,
        env: impl Fn(&str) -> Option<String>,
        default_index: &Path,
    ) -> Self {
        let pick = |v: Option<PathBuf>, key: &str| v.or_else(|| env(key).filter(|s| !s.is_empty()).map(PathBuf::from));
        ServiceConfig {
            index: pick(index, ENV_INDEX).unwrap_or_else(|| default_index.to_path_buf()),
            checkpoint: pick(checkpoint, ENV_CHECKPOINT),
            features_dir: pick(features_dir, ENV_FEATURES_DIR),
        }
    }
}

/// Wire error: HTTP status plus `{code, message}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn precondition(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::PRECONDITION_FAILED, "PRECONDITION_FAILED", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "NOT_FOUND"),
            Error::EmptyMask => (StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_MASK"),
            Error::DegenerateEmbedding => (StatusCode::UNPROCESSABLE_ENTITY, "DEGENERATE_EMBEDDING"),
            Error::EmptyIndex => (StatusCode::CONFLICT, "EMPTY_INDEX"),
            Error::MissingLabel(_) => (StatusCode::CONFLICT, "MISSING_LABEL"),
            Error::Shape { .. } | Error::Usage(_) | Error::Format { .. } | Error::Domain(_) | Error::Length { .. } => {
                (StatusCode::BAD_REQUEST, "INVALID_ARGUMENT")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Shared service state.
pub struct AppState {
    index: RwLock<Arc<RetrievalIndex>>,
    writer: Mutex<()>,
    index_path: PathBuf,
    features: BTreeMap<String, PatchGrid>,
    model: Option<OliveModel>,
}

impl AppState {
    /// Loads features, checkpoint and index. A missing index file starts
    /// an empty index at revision 0.
    pub fn load(config: &ServiceConfig) -> olive_core::Result<Self> {
        let features = match &config.features_dir {
            Some(dir) => load_feature_dir(dir)?,
            None => BTreeMap::new(),
        };
        let model = config.checkpoint.as_deref().map(OliveModel::load).transpose()?;
        let index = if config.index.exists() {
            RetrievalIndex::load(&config.index)?
        } else {
            RetrievalIndex::new()
        };
        Ok(AppState::new(index, config.index.clone(), features, model))
    }

    pub fn new(
        index: RetrievalIndex,
        index_path: PathBuf,
        features: BTreeMap<String, PatchGrid>,
        model: Option<OliveModel>,
    ) -> Self {
        AppState {
            index: RwLock::new(Arc::new(index)),
            writer: Mutex::new(()),
            index_path,
            features,
            model,
        }
    }

    /// Current index snapshot.
    pub fn snapshot(&self) -> Arc<RetrievalIndex> {
        self.index.read().expect("index lock").clone()
    }

    /// Applies `f` to a copy of the index, persists it and publishes it.
    fn mutate<T>(&self, f: impl FnOnce(&mut RetrievalIndex) -> olive_core::Result<T>) -> Result<(T, u64), ApiError> {
        let _w = self.writer.lock().expect("writer lock");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        next.save(&self.index_path)?;
        let revision = next.revision();
        *self.index.write().expect("index lock") = Arc::new(next);
        Ok((out, revision))
    }

    fn region(&self, image_id: &str, rle: &MaskRle) -> Result<(&PatchGrid, ObjectMask), ApiError> {
        let grid = lookup_grid(&self.features, image_id)?;
        let mask = ObjectMask::from_rle(rle)?;
        if mask.n() != grid.n {
            return Err(Error::shape("mask", format!("{0}x{0} mask on a {1}x{1} grid", mask.n(), grid.n)).into());
        }
        Ok((grid, mask))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(list_scenes))
        .route("/embed", post(embed_region))
        .route("/query", post(query))
        .route("/records", get(list_records).post(add_record))
        .route("/records/{id}", delete(delete_record))
        .route("/predict", post(predict))
        .route("/rasterize", post(rasterize))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

// ---------------------------------------------------------------------------
// Wire types

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub revision: u64,
    pub records: usize,
    pub scenes: usize,
    pub checkpoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub image_id: String,
    pub n: usize,
    pub d: usize,
    /// Per-patch feature norms, row-major `n × n`.
    pub thumbnail: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRequest {
    pub image_id: String,
    pub mask_rle: MaskRle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub meanpool: Vec<f32>,
    /// Present when a checkpoint is loaded.
    pub resampler: Option<Vec<f32>>,
    pub l: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub image_id: String,
    pub mask_rle: MaskRle,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub exclude: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub record_id: u64,
    pub label: Option<String>,
    pub description: String,
    pub image_id: String,
    pub mask_rle: MaskRle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub similarity: f32,
    #[serde(flatten)]
    pub record: RecordView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub revision: u64,
    pub hits: Vec<HitView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordsResponse {
    pub revision: u64,
    pub records: Vec<RecordView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddRecordRequest {
    pub image_id: String,
    pub mask_rle: MaskRle,
    pub description: String,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddRecordResponse {
    pub record_id: u64,
    pub revision: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisionResponse {
    pub revision: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image_id: String,
    pub mask_rle: MaskRle,
    pub mode: Variant,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_task")]
    pub task: Task,
}

fn default_task() -> Task {
    Task::Classification
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub mode: Variant,
    pub answer: String,
    pub revision: u64,
    /// Rendered prompt with `[obj]` placeholders, for G and RG.
    pub prompt: Option<String>,
    pub hits: Vec<HitView>,
    /// Generated token ids and their log-probabilities, for G and RG.
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterizeRequest {
    pub region: RegionInput,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterizeResponse {
    pub mask_rle: MaskRle,
    pub l: usize,
}

fn record_view(index: &RetrievalIndex, id: u64) -> Result<RecordView, ApiError> {
    let r = index.get(id).ok_or_else(|| Error::NotFound(format!("record {id}")))?;
    Ok(RecordView {
        record_id: r.record_id,
        label: r.label.clone(),
        description: r.description.clone(),
        image_id: r.image_id.clone(),
        mask_rle: r.mask.clone(),
    })
}

fn hit_views(index: &RetrievalIndex, hits: &QueryResult) -> Result<Vec<HitView>, ApiError> {
    hits.hits
        .iter()
        .map(|h| {
            Ok(HitView {
                similarity: h.similarity,
                record: record_view(index, h.record_id)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Handlers

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    let index = st.snapshot();
    Json(Health {
        status: "ok".into(),
        revision: index.revision(),
        records: index.len(),
        scenes: st.features.len(),
        checkpoint: st.model.is_some(),
    })
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> Json<Vec<SceneInfo>> {
    Json(
        st.features
            .values()
            .map(|g| SceneInfo {
                image_id: g.image_id.clone(),
                n: g.n,
                d: g.d,
                thumbnail: (0..g.n * g.n)
                    .map(|p| g.patch_row(p).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32)
                    .collect(),
            })
            .collect(),
    )
}

async fn embed_region(
    State(st): State<Arc<AppState>>,
    body: Result<Json<RegionRequest>, JsonRejection>,
) -> ApiResult<EmbedResponse> {
    let Json(req) = body?;
    let (grid, mask) = st.region(&req.image_id, &req.mask_rle)?;
    let meanpool = meanpool_embedding(grid, &mask)?;
    let resampler = match &st.model {
        Some(m) => Some(m.resampler_embedding(grid, &mask)?.vec),
        None => None,
    };
    Ok(Json(EmbedResponse {
        meanpool: meanpool.vec,
        resampler,
        l: mask.popcount(),
    }))
}

async fn query(State(st): State<Arc<AppState>>, body: Result<Json<QueryRequest>, JsonRejection>) -> ApiResult<QueryResponse> {
    let Json(req) = body?;
    let (grid, mask) = st.region(&req.image_id, &req.mask_rle)?;
    let index = st.snapshot();
    let exclude: BTreeSet<u64> = req.exclude.into_iter().collect();
    let hits = index.query_topk(&meanpool_embedding(grid, &mask)?, req.k.unwrap_or(DEFAULT_K), &exclude)?;
    Ok(Json(QueryResponse {
        revision: index.revision(),
        hits: hit_views(&index, &hits)?,
    }))
}

async fn list_records(State(st): State<Arc<AppState>>) -> ApiResult<RecordsResponse> {
    let index = st.snapshot();
    let records = index
        .records()
        .iter()
        .map(|r| record_view(&index, r.record_id))
        .collect::<Result<_, _>>()?;
    Ok(Json(RecordsResponse {
        revision: index.revision(),
        records,
    }))
}

async fn add_record(
    State(st): State<Arc<AppState>>,
    body: Result<Json<AddRecordRequest>, JsonRejection>,
) -> ApiResult<AddRecordResponse> {
    let Json(req) = body?;
    let (grid, mask) = st.region(&req.image_id, &req.mask_rle)?;
    let emb = meanpool_embedding(grid, &mask)?;
    let (record_id, revision) =
        st.mutate(|idx| idx.add_record(&mask, req.description, req.image_id, emb, req.label))?;
    Ok(Json(AddRecordResponse { record_id, revision }))
}

async fn delete_record(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<RevisionResponse> {
    let (_, revision) = st.mutate(|idx| idx.remove(id))?;
    Ok(Json(RevisionResponse { revision }))
}

async fn predict(
    State(st): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<PredictResponse> {
    let Json(req) = body?;
    let (grid, mask) = st.region(&req.image_id, &req.mask_rle)?;
    let index = st.snapshot();
    let k = req.k.unwrap_or(DEFAULT_K);
    let none = BTreeSet::new();
    let need_model = || st.model.as_ref().ok_or_else(|| ApiError::precondition("no checkpoint loaded"));
    let need_index = || {
        if index.is_empty() {
            Err(ApiError::precondition("the retrieval index is empty"))
        } else {
            Ok(&*index)
        }
    };
    let mut out = PredictResponse {
        mode: req.mode,
        answer: String::new(),
        revision: index.revision(),
        prompt: None,
        hits: Vec::new(),
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    match req.mode {
        Variant::R => {
            if req.task != Task::Classification {
                return Err(Error::Usage("the retrieval vote only classifies".into()).into());
            }
            let (label, hits) = predict_retrieval(need_index()?, grid, &mask, k, &none)?;
            out.answer = label;
            out.hits = hit_views(&index, &hits)?;
        }
        Variant::G => {
            let m = need_model()?;
            let p = m.generative_prompt(grid, &mask, req.task.template(Variant::G)?, None)?;
            let (answer, gen) = m.answer(&p, MAX_NEW_TOKENS)?;
            out.answer = answer;
            out.prompt = Some(p.layout.text.clone());
            out.tokens = gen.tokens;
            out.logprobs = gen.logprobs;
        }
        Variant::RG => {
            if k == 0 {
                return Err(Error::Usage("retrieval-augmented prediction needs k >= 1".into()).into());
            }
            let m = need_model()?;
            let template = req.task.template(Variant::RG)?;
            let (p, hits) = m.retrieval_prompt(need_index()?, &st.features, grid, &mask, k, &none, template, None)?;
            let (answer, gen) = m.answer(&p, MAX_NEW_TOKENS)?;
            out.answer = answer;
            out.prompt = Some(p.layout.text.clone());
            out.hits = hit_views(&index, &hits)?;
            out.tokens = gen.tokens;
            out.logprobs = gen.logprobs;
        }
    }
    Ok(Json(out))
}

async fn rasterize(body: Result<Json<RasterizeRequest>, JsonRejection>) -> ApiResult<RasterizeResponse> {
    let Json(req) = body?;
    let mask = rasterize_mask(&req.region, req.n)?;
    Ok(Json(RasterizeResponse {
        l: mask.popcount(),
        mask_rle: mask.to_rle(),
    }))
}
