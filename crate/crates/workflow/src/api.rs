use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emflow_core::segment::SeedList;
use emflow_core::volume::{load_gray_png, make_preview, ChunkedVolume};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dataset::Dataset;
use crate::error::Error;
use crate::store::{JobFilter, JobRecord, JobSpec, JobState, JobStore, Transition};

/// Lines of `output.log` returned with a job.
pub const OUTPUT_TAIL_LINES: usize = 50;

#[derive(Clone)]
pub struct ApiState {
    pub store: Arc<JobStore>,
}

impl ApiState {
    pub fn new(store: JobStore) -> Self {
        Self { store: Arc::new(store) }
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl From<emflow_core::Error> for ApiError {
    fn from(e: emflow_core::Error) -> Self {
        Self(Error::Core(e))
    }
}

fn status_of(e: &Error) -> StatusCode {
    use emflow_core::Error as C;
    match e {
        Error::NoSuchJob(_) | Error::NoSuchDataset(_) => StatusCode::NOT_FOUND,
        Error::Core(C::MissingDataset(_)) => StatusCode::NOT_FOUND,
        Error::Core(C::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
        Error::InvalidTransition { .. } | Error::NotOwner { .. } => StatusCode::CONFLICT,
        Error::Config(_) | Error::MissingArg { .. } | Error::UnknownApp(_) | Error::MissingDep(_) | Error::Json(_) => {
            StatusCode::BAD_REQUEST
        }
        Error::Core(C::InvalidArgument(_) | C::OutOfBounds { .. } | C::InvalidSeed { .. } | C::NoSuchLevel(_)) => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            log::error!("api: {}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(state: &ApiState, f: F) -> ApiResult<T>
where
    F: FnOnce(&JobStore) -> Result<T, Error> + Send + 'static,
    T: Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError(Error::Stage(format!("request task failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Default, Deserialize)]
pub struct JobsQuery {
    pub state: Option<String>,
    /// `key=value`
    pub tag: Option<String>,
    pub app: Option<String>,
}

async fn list_jobs(State(st): State<ApiState>, Query(q): Query<JobsQuery>) -> ApiResult<Json<Vec<JobRecord>>> {
    let filter = JobFilter {
        state: match q.state.as_deref().filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse::<JobState>().map_err(|_| Error::Config(format!("unknown state {s:?}")))?),
            None => None,
        },
        tag: q.tag.as_deref().filter(|s| !s.is_empty()).map(JobFilter::parse_tag).transpose()?,
        app: q.app.filter(|s| !s.is_empty()),
    };
    Ok(Json(blocking(&st, move |s| s.list(&filter)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobDetail {
    pub job: JobRecord,
    pub transitions: Vec<Transition>,
    pub output_tail: Vec<String>,
}

fn output_tail(job: &JobRecord) -> Vec<String> {
    let text = std::fs::read_to_string(job.workdir.join("output.log")).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(OUTPUT_TAIL_LINES)..].iter().map(|l| l.to_string()).collect()
}

async fn job_detail(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<JobDetail>> {
    let detail = blocking(&st, move |s| {
        let job = s.get(&id)?;
        let transitions = s.transitions(&id)?;
        let output_tail = output_tail(&job);
        Ok(JobDetail { job, transitions, output_tail })
    })
    .await?;
    Ok(Json(detail))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct RerunRequest {
    /// Merged into the job arguments; `null` removes a key.
    pub overrides: Map<String, Value>,
    pub client_token: Option<String>,
}

async fn rerun_job(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    body: Option<Json<RerunRequest>>,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let job = blocking(&st, move |s| s.rerun(&id, &req.overrides, req.client_token.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(job)))
}

async fn kill_job(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(blocking(&st, move |s| s.kill(&id)).await?))
}

fn open_dataset(store: &JobStore, name: &str) -> Result<Dataset, Error> {
    let entry = store.dataset(name)?;
    Dataset::open(&entry.root)
}

async fn list_datasets(State(st): State<ApiState>) -> ApiResult<Json<Value>> {
    let out = blocking(&st, |s| {
        let mut out = Vec::new();
        for e in s.datasets()? {
            let info = Dataset::open(&e.root).ok().map(|d| d.info);
            out.push(json!({
                "name": e.name,
                "root": e.root,
                "registered_at": e.registered_at,
                "info": info,
            }));
        }
        Ok(Value::Array(out))
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SectionView {
    pub section: u32,
    pub status: Option<String>,
    pub verdict: Option<String>,
    pub updated_at: chrono::DateTime<chrono::Utc>,
    /// `[width, height]` the layout predicts.
    pub expected_dims: [u32; 2],
    /// `[width, height]` of the montaged canvas, once written.
    pub actual_dims: Option<[u32; 2]>,
}

async fn list_sections(State(st): State<ApiState>, Path(name): Path<String>) -> ApiResult<Json<Vec<SectionView>>> {
    let out = blocking(&st, move |s| {
        let ds = open_dataset(s, &name)?;
        let (ew, eh) = ds.section_dims();
        Ok(s.sections(&name)?
            .into_iter()
            .map(|e| SectionView {
                section: e.section,
                actual_dims: image::image_dimensions(ds.montage_png(e.section)).ok().map(|(w, h)| [w, h]),
                status: e.status,
                verdict: e.verdict,
                updated_at: e.updated_at,
                expected_dims: [ew, eh],
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Default, Deserialize)]
pub struct PreviewQuery {
    pub scale: Option<u32>,
}

/// Montage canvases come from the montage PNGs; `aligned`, `mask` and `seg`
/// are slices of the stacked volumes.
pub fn render_preview(ds: &Dataset, stage: &str, section: u32, scale: u32) -> Result<Vec<u8>, Error> {
    if scale == 0 || !scale.is_power_of_two() {
        return Err(Error::Config(format!("scale {scale} is not a power of two")));
    }
    let volume_path = match stage {
        "montage" => {
            let img = load_gray_png(ds.montage_png(section))?;
            let (w, h) = img.dimensions();
            let img = if scale > 1 {
                image::imageops::resize(
                    &img,
                    (w / scale).max(1),
                    (h / scale).max(1),
                    image::imageops::FilterType::Triangle,
                )
            } else {
                img
            };
            return Ok(emflow_core::volume::encode_png(&image::DynamicImage::ImageLuma8(img))?);
        }
        "aligned" => ds.aligned_volume(),
        "mask" => ds.mask_volume(),
        "seg" => ds.seg_volume(),
        other => return Err(Error::Config(format!("unknown preview stage {other:?}"))),
    };
    if !ChunkedVolume::exists(&volume_path) {
        return Err(Error::Io {
            path: volume_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "stage output not written yet"),
        });
    }
    let volume = ChunkedVolume::open(&volume_path)?;
    Ok(make_preview(&volume, stage, section as usize, scale)?.to_png()?)
}

async fn preview(
    State(st): State<ApiState>,
    Path((name, stage, section)): Path<(String, String, u32)>,
    Query(q): Query<PreviewQuery>,
) -> ApiResult<Response> {
    let png = blocking(&st, move |s| {
        let ds = open_dataset(s, &name)?;
        render_preview(&ds, &stage, section, q.scale.unwrap_or(1))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response())
}

async fn get_seeds(State(st): State<ApiState>, Path(name): Path<String>) -> ApiResult<Json<SeedList>> {
    let seeds = blocking(&st, move |s| crate::stages::load_seeds(&open_dataset(s, &name)?)).await?;
    Ok(Json(seeds))
}

async fn post_seeds(
    State(st): State<ApiState>,
    Path(name): Path<String>,
    Json(seeds): Json<SeedList>,
) -> ApiResult<Json<Value>> {
    let count = seeds.len();
    blocking(&st, move |s| {
        let ds = open_dataset(s, &name)?;
        let [w, h, d] = ds.volume_dims();
        seeds.validate([w, h, d])?;
        seeds.save(ds.seeds())?;
        Ok(())
    })
    .await?;
    Ok(Json(json!({ "saved": count })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Debug, Deserialize)]
pub struct ReviewRequest {
    pub verdict: Verdict,
    /// Montage parameter overrides for the rerun.
    #[serde(default)]
    pub overrides: Map<String, Value>,
    #[serde(default)]
    pub client_token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub section: u32,
    pub verdict: Verdict,
    pub job: Option<JobRecord>,
}

/// Rejection reruns the section's latest montage job with the overrides
/// merged into its `params`, or submits a fresh one if none exists.
fn review(store: &JobStore, name: &str, section: u32, req: ReviewRequest) -> Result<ReviewResponse, Error> {
    let ds = open_dataset(store, name)?;
    if section as usize >= ds.info.num_sections {
        return Err(Error::Config(format!("dataset {name} has no section {section}")));
    }
    store.add_section(name, section)?;
    let verdict_str = match req.verdict {
        Verdict::Approve => "approved",
        Verdict::Reject => "rejected",
    };
    store.set_section_verdict(name, section, verdict_str)?;
    if req.verdict == Verdict::Approve {
        return Ok(ReviewResponse { section, verdict: req.verdict, job: None });
    }
    let filter = JobFilter { tag: Some(("dataset".into(), name.into())), app: Some("montage".into()), ..Default::default() };
    let latest = store.list(&filter)?.into_iter().filter(|j| j.arg_u64("section") == Some(section as u64)).last();
    let mut overrides = Map::new();
    if !req.overrides.is_empty() {
        overrides.insert("params".into(), Value::Object(req.overrides));
    }
    let job = match latest {
        Some(j) => store.rerun(&j.id, &overrides, req.client_token.as_deref())?,
        None => {
            let mut spec = JobSpec::new("montage")
                .arg("dataset", ds.root.to_string_lossy().into_owned())
                .arg("section", section)
                .tag("dataset", name)
                .tag("stage", "montage")
                .tag("section", section);
            crate::store::merge_args(&mut spec.args, &overrides);
            if let Some(t) = req.client_token {
                spec = spec.tag("client_token", t);
            }
            store.submit(spec)?
        }
    };
    Ok(ReviewResponse { section, verdict: req.verdict, job: Some(job) })
}

async fn post_review(
    State(st): State<ApiState>,
    Path((name, section)): Path<(String, u32)>,
    Json(req): Json<ReviewRequest>,
) -> ApiResult<Json<ReviewResponse>> {
    Ok(Json(blocking(&st, move |s| review(s, &name, section, req)).await?))
}

async fn launcher_status(State(st): State<ApiState>) -> ApiResult<Json<crate::store::LauncherStatus>> {
    Ok(Json(blocking(&st, |s| s.launcher_status()).await?))
}

async fn launcher_pause(State(st): State<ApiState>) -> ApiResult<Json<crate::store::LauncherStatus>> {
    Ok(Json(blocking(&st, |s| {
        s.set_paused(true)?;
        s.launcher_status()
    })
    .await?))
}

async fn launcher_resume(State(st): State<ApiState>) -> ApiResult<Json<crate::store::LauncherStatus>> {
    Ok(Json(blocking(&st, |s| {
        s.set_paused(false)?;
        s.launcher_status()
    })
    .await?))
}

async fn list_sweeps(State(st): State<ApiState>) -> ApiResult<Json<Vec<crate::store::SweepEntry>>> {
    Ok(Json(blocking(&st, |s| s.sweeps()).await?))
}

async fn get_sweep(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = blocking(&st, move |s| s.sweep(&id)).await?;
    Ok(match entry {
        Some(e) => Json(e).into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({ "error": "no such sweep" }))).into_response(),
    })
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/:id", get(job_detail))
        .route("/api/jobs/:id/rerun", post(rerun_job))
        .route("/api/jobs/:id/kill", post(kill_job))
        .route("/api/datasets", get(list_datasets))
        .route("/api/datasets/:d/sections", get(list_sections))
        .route("/api/datasets/:d/previews/:stage/:section", get(preview))
        .route("/api/datasets/:d/seeds", get(get_seeds).post(post_seeds))
        .route("/api/datasets/:d/review/:section", post(post_review))
        .route("/api/launcher", get(launcher_status))
        .route("/api/launcher/pause", post(launcher_pause))
        .route("/api/launcher/resume", post(launcher_resume))
        .route("/api/sweeps", get(list_sweeps))
        .route("/api/sweeps/:id", get(get_sweep))
        .with_state(state)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    store: JobStore,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("api listening on {}", listener.local_addr()?);
    axum::serve(listener, router(ApiState::new(store))).with_graceful_shutdown(shutdown).await
}
