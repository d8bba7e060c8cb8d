//! Survey HTTP API.
//!
//! | route                  | result                                         |
//! |------------------------|------------------------------------------------|
//! | `GET /api/session?seed=N` | `{session_id, images}` in display order     |
//! | `GET /api/image/{id}`  | 8-bit binary PGM                               |
//! | `POST /api/response`   | `{ok: true}` or `422 {errors: [{field, message}]}` |
//! | `GET /api/report`      | survey report as JSON                          |
//! | `GET /api/report.csv`  | per-image accuracy rows                        |
//!
//! Image ids are opaque digests, so neither ids nor payloads reveal which
//! pool an image came from.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cellsynth::survey::{self, FieldError, Label, ResponseLog, SurveyResponse, SurveySession};
use cellsynth::train::config_hash;
use serde::Deserialize;

/// One image the survey can show.
#[derive(Debug, Clone)]
pub struct PoolImage {
    pub path: PathBuf,
    pub truth: Label,
}

pub struct SurveyState {
    images: BTreeMap<String, PoolImage>,
    synthetic: Vec<String>,
    real: Vec<String>,
    default_seed: u64,
    sessions: RwLock<HashMap<String, Arc<SurveySession>>>,
    log: Mutex<ResponseLog>,
}

/// Opaque id for a file: a digest of its pool and path.
pub fn image_id(truth: Label, path: &std::path::Path) -> String {
    format!("img_{}", config_hash(&format!("{truth}:{}", path.display())))
}

impl SurveyState {
    pub fn new(synthetic: Vec<PathBuf>, real: Vec<PathBuf>, log: ResponseLog, default_seed: u64) -> Self {
        let mut images = BTreeMap::new();
        let mut ids = |paths: Vec<PathBuf>, truth: Label| -> Vec<String> {
            paths
                .into_iter()
                .map(|path| {
                    let id = image_id(truth, &path);
                    images.insert(id.clone(), PoolImage { path, truth });
                    id
                })
                .collect()
        };
        let synthetic = ids(synthetic, Label::Synthetic);
        let real = ids(real, Label::Real);
        SurveyState {
            images,
            synthetic,
            real,
            default_seed,
            sessions: RwLock::new(HashMap::new()),
            log: Mutex::new(log),
        }
    }

    fn truth(&self) -> BTreeMap<String, Label> {
        self.images.iter().map(|(id, p)| (id.clone(), p.truth)).collect()
    }

    fn session(&self, seed: u64) -> Result<Arc<SurveySession>, cellsynth::Error> {
        let s = Arc::new(survey::create_session(&self.synthetic, &self.real, seed)?);
        self.sessions
            .write()
            .expect("session map lock")
            .insert(s.session_id.clone(), Arc::clone(&s));
        Ok(s)
    }
}

pub fn router(state: Arc<SurveyState>) -> Router {
    Router::new()
        .route("/api/session", get(get_session))
        .route("/api/image/:id", get(get_image))
        .route("/api/response", post(post_response))
        .route("/api/report", get(get_report))
        .route("/api/report.csv", get(get_report_csv))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct SessionQuery {
    seed: Option<u64>,
}

async fn get_session(State(st): State<Arc<SurveyState>>, Query(q): Query<SessionQuery>) -> Response {
    match st.session(q.seed.unwrap_or(st.default_seed)) {
        Ok(s) => Json(s.client_view()).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_image(State(st): State<Arc<SurveyState>>, Path(id): Path<String>) -> Response {
    let Some(img) = st.images.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no image {id}"));
    };
    match cellsynth::Image::load_pgm(&img.path) {
        Ok(im) => ([(header::CONTENT_TYPE, "image/x-portable-graymap")], im.to_pgm_bytes()).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Body of `POST /api/response`; the timestamp defaults to the server clock.
#[derive(Debug, Deserialize)]
pub struct ResponseBody {
    pub session_id: String,
    pub participant_id: String,
    pub image_id: String,
    pub guess: String,
    pub confidence: i64,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

fn field_errors(errors: Vec<FieldError>) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(serde_json::json!({ "errors": errors }))).into_response()
}

async fn post_response(State(st): State<Arc<SurveyState>>, Json(body): Json<ResponseBody>) -> Response {
    let session = st.sessions.read().expect("session map lock").get(&body.session_id).cloned();
    let Some(session) = session else {
        return field_errors(vec![FieldError { field: "session_id".into(), message: "unknown session".into() }]);
    };
    let guess = match body.guess.parse::<Label>() {
        Ok(g) => g,
        Err(_) => {
            return field_errors(vec![FieldError { field: "guess".into(), message: "must be real or synthetic".into() }])
        }
    };
    let timestamp = body.timestamp.unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
    });
    let response = SurveyResponse {
        participant_id: body.participant_id,
        image_id: body.image_id,
        guess,
        confidence: body.confidence,
        explanation: body.explanation.filter(|e| !e.trim().is_empty()),
        timestamp,
    };
    if let Err(errs) = response.validate(&session) {
        return field_errors(errs);
    }
    let log = st.log.lock().expect("response log lock");
    match log.append(&response) {
        Ok(()) => Json(serde_json::json!({ "ok": true })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn current_report(st: &SurveyState) -> Result<survey::SurveyReport, Response> {
    let responses = {
        let log = st.log.lock().expect("response log lock");
        log.read_all().map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    };
    survey::report(&responses, &st.truth()).map_err(|e| error(StatusCode::NOT_FOUND, e.to_string()))
}

async fn get_report(State(st): State<Arc<SurveyState>>) -> Response {
    match current_report(&st) {
        Ok(r) => Json(r).into_response(),
        Err(resp) => resp,
    }
}

async fn get_report_csv(State(st): State<Arc<SurveyState>>) -> Response {
    match current_report(&st) {
        Ok(r) => ([(header::CONTENT_TYPE, "text/csv")], survey::per_image_csv(&r)).into_response(),
        Err(resp) => resp,
    }
}
