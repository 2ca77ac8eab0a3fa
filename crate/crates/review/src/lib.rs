//! Analyst triage over a detection set: an HTTP API to list detections,
//! render chips, record confirm/reject labels and export the results.
//!
//! Labels go to an append-only JSON-lines journal next to the detections.
//! Opening a session replays it, so the journal alone is the review state.

pub mod chip;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use orsense_core::dataset::{points_csv_string, ImpactClass, Ore, PointClass, PointRecord};
use orsense_core::raster::{read_geotiff, Raster};
use orsense_core::widearea::{csv_header, csv_row, Detection, DetectionSet, Status};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum ReviewError {
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl std::fmt::Display for ReviewError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReviewError::NotFound(m) => write!(f, "not found: {m}"),
            ReviewError::BadRequest(m) => write!(f, "bad request: {m}"),
            ReviewError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for ReviewError {}

impl From<orsense_core::Error> for ReviewError {
    fn from(e: orsense_core::Error) -> Self {
        ReviewError::Internal(e.to_string())
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let code = match self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ReviewError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

type Result<T, E = ReviewError> = std::result::Result<T, E>;

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Label {
    pub id: String,
    pub status: Status,
    /// Analyst override of the model's impact class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<ImpactClass>,
    pub timestamp: String,
}

/// Query filters of `GET /api/detections`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub status: Option<Status>,
    /// `Some(None)` selects detections without an impact class.
    pub impact: Option<Option<ImpactClass>>,
    pub min_p: Option<f64>,
}

impl Filter {
    pub fn parse(q: &HashMap<String, String>) -> Result<Filter> {
        let mut f = Filter::default();
        for (k, v) in q {
            match k.as_str() {
                "status" => f.status = Some(v.parse().map_err(ReviewError::BadRequest)?),
                "impact" => {
                    f.impact = Some(match v.as_str() {
                        "unknown" => None,
                        t => Some(t.parse().map_err(ReviewError::BadRequest)?),
                    })
                }
                "min_p" => {
                    let p: f64 = v.parse().map_err(|_| ReviewError::BadRequest(format!("min_p {v:?} is not a number")))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(ReviewError::BadRequest(format!("min_p {p} outside [0, 1]")));
                    }
                    f.min_p = Some(p);
                }
                other => return Err(ReviewError::BadRequest(format!("unknown filter {other:?}"))),
            }
        }
        Ok(f)
    }

    fn accepts(&self, d: &Detection) -> bool {
        self.status.is_none_or(|s| d.status == s)
            && self.impact.is_none_or(|i| d.impact == i)
            && self.min_p.is_none_or(|p| d.p_mine >= p)
    }
}

pub struct ReviewSession {
    base: DetectionSet,
    index: HashMap<String, usize>,
    mosaic: Raster,
    journal_path: PathBuf,
    labels: RwLock<HashMap<String, Label>>,
    journal: Mutex<File>,
}

/// Default journal location for a detections file.
pub fn journal_path_for(detections: &Path) -> PathBuf {
    let mut s = detections.as_os_str().to_owned();
    s.push(".journal.jsonl");
    PathBuf::from(s)
}

fn replay(path: &Path, index: &HashMap<String, usize>) -> Result<HashMap<String, Label>> {
    let mut labels = HashMap::new();
    let Ok(f) = File::open(path) else {
        return Ok(labels);
    };
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| ReviewError::Internal(format!("reading {}: {e}", path.display())))?;
    let n = lines.len();
    for (k, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let label: Label = match serde_json::from_str(&line) {
            Ok(l) => l,
            // A torn final line is what a crash mid-append leaves behind.
            Err(e) if k + 1 == n => {
                log::warn!("{}: ignoring incomplete last line: {e}", path.display());
                continue;
            }
            Err(e) => return Err(ReviewError::Internal(format!("{}:{}: {e}", path.display(), k + 1))),
        };
        if !index.contains_key(&label.id) {
            log::warn!("{}:{}: unknown detection {}", path.display(), k + 1, label.id);
            continue;
        }
        labels.insert(label.id.clone(), label);
    }
    Ok(labels)
}

impl ReviewSession {
    pub fn open(detections: &Path, mosaic: &Path, journal: Option<PathBuf>) -> Result<ReviewSession> {
        let set = DetectionSet::load(detections)?;
        let mosaic = read_geotiff(mosaic)?;
        let journal = journal.unwrap_or_else(|| journal_path_for(detections));
        ReviewSession::new(set, mosaic, journal)
    }

    pub fn new(set: DetectionSet, mosaic: Raster, journal_path: PathBuf) -> Result<ReviewSession> {
        let mut index = HashMap::new();
        for (k, d) in set.detections.iter().enumerate() {
            if index.insert(d.id.clone(), k).is_some() {
                return Err(ReviewError::Internal(format!("duplicate detection id {}", d.id)));
            }
        }
        let labels = replay(&journal_path, &index)?;
        let io = |e: std::io::Error| ReviewError::Internal(format!("opening {}: {e}", journal_path.display()));
        // Drop a torn last line (never acknowledged) so appends start clean.
        let text = std::fs::read(&journal_path).unwrap_or_default();
        if text.last().is_some_and(|&b| b != b'\n') {
            let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            let f = OpenOptions::new().write(true).open(&journal_path).map_err(io)?;
            f.set_len(keep as u64).map_err(io)?;
        }
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path).map_err(io)?;
        log::info!("review session: {} detections, {} labels replayed", set.detections.len(), labels.len());
        Ok(ReviewSession {
            base: set,
            index,
            mosaic,
            journal_path,
            labels: RwLock::new(labels),
            journal: Mutex::new(journal),
        })
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal_path
    }

    fn current(&self, d: &Detection, labels: &HashMap<String, Label>) -> Detection {
        let mut d = d.clone();
        if let Some(l) = labels.get(&d.id) {
            d.status = l.status;
            if l.impact.is_some() {
                d.impact = l.impact;
            }
        }
        d
    }

    /// All detections with labels applied, in detection-set order.
    pub fn snapshot(&self) -> Vec<Detection> {
        let labels = self.labels.read().unwrap();
        self.base.detections.iter().map(|d| self.current(d, &labels)).collect()
    }

    pub fn get(&self, id: &str) -> Result<Detection> {
        let k = *self.index.get(id).ok_or_else(|| ReviewError::NotFound(format!("detection {id}")))?;
        Ok(self.current(&self.base.detections[k], &self.labels.read().unwrap()))
    }

    /// Filtered detections, highest `p_mine` first.
    pub fn list(&self, filter: &Filter) -> Vec<Detection> {
        let mut v: Vec<Detection> = self.snapshot().into_iter().filter(|d| filter.accepts(d)).collect();
        v.sort_by(|a, b| b.p_mine.total_cmp(&a.p_mine).then_with(|| a.id.cmp(&b.id)));
        v
    }

    pub fn label(&self, id: &str, status: Status, impact: Option<ImpactClass>) -> Result<Detection> {
        if status == Status::Unreviewed {
            return Err(ReviewError::BadRequest("status must be confirmed or rejected".into()));
        }
        if !self.index.contains_key(id) {
            return Err(ReviewError::NotFound(format!("detection {id}")));
        }
        let label = Label {
            id: id.to_string(),
            status,
            impact,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let line = serde_json::to_string(&label).map_err(|e| ReviewError::Internal(e.to_string()))?;
        // The journal lock orders appends and state updates the same way.
        let mut f = self.journal.lock().unwrap();
        writeln!(f, "{line}")
            .and_then(|_| f.sync_data())
            .map_err(|e| ReviewError::Internal(format!("journal append: {e}")))?;
        self.labels.write().unwrap().insert(id.to_string(), label);
        drop(f);
        self.get(id)
    }

    /// Labeled detections with the review columns appended.
    pub fn corrections_csv(&self) -> Result<String> {
        let labels = self.labels.read().unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = csv_header();
        header.extend(["model_impact", "reviewed_at"]);
        w.write_record(&header).map_err(|e| ReviewError::Internal(e.to_string()))?;
        for d in &self.base.detections {
            let Some(l) = labels.get(&d.id) else { continue };
            let mut row = csv_row(&self.current(d, &labels));
            row.push(d.impact.map_or("unknown", |c| c.as_str()).to_string());
            row.push(l.timestamp.clone());
            w.write_record(&row).map_err(|e| ReviewError::Internal(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| ReviewError::Internal(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Rejected detections as background points.
    pub fn hard_negatives(&self) -> Vec<PointRecord> {
        self.snapshot()
            .into_iter()
            .filter(|d| d.status == Status::Rejected)
            .map(|d| PointRecord {
                id: format!("hn-{}", d.id),
                lon: d.lon,
                lat: d.lat,
                class: PointClass::Background,
                ore: Ore::None,
                source: "review".into(),
            })
            .collect()
    }

    pub fn hard_negatives_csv(&self) -> Result<String> {
        Ok(points_csv_string(&self.hard_negatives())?)
    }

    pub fn chip(&self, id: &str, size: usize, bands: &[String]) -> Result<Vec<u8>> {
        let d = self.get(id)?;
        if !(16..=2048).contains(&size) {
            return Err(ReviewError::BadRequest(format!("chip size {size} outside 16..=2048")));
        }
        if bands.len() != 3 {
            return Err(ReviewError::BadRequest(format!("need 3 bands, got {}", bands.len())));
        }
        let mut idx = [0; 3];
        for (k, b) in bands.iter().enumerate() {
            idx[k] = self
                .mosaic
                .band_index(b)
                .ok_or_else(|| ReviewError::BadRequest(format!("mosaic has no band {b}")))?;
        }
        let (r, c) = self.mosaic.geo_to_pixel(d.lon, d.lat).containing();
        Ok(chip::encode_png(&chip::render(&self.mosaic, r, c, size, idx), size))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    status: Status,
    #[serde(default)]
    impact: Option<ImpactClass>,
}

async fn list_detections(State(s): State<Arc<ReviewSession>>, Query(q): Query<HashMap<String, String>>) -> Result<Json<Vec<Detection>>> {
    Ok(Json(s.list(&Filter::parse(&q)?)))
}

async fn get_detection(State(s): State<Arc<ReviewSession>>, UrlPath(id): UrlPath<String>) -> Result<Json<Detection>> {
    Ok(Json(s.get(&id)?))
}

async fn post_label(
    State(s): State<Arc<ReviewSession>>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<LabelBody>, JsonRejection>,
) -> Result<Json<Detection>> {
    let Json(b) = body.map_err(|e| ReviewError::BadRequest(e.body_text()))?;
    Ok(Json(s.label(&id, b.status, b.impact)?))
}

async fn get_chip(
    State(s): State<Arc<ReviewSession>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response> {
    let size = match q.get("size") {
        Some(v) => v.parse().map_err(|_| ReviewError::BadRequest(format!("size {v:?} is not an integer")))?,
        None => chip::DEFAULT_SIZE,
    };
    let bands: Vec<String> = match q.get("bands") {
        Some(v) => v.split(',').map(|b| b.trim().to_string()).collect(),
        None => chip::DEFAULT_BANDS.iter().map(|b| b.to_string()).collect(),
    };
    let png = tokio::task::spawn_blocking(move || s.chip(&id, size, &bands))
        .await
        .map_err(|e| ReviewError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn csv_response(name: &str, body: String) -> Response {
    (
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\"")),
        ],
        body,
    )
        .into_response()
}

async fn export_corrections(State(s): State<Arc<ReviewSession>>) -> Result<Response> {
    Ok(csv_response("corrections.csv", s.corrections_csv()?))
}

async fn export_hard_negatives(State(s): State<Arc<ReviewSession>>) -> Result<Response> {
    Ok(csv_response("hard-negatives.csv", s.hard_negatives_csv()?))
}

async fn index() -> Html<&'static str> {
    Html(include_str!("index.html"))
}

/// The API routes, plus `/` served from `static_dir` when given (the built
/// review UI) or a minimal built-in page otherwise.
pub fn router(session: Arc<ReviewSession>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/detections", get(list_detections))
        .route("/api/detections/{id}", get(get_detection))
        .route("/api/detections/{id}/label", post(post_label))
        .route("/api/chips/{id}", get(get_chip))
        .route("/api/export/corrections", get(export_corrections))
        .route("/api/export/hard-negatives", get(export_hard_negatives))
        .with_state(session);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(index)),
    }
}

pub async fn serve(session: Arc<ReviewSession>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session, static_dir)).await
}
