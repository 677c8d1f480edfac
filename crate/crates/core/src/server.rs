//! Read-only JSON API over a finished pipeline run.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calendar::{bucket_range, parse_day, Bucket, BucketUnit, Month};
use crate::contribution::{
    contribution_series, vocabulary_decomposition, ContributionOptions, CountMode, Kernel, RolloutTable, Term,
};
use crate::corpus::{BigramTokenizer, Tokenizer};
use crate::error::Error;
use crate::index::{aggregate, ReferenceSeries, ScoredSentence, Variant};
use crate::pipeline::RunArtifacts;

/// Largest number of buckets returned by one response.
pub const MAX_BUCKETS: usize = 2000;

/// Everything the API serves; immutable after construction.
pub struct ServedState {
    pub run_id: String,
    pub scored: Vec<ScoredSentence>,
    pub references: BTreeMap<String, ReferenceSeries>,
    pub attention: Option<RolloutTable>,
    pub tokenizer: Box<dyn Tokenizer>,
}

impl ServedState {
    /// State from a run directory; the run's survey DI is served as reference `di`.
    pub fn from_artifacts(artifacts: RunArtifacts) -> Self {
        let mut references = BTreeMap::new();
        if let Some(di) = artifacts.reference {
            references.insert("di".to_string(), di);
        }
        Self {
            run_id: artifacts.manifest.run_id,
            scored: artifacts.scored,
            references,
            attention: None,
            tokenizer: Box::new(BigramTokenizer),
        }
    }

    fn date_span(&self) -> Option<(NaiveDate, NaiveDate)> {
        let first = self.scored.iter().map(|s| s.date).min()?;
        let last = self.scored.iter().map(|s| s.date).max()?;
        Some((first, last))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidInput(_) | Error::Record { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

#[derive(Debug, Default, Deserialize)]
pub struct RangeParams {
    pub from: Option<String>,
    pub to: Option<String>,
    pub bucket: Option<String>,
    pub variant: Option<String>,
    pub term: Option<String>,
    pub method: Option<String>,
    pub name: Option<String>,
}

fn parse_bound(raw: &str, end: bool) -> Result<NaiveDate, ApiError> {
    let raw = raw.trim();
    if raw.len() == 7 {
        let month: Month = raw.parse().map_err(|e: Error| ApiError::bad_request(e.to_string()))?;
        return Ok(if end {
            month.succ().first_day().pred_opt().expect("valid date")
        } else {
            month.first_day()
        });
    }
    parse_day(raw).map_err(|e| ApiError::bad_request(e.to_string()))
}

struct Window {
    unit: BucketUnit,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
}

impl Window {
    fn parse(p: &RangeParams) -> Result<Self, ApiError> {
        let unit = match &p.bucket {
            Some(b) => b.parse().map_err(|e: Error| ApiError::bad_request(e.to_string()))?,
            None => BucketUnit::Month,
        };
        let from = p.from.as_deref().map(|s| parse_bound(s, false)).transpose()?;
        let to = p.to.as_deref().map(|s| parse_bound(s, true)).transpose()?;
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(ApiError::bad_request(format!("from {f} is after to {t}")));
            }
        }
        Ok(Self { unit, from, to })
    }

    fn contains(&self, d: NaiveDate) -> bool {
        self.from.is_none_or(|f| d >= f) && self.to.is_none_or(|t| d <= t)
    }

    /// Consecutive buckets covering the window (or `span` where unbounded), capped.
    fn buckets(&self, span: Option<(NaiveDate, NaiveDate)>) -> (Vec<Bucket>, bool) {
        let (first, last) = match (self.from.or(span.map(|s| s.0)), self.to.or(span.map(|s| s.1))) {
            (Some(f), Some(t)) if f <= t => (f, t),
            _ => return (Vec::new(), false),
        };
        let mut buckets: Vec<Bucket> = bucket_range(self.unit.bucket_of(first), self.unit.bucket_of(last))
            .take(MAX_BUCKETS + 1)
            .collect();
        let truncated = buckets.len() > MAX_BUCKETS;
        buckets.truncate(MAX_BUCKETS);
        (buckets, truncated)
    }
}

fn parse_variant(p: &RangeParams) -> Result<Variant, ApiError> {
    match p.variant.as_deref() {
        None => Ok(Variant::Filtered),
        Some(v) => Variant::parse(v).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown variant {v:?}"))),
    }
}

/// Align sparse `(bucket, value, n)` points on the dense bucket grid, leaving gaps as null.
fn dense(buckets: &[Bucket], points: impl IntoIterator<Item = (Bucket, f64, usize)>) -> (Vec<Value>, Vec<Value>) {
    let map: BTreeMap<Bucket, (f64, usize)> = points.into_iter().map(|(b, v, n)| (b, (v, n))).collect();
    buckets
        .iter()
        .map(|b| match map.get(b) {
            Some((v, n)) => (json!(v), json!(n)),
            None => (Value::Null, Value::Null),
        })
        .unzip()
}

fn labels(buckets: &[Bucket]) -> Vec<String> {
    buckets.iter().map(Bucket::to_string).collect()
}

fn in_window(state: &ServedState, window: &Window) -> Vec<ScoredSentence> {
    state.scored.iter().filter(|s| window.contains(s.date)).cloned().collect()
}

async fn index(State(state): State<Arc<ServedState>>, Query(p): Query<RangeParams>) -> ApiResult {
    let window = Window::parse(&p)?;
    let variant = parse_variant(&p)?;
    let series = aggregate(&in_window(&state, &window), window.unit, variant)?;
    let (buckets, truncated) = window.buckets(state.date_span());
    let (values, n) = dense(&buckets, series.points.iter().map(|q| (q.bucket, q.value, q.n_sentences)));
    Ok(Json(json!({
        "run_id": state.run_id,
        "variant": variant.as_str(),
        "bucket": window.unit.as_str(),
        "buckets": labels(&buckets),
        "values": values,
        "n": n,
        "truncated": truncated,
    })))
}

async fn contribution(State(state): State<Arc<ServedState>>, Query(p): Query<RangeParams>) -> ApiResult {
    let window = Window::parse(&p)?;
    let variant = parse_variant(&p)?;
    let text = p.term.as_deref().unwrap_or("").trim();
    if text.is_empty() {
        return Err(ApiError::bad_request("term must be non-empty"));
    }
    let term = Term::new(text, state.tokenizer.as_ref())?;
    let kernel = match p.method.as_deref().unwrap_or("uniform") {
        "uniform" => Kernel::Uniform,
        "rollout" => match &state.attention {
            Some(table) => Kernel::Rollout(table),
            None => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "rollout contributions need attention data; start the server with an attention file",
                ))
            }
        },
        other => return Err(ApiError::bad_request(format!("unknown method {other:?}"))),
    };
    let options = ContributionOptions {
        variant: Some(variant),
        mode: CountMode::PerOccurrence,
    };
    let series = contribution_series(&in_window(&state, &window), &term, window.unit, kernel, options)?;
    let (buckets, truncated) = window.buckets(state.date_span());
    // Buckets with admitted sentences but no hits report 0; empty buckets are gaps.
    let (values, n) = dense(&buckets, series.points.iter().map(|q| (q.bucket, q.contribution, q.n_hits)));
    Ok(Json(json!({
        "run_id": state.run_id,
        "term": series.term,
        "method": kernel.name(),
        "variant": variant.as_str(),
        "bucket": window.unit.as_str(),
        "buckets": labels(&buckets),
        "values": values,
        "n": n,
        "truncated": truncated,
    })))
}

async fn reference(State(state): State<Arc<ServedState>>, Query(p): Query<RangeParams>) -> ApiResult {
    let name = p.name.clone().unwrap_or_else(|| "di".to_string());
    let series = state
        .references
        .get(&name)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown reference series {name:?}")))?;
    let window = Window::parse(&RangeParams { bucket: None, ..p })?;
    let points: Vec<(Bucket, f64, usize)> = series
        .pairs()
        .into_iter()
        .filter(|(b, _)| window.contains(b.start()))
        .map(|(b, v)| (b, v, 1))
        .collect();
    let span = points.first().zip(points.last()).map(|(a, b)| (a.0.start(), b.0.start()));
    let (buckets, truncated) = window.buckets(span);
    let (values, _) = dense(&buckets, points);
    Ok(Json(json!({
        "name": name,
        "bucket": "month",
        "buckets": labels(&buckets),
        "values": values,
        "truncated": truncated,
    })))
}

#[derive(Serialize)]
struct Meta<'a> {
    run_id: &'a str,
    variants: [&'static str; 2],
    buckets: [&'static str; 3],
    methods: Vec<&'static str>,
    references: Vec<&'a str>,
    first_date: Option<String>,
    last_date: Option<String>,
    n_sentences: usize,
    n_inliers: usize,
}

async fn meta(State(state): State<Arc<ServedState>>) -> ApiResult {
    let span = state.date_span();
    let mut methods = vec!["uniform"];
    if state.attention.is_some() {
        methods.push("rollout");
    }
    let meta = Meta {
        run_id: &state.run_id,
        variants: [Variant::Filtered.as_str(), Variant::Unfiltered.as_str()],
        buckets: [BucketUnit::Day.as_str(), BucketUnit::Week.as_str(), BucketUnit::Month.as_str()],
        methods,
        references: state.references.keys().map(String::as_str).collect(),
        first_date: span.map(|s| s.0.to_string()),
        last_date: span.map(|s| s.1.to_string()),
        n_sentences: state.scored.len(),
        n_inliers: state.scored.iter().filter(|s| s.inlier).count(),
    };
    Ok(Json(serde_json::to_value(meta).map_err(Error::from)?))
}

async fn decomposition(State(state): State<Arc<ServedState>>, Query(p): Query<RangeParams>) -> ApiResult {
    let window = Window::parse(&p)?;
    let variant = parse_variant(&p)?;
    let rows = vocabulary_decomposition(&in_window(&state, &window), window.unit, variant)?;
    Ok(Json(json!({
        "variant": variant.as_str(),
        "bucket": window.unit.as_str(),
        "buckets": rows.iter().map(|r| r.bucket.to_string()).collect::<Vec<_>>(),
        "index": rows.iter().map(|r| r.index).collect::<Vec<_>>(),
        "vocabulary_sum": rows.iter().map(|r| r.vocabulary_sum).collect::<Vec<_>>(),
        "n_terms": rows.first().map_or(0, |r| r.n_terms),
    })))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: Arc<ServedState>) -> Router {
    Router::new()
        .route("/api/v1/index", get(index))
        .route("/api/v1/contribution", get(contribution))
        .route("/api/v1/reference", get(reference))
        .route("/api/v1/meta", get(meta))
        .route("/api/v1/debug/decomposition", get(decomposition))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: ServedState) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {}", addr);
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
