//! HTTP service under `/api/v1`, plus the console bundle under `/console`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query as UrlQuery, State};
use axum::http::header::{HeaderValue, AUTHORIZATION, WARNING};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::clock::{parse_rfc3339, serde_ms, Timestamp};
use crate::config::{Module, ServiceConfig};
use crate::dashboards::{OwnerKind, Panel, Visibility};
use crate::devices::DeviceSpec;
use crate::error::{Error, Result};
use crate::faultwatch::{FaultClass, Window};
use crate::floorplan::GridCell;
use crate::ids::{AssignmentId, DeviceId, MemberId, PlanId, TemplateId};
use crate::platform::Lab;
use crate::registry::{NewMember, Principal};
use crate::surveys::{Cadence, ComplianceFilter};
use crate::tsstore::{Aggregate, DataPoint, Query, Sample, Selector};

pub const API_PREFIX: &str = "/api/v1";

/// Error envelope: `{code, message, detail?}`.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::PermissionDenied(_) => StatusCode::FORBIDDEN,
        Error::NotFound { .. } | Error::UnknownId | Error::ModuleDisabled(_) => StatusCode::NOT_FOUND,
        Error::DuplicateUsername(_)
        | Error::DuplicateDeviceId(_)
        | Error::DuplicateAssignment
        | Error::SeatConflict(_)
        | Error::AlreadyExists(_)
        | Error::AlreadyCompleted
        | Error::WindowClosed(_) => StatusCode::CONFLICT,
        Error::Io(_) | Error::Serde(_) | Error::Bind(_) | Error::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
        Error::TargetUnreachable(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn detail_for(e: &Error) -> Option<Value> {
    match e {
        Error::NotFound { kind, id } => Some(json!({ "kind": kind, "id": id })),
        Error::OutOfBounds { col, row } => Some(json!({ "col": col, "row": row })),
        Error::CoordinateOutOfBounds { x, y } => Some(json!({ "x_m": x, "y_m": y })),
        Error::ModuleDisabled(m) => Some(json!({ "module": m })),
        _ => None,
    }
}

/// The envelope body for an error.
pub fn envelope(e: &Error) -> Value {
    let mut body = json!({ "code": e.code(), "message": e.to_string() });
    if let Some(d) = detail_for(e) {
        body["detail"] = d;
    }
    body
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(envelope(&self.0))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// The authenticated caller. Missing or bad tokens yield anonymous.
pub struct Actor(pub Principal);

impl FromRequestParts<Arc<Lab>> for Actor {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, lab: &Arc<Lab>) -> std::result::Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        Ok(Actor(lab.authenticate(token)))
    }
}

/// Parses a JSON body, collecting unknown keys instead of failing on them.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, Vec<String>)> {
    let value: Value = if bytes.is_empty() {
        json!({})
    } else {
        serde_json::from_slice(bytes).map_err(|e| Error::InvalidArgument(format!("request body is not JSON: {e}")))?
    };
    let mut ignored = Vec::new();
    let parsed = serde_ignored::deserialize(value, |path| ignored.push(path.to_string()))
        .map_err(|e| Error::InvalidArgument(format!("invalid request body: {e}")))?;
    Ok((parsed, ignored))
}

/// A JSON response that may carry a `Warning` header naming ignored fields.
struct Reply<T> {
    status: StatusCode,
    body: T,
    ignored: Vec<String>,
}

impl<T> Reply<T> {
    fn ok(body: T) -> Self {
        Reply { status: StatusCode::OK, body, ignored: Vec::new() }
    }

    fn created(body: T, ignored: Vec<String>) -> Self {
        Reply { status: StatusCode::CREATED, body, ignored }
    }

    fn with_ignored(body: T, ignored: Vec<String>) -> Self {
        Reply { status: StatusCode::OK, body, ignored }
    }
}

impl<T: Serialize> IntoResponse for Reply<T> {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if !self.ignored.is_empty() {
            let text = format!("299 lablink \"ignored unknown fields: {}\"", self.ignored.join(", "));
            if let Ok(v) = HeaderValue::from_str(&text) {
                resp.headers_mut().insert(WARNING, v);
            }
        }
        resp
    }
}

fn parse_time(name: &str, raw: &str) -> Result<Timestamp> {
    parse_rfc3339(raw).ok_or_else(|| Error::InvalidArgument(format!("{name} is not an RFC 3339 timestamp: {raw:?}")))
}

/// Seconds, or a number with an `ms`, `s`, `m`, `h` or `d` suffix.
pub fn parse_duration_s(raw: &str) -> Result<f64> {
    let raw = raw.trim();
    let (num, scale) = if let Some(n) = raw.strip_suffix("ms") {
        (n, 0.001)
    } else if let Some(n) = raw.strip_suffix('s') {
        (n, 1.0)
    } else if let Some(n) = raw.strip_suffix('m') {
        (n, 60.0)
    } else if let Some(n) = raw.strip_suffix('h') {
        (n, 3600.0)
    } else if let Some(n) = raw.strip_suffix('d') {
        (n, 86400.0)
    } else {
        (raw, 1.0)
    };
    num.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(|v| v * scale)
        .ok_or_else(|| Error::InvalidArgument(format!("invalid duration {raw:?}")))
}

// ---- request bodies ----

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

#[derive(Deserialize)]
struct FloorplanBody {
    name: String,
    cell_size_m: f64,
    cols: u32,
    rows: u32,
}

#[derive(Deserialize)]
struct SeatBody {
    member_id: MemberId,
    plan_id: PlanId,
    cell: GridCell,
    #[serde(default, with = "serde_ms::option")]
    valid_from: Option<Timestamp>,
    #[serde(default, with = "serde_ms::option")]
    valid_to: Option<Timestamp>,
}

#[derive(Deserialize)]
struct LocationBody {
    plan_id: PlanId,
    cell: GridCell,
}

#[derive(Deserialize)]
struct TemplateBody {
    title: String,
    provider_url: String,
    cadence: Cadence,
}

#[derive(Deserialize)]
struct AssignmentBody {
    member_id: MemberId,
    template_id: TemplateId,
    #[serde(with = "serde_ms")]
    open_time: Timestamp,
    #[serde(with = "serde_ms")]
    close_time: Timestamp,
}

#[derive(Deserialize)]
struct ExtendBody {
    #[serde(with = "serde_ms")]
    close_time: Timestamp,
}

#[derive(Deserialize)]
struct CallbackBody {
    anonymous_id: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Deserialize)]
struct SweepBody {
    #[serde(default, with = "serde_ms::option")]
    from: Option<Timestamp>,
    #[serde(default, with = "serde_ms::option")]
    to: Option<Timestamp>,
}

#[derive(Deserialize)]
struct DashboardPatch {
    #[serde(default)]
    panels: Option<Vec<Panel>>,
    #[serde(default)]
    visibility: Option<Visibility>,
}

#[derive(Deserialize)]
struct RadiusParams {
    radius_m: Option<f64>,
}

#[derive(Deserialize)]
struct SnapParams {
    x_m: f64,
    y_m: f64,
}

#[derive(Deserialize)]
struct FaultParams {
    since: Option<String>,
    class: Option<String>,
}

#[derive(Deserialize)]
struct ComplianceParams {
    member_id: Option<MemberId>,
    template_id: Option<TemplateId>,
    from: Option<String>,
    to: Option<String>,
}

// ---- handlers ----

async fn health(State(lab): State<Arc<Lab>>) -> Json<Value> {
    Json(json!({ "status": "ok", "modules": lab.health() }))
}

async fn login(State(lab): State<Arc<Lab>>, body: Bytes) -> ApiResult<Response> {
    let (b, ignored): (LoginBody, _) = parse_body(&body)?;
    let (token, member) = lab.login(&b.username, &b.password)?;
    Ok(Reply::with_ignored(json!({ "token": token, "member": member }), ignored).into_response())
}

async fn create_member(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    let (spec, ignored): (NewMember, _) = parse_body(&body)?;
    Ok(Reply::created(lab.create_member(&actor, spec)?, ignored).into_response())
}

async fn list_members(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.members(&actor)?).into_response())
}

async fn delete_member(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Reply::ok(lab.delete_member(&actor, &MemberId::from(id))?).into_response())
}

async fn me(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.me(&actor)?).into_response())
}

async fn export_me(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.export_own_data(&actor)?).into_response())
}

async fn rotate_secret(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    let id = actor.member_id().cloned().ok_or_else(|| Error::PermissionDenied("not signed in".into()))?;
    Ok(Reply::ok(lab.rotate_secret(&actor, &id)?).into_response())
}

async fn create_floorplan(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    let (b, ignored): (FloorplanBody, _) = parse_body(&body)?;
    Ok(Reply::created(lab.create_floorplan(&actor, &b.name, b.cell_size_m, b.cols, b.rows)?, ignored).into_response())
}

async fn list_floorplans(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.floorplans(&actor)?).into_response())
}

async fn snap(
    State(lab): State<Arc<Lab>>,
    Actor(actor): Actor,
    Path(id): Path<String>,
    UrlQuery(p): UrlQuery<SnapParams>,
) -> ApiResult<Response> {
    let plan_id = PlanId::from(id);
    let cell = lab.snap_to_grid(&actor, &plan_id, p.x_m, p.y_m)?;
    Ok(Reply::ok(json!({ "cell": cell })).into_response())
}

async fn assign_seat(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    let (b, ignored): (SeatBody, _) = parse_body(&body)?;
    let seat = lab.assign_seat(&actor, &b.member_id, &b.plan_id, b.cell, b.valid_from, b.valid_to)?;
    Ok(Reply::created(seat, ignored).into_response())
}

async fn nearby_devices(
    State(lab): State<Arc<Lab>>,
    Actor(actor): Actor,
    Path(id): Path<String>,
    UrlQuery(p): UrlQuery<RadiusParams>,
) -> ApiResult<Response> {
    let radius = p.radius_m.unwrap_or(lab.config().dashboards.default_radius_m);
    let devices = lab.nearby_devices(&actor, &MemberId::from(id), radius)?;
    Ok(Reply::ok(json!({ "radius_m": radius, "devices": devices })).into_response())
}

async fn register_device(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    let (spec, ignored): (DeviceSpec, _) = parse_body(&body)?;
    Ok(Reply::created(lab.register_device(&actor, spec)?, ignored).into_response())
}

async fn list_devices(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.devices(&actor)?).into_response())
}

async fn get_device(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Reply::ok(lab.device(&actor, &DeviceId::from(id))?).into_response())
}

async fn retire_device(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Reply::ok(lab.retire_device(&actor, &DeviceId::from(id))?).into_response())
}

async fn move_device(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let (b, ignored): (LocationBody, _) = parse_body(&body)?;
    Ok(Reply::with_ignored(lab.move_device(&actor, &DeviceId::from(id), &b.plan_id, b.cell)?, ignored).into_response())
}

async fn device_fields(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Reply::ok(lab.list_known_fields(&actor, &DeviceId::from(id))?).into_response())
}

async fn ingest(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    let batch: Value = serde_json::from_slice(&body).map_err(|e| Error::MalformedBatch(e.to_string()))?;
    Ok(Reply::ok(lab.ingest(&actor, &batch)?).into_response())
}

#[derive(Serialize)]
struct RawResponse {
    agg: Aggregate,
    points: Vec<DataPoint>,
}

#[derive(Serialize)]
struct AggregatedResponse {
    agg: Aggregate,
    every_s: Option<f64>,
    selector: Selector,
    points: Vec<Sample>,
}

async fn query(State(lab): State<Arc<Lab>>, Actor(actor): Actor, UrlQuery(params): UrlQuery<Vec<(String, String)>>) -> ApiResult<Response> {
    let mut selector = Selector::new();
    let mut from = None;
    let mut to = None;
    let mut agg = Aggregate::Raw;
    let mut every = None;
    for (k, v) in params {
        if let Some(tag) = k.strip_prefix("tag.") {
            selector = selector.tag(tag, v);
            continue;
        }
        match k.as_str() {
            "from" => from = Some(parse_time("from", &v)?),
            "to" => to = Some(parse_time("to", &v)?),
            "agg" => agg = v.parse()?,
            "every" => every = Some(parse_duration_s(&v)?),
            other => return Err(Error::InvalidArgument(format!("unknown query parameter {other:?}")).into()),
        }
    }
    let from = from.ok_or_else(|| Error::InvalidArgument("from is required".into()))?;
    let to = to.ok_or_else(|| Error::InvalidArgument("to is required".into()))?;
    if agg == Aggregate::Raw {
        let points = lab.query_points(&actor, &selector, from, to)?;
        return Ok(Reply::ok(RawResponse { agg, points }).into_response());
    }
    let series = lab.query(&actor, &Query { selector, from, to, agg, every_s: every })?;
    Ok(Reply::ok(AggregatedResponse { agg, every_s: every, selector: series.selector, points: series.points }).into_response())
}

async fn add_template(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    lab.config().require(Module::Surveys)?;
    let (b, ignored): (TemplateBody, _) = parse_body(&body)?;
    Ok(Reply::created(lab.add_template(&actor, &b.title, &b.provider_url, b.cadence)?, ignored).into_response())
}

async fn list_templates(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.templates(&actor)?).into_response())
}

async fn schedule(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    lab.config().require(Module::Surveys)?;
    let (b, ignored): (AssignmentBody, _) = parse_body(&body)?;
    let (assignment, outbox) = lab.schedule(&actor, &b.member_id, &b.template_id, b.open_time, b.close_time)?;
    Ok(Reply::created(json!({ "assignment": assignment, "outbox": outbox }), ignored).into_response())
}

async fn list_assignments(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(lab.assignments(&actor)?).into_response())
}

async fn extend(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    lab.config().require(Module::Surveys)?;
    let (b, ignored): (ExtendBody, _) = parse_body(&body)?;
    Ok(Reply::with_ignored(lab.extend_deadline(&actor, &AssignmentId::from(id), b.close_time)?, ignored).into_response())
}

async fn redistribute(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path(id): Path<String>) -> ApiResult<Response> {
    let (assignment, outbox) = lab.redistribute(&actor, &AssignmentId::from(id))?;
    Ok(Reply::ok(json!({ "assignment": assignment, "outbox": outbox })).into_response())
}

async fn callback(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    lab.config().require(Module::Surveys)?;
    let (b, ignored): (CallbackBody, _) = parse_body(&body)?;
    Ok(Reply::with_ignored(lab.record_completion(&actor, &b.anonymous_id, b.payload)?, ignored).into_response())
}

async fn compliance(State(lab): State<Arc<Lab>>, Actor(actor): Actor, UrlQuery(p): UrlQuery<ComplianceParams>) -> ApiResult<Response> {
    lab.config().require(Module::Surveys)?;
    let filter = ComplianceFilter {
        member_id: p.member_id,
        template_id: p.template_id,
        from: p.from.as_deref().map(|v| parse_time("from", v)).transpose()?,
        to: p.to.as_deref().map(|v| parse_time("to", v)).transpose()?,
    };
    Ok(Reply::ok(lab.compliance(&actor, &filter)?).into_response())
}

async fn faults(State(lab): State<Arc<Lab>>, Actor(actor): Actor, UrlQuery(p): UrlQuery<FaultParams>) -> ApiResult<Response> {
    lab.config().require(Module::Faultwatch)?;
    let since = p.since.as_deref().map(|v| parse_time("since", v)).transpose()?;
    let class: Option<FaultClass> = p.class.as_deref().map(str::parse).transpose()?;
    Ok(Reply::ok(lab.faults(&actor, since, class)?).into_response())
}

async fn sweep(State(lab): State<Arc<Lab>>, Actor(actor): Actor, body: Bytes) -> ApiResult<Response> {
    lab.config().require(Module::Faultwatch)?;
    let (b, ignored): (SweepBody, _) = parse_body(&body)?;
    let window = match (b.from, b.to) {
        (None, None) => None,
        (from, to) => {
            let to = to.unwrap_or_else(|| lab.now());
            let from = from.unwrap_or_else(|| to - chrono::Duration::seconds(lab.config().sweep_lookback_s));
            Some(Window::new(from, to)?)
        }
    };
    let fresh = lab.sweep(&actor, window)?;
    Ok(Reply::with_ignored(json!({ "new_reports": fresh }), ignored).into_response())
}

fn owner_kind(raw: &str) -> Result<OwnerKind> {
    raw.parse()
}

async fn get_dashboard(State(lab): State<Arc<Lab>>, Actor(actor): Actor, Path((kind, owner)): Path<(String, String)>) -> ApiResult<Response> {
    lab.config().require(Module::Dashboards)?;
    Ok(Reply::ok(lab.render_dashboard(&actor, owner_kind(&kind)?, &owner)?).into_response())
}

async fn get_dashboard_definition(
    State(lab): State<Arc<Lab>>,
    Actor(actor): Actor,
    Path((kind, owner)): Path<(String, String)>,
) -> ApiResult<Response> {
    lab.config().require(Module::Dashboards)?;
    Ok(Reply::ok(lab.dashboard(&actor, owner_kind(&kind)?, &owner)?).into_response())
}

async fn patch_dashboard(
    State(lab): State<Arc<Lab>>,
    Actor(actor): Actor,
    Path((kind, owner)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    lab.config().require(Module::Dashboards)?;
    let (b, ignored): (DashboardPatch, _) = parse_body(&body)?;
    let d = lab.update_dashboard(&actor, owner_kind(&kind)?, &owner, b.panels, b.visibility)?;
    Ok(Reply::with_ignored(d, ignored).into_response())
}

async fn refresh_dashboards(State(lab): State<Arc<Lab>>, Actor(actor): Actor) -> ApiResult<Response> {
    Ok(Reply::ok(json!({ "refreshed": lab.refresh_member_dashboards(&actor)? })).into_response())
}

async fn console_bootstrap() -> Json<Value> {
    Json(json!({ "api_base_url": API_PREFIX, "poll_interval_s": 15 }))
}

async fn console_placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>lablink console</title>\
         <p>The console bundle is not installed. Set <code>console_dir</code> to serve it here.</p>",
    )
}

async fn not_found() -> ApiError {
    ApiError(Error::not_found("route", "unknown endpoint"))
}

/// The full router over a platform instance.
pub fn router(lab: Arc<Lab>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/auth/token", post(login))
        .route("/members", post(create_member).get(list_members))
        .route("/members/{id}", axum::routing::delete(delete_member))
        .route("/members/{id}/nearby-devices", get(nearby_devices))
        .route("/me", get(me))
        .route("/me/export", get(export_me))
        .route("/me/rotate-secret", post(rotate_secret))
        .route("/floorplans", post(create_floorplan).get(list_floorplans))
        .route("/floorplans/{id}/snap", get(snap))
        .route("/seats", post(assign_seat))
        .route("/devices", post(register_device).get(list_devices))
        .route("/devices/{id}", get(get_device).delete(retire_device))
        .route("/devices/{id}/location", patch(move_device))
        .route("/devices/{id}/fields", get(device_fields))
        .route("/points", post(ingest))
        .route("/query", get(query))
        .route("/surveys/templates", post(add_template).get(list_templates))
        .route("/surveys/assignments", post(schedule).get(list_assignments))
        .route("/surveys/assignments/{id}/extend", post(extend))
        .route("/surveys/assignments/{id}/redistribute", post(redistribute))
        .route("/surveys/callback", post(callback))
        .route("/surveys/compliance", get(compliance))
        .route("/faults", get(faults))
        .route("/faults/sweep", post(sweep))
        .route("/dashboards/refresh", post(refresh_dashboards))
        .route("/dashboards/{kind}/{owner}", get(get_dashboard).patch(patch_dashboard))
        .route("/dashboards/{kind}/{owner}/definition", get(get_dashboard_definition))
        .fallback(not_found);

    let console = match lab.config().console_dir.clone() {
        Some(dir) => Router::new()
            .route("/console/bootstrap.json", get(console_bootstrap))
            .nest_service("/console", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => Router::new()
            .route("/console/bootstrap.json", get(console_bootstrap))
            .route("/console", get(console_placeholder))
            .route("/console/", get(console_placeholder)),
    };

    Router::new().nest(API_PREFIX, api).merge(console).with_state(lab)
}

/// A running service.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    pub lab: Arc<Lab>,
    shutdown: watch::Sender<bool>,
    server: JoinHandle<std::io::Result<()>>,
    jobs: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    /// Stops accepting connections, drains in-flight requests and waits.
    pub async fn shutdown(self) -> Result<()> {
        let _ = self.shutdown.send(true);
        for j in self.jobs {
            j.abort();
        }
        self.server.await.map_err(|e| Error::Io(std::io::Error::other(e)))??;
        Ok(())
    }

    /// Waits until the server exits on its own or `signal` fires.
    pub async fn run_until(self, signal: impl std::future::Future<Output = ()>) -> Result<()> {
        signal.await;
        self.shutdown().await
    }
}

/// Validates `config`, opens the platform and binds. Configuration errors
/// surface before any socket is opened.
pub async fn serve(config: ServiceConfig) -> Result<ServiceHandle> {
    config.validate()?;
    let lab = Arc::new(Lab::open(config)?);
    serve_lab(lab).await
}

pub async fn serve_lab(lab: Arc<Lab>) -> Result<ServiceHandle> {
    let address = lab.config().listen_address.clone();
    let listener = TcpListener::bind(&address).await.map_err(|e| Error::Bind(format!("{address}: {e}")))?;
    let addr = listener.local_addr()?;
    let (tx, mut rx) = watch::channel(false);
    let app = router(lab.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.wait_for(|stop| *stop).await;
            })
            .await
    });
    let mut jobs = Vec::new();
    let cfg = lab.config();
    if cfg.sweep_period_s > 0 && cfg.is_enabled(Module::Faultwatch) {
        jobs.push(periodic(lab.clone(), cfg.sweep_period_s, "sweep", |lab| lab.run_sweep(None).map(|r| r.len())));
    }
    if cfg.dashboards.radius_refresh_s > 0 && cfg.is_enabled(Module::Dashboards) {
        jobs.push(periodic(lab.clone(), cfg.dashboards.radius_refresh_s, "dashboard refresh", |lab| {
            lab.reseed_all_member_dashboards()
        }));
    }
    tracing::info!(%addr, "listening");
    Ok(ServiceHandle { addr, lab, shutdown: tx, server, jobs })
}

fn periodic(lab: Arc<Lab>, period_s: u64, name: &'static str, job: fn(&Lab) -> Result<usize>) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(period_s));
        tick.tick().await;
        loop {
            tick.tick().await;
            let lab = lab.clone();
            match tokio::task::spawn_blocking(move || job(&lab)).await {
                Ok(Ok(n)) => tracing::info!(job = name, n, "job finished"),
                Ok(Err(e)) => tracing::warn!(job = name, error = %e, "job failed"),
                Err(e) => tracing::warn!(job = name, error = %e, "job panicked"),
            }
        }
    })
}

/// Query-string helper for clients: `tag.<k>=<v>` pairs plus the rest.
pub fn query_string(selector: &BTreeMap<String, String>, rest: &[(&str, String)]) -> String {
    let mut ser = Vec::new();
    for (k, v) in selector {
        ser.push(format!("tag.{}={}", urlencode(k), urlencode(v)));
    }
    for (k, v) in rest {
        ser.push(format!("{}={}", urlencode(k), urlencode(v)));
    }
    ser.join("&")
}

fn urlencode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}
