use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{ConsentRecord, ConsentSubmission, Registry, RegistryApi, RegistryError, RegistryRecord};
use crate::state::{DeviceId, DeviceProfile, Position, Timestamp};

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for RegistryError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn parse_id(text: &str) -> Result<DeviceId, RegistryError> {
    DeviceId::parse(text).map_err(|e| RegistryError::BadRequest(e.to_string()))
}

type Shared = State<Arc<Registry>>;

async fn put_device(
    State(reg): Shared,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(profile): Json<DeviceProfile>,
) -> Result<Json<RegistryRecord>, RegistryError> {
    let id = parse_id(&id)?;
    if profile.policy.purposes.is_empty() {
        return Err(RegistryError::BadRequest("policy needs at least one purpose".into()));
    }
    reg.put_device(bearer(&headers), id, profile).map(Json)
}

async fn get_device(
    State(reg): Shared,
    Path(id): Path<String>,
) -> Result<Json<RegistryRecord>, RegistryError> {
    reg.get_device(&parse_id(&id)?).map(Json)
}

async fn delete_device(
    State(reg): Shared,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<StatusCode, RegistryError> {
    reg.delete_device(bearer(&headers), &parse_id(&id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct NearbyQuery {
    x: f64,
    y: f64,
    radius: f64,
}

async fn nearby(
    State(reg): Shared,
    Query(q): Query<NearbyQuery>,
) -> Result<Json<Vec<RegistryRecord>>, RegistryError> {
    if !q.x.is_finite() || !q.y.is_finite() {
        return Err(RegistryError::BadRequest("coordinates must be finite".into()));
    }
    reg.nearby(&Position::from_meters(q.x, q.y), q.radius).map(Json)
}

async fn post_consent(
    State(reg): Shared,
    headers: HeaderMap,
    Json(submission): Json<ConsentSubmission>,
) -> Result<(StatusCode, Json<ConsentRecord>), RegistryError> {
    let record = reg.post_consent(bearer(&headers), submission)?;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Deserialize)]
struct ConsentQuery {
    device_id: String,
    #[serde(default)]
    since: Timestamp,
}

async fn get_consents(
    State(reg): Shared,
    headers: HeaderMap,
    Query(q): Query<ConsentQuery>,
) -> Result<Json<Vec<ConsentRecord>>, RegistryError> {
    let id = parse_id(&q.device_id)?;
    reg.get_consents(bearer(&headers), &id, q.since).map(Json)
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/devices", get(nearby))
        .route(
            "/devices/{id}",
            get(get_device).put(put_device).delete(delete_device),
        )
        .route("/consents", post(post_consent).get(get_consents))
        .with_state(registry)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    registry: Arc<Registry>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    pub fn start(registry: Arc<Registry>, bind: &str) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(serve(listener, registry, async {
                let _ = stopped.await;
            }))
        });
        Ok(BackgroundServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

/// Blocking HTTP client. Must not be used from inside an async runtime.
pub struct HttpClient {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(base_url: &str, token: Option<&str>) -> Result<Self, RegistryError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(5))
            .build()
            .map_err(|e| RegistryError::Unreachable(e.to_string()))?;
        Ok(HttpClient {
            base: base_url.trim_end_matches('/').to_owned(),
            token: token.map(str::to_owned),
            http,
        })
    }

    fn auth(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<reqwest::blocking::Response, RegistryError> {
        let resp = self
            .auth(req)
            .send()
            .map_err(|e| RegistryError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if resp.status().is_success() {
            return Ok(resp);
        }
        let detail = resp
            .json::<ErrorBody>()
            .map(|b| b.error)
            .unwrap_or_default();
        Err(match status {
            400 => RegistryError::BadRequest(detail),
            401 => RegistryError::Unauthorized,
            403 => RegistryError::Forbidden,
            404 => RegistryError::NotFound,
            other => RegistryError::Status(other),
        })
    }

    fn json<T: serde::de::DeserializeOwned>(
        &self,
        req: reqwest::blocking::RequestBuilder,
    ) -> Result<T, RegistryError> {
        self.send(req)?
            .json()
            .map_err(|e| RegistryError::Unreachable(e.to_string()))
    }

    fn device_url(&self, id: &DeviceId) -> String {
        format!("{}/devices/{}", self.base, id.to_hex())
    }
}

impl RegistryApi for HttpClient {
    fn put_device(&self, id: DeviceId, profile: DeviceProfile) -> Result<RegistryRecord, RegistryError> {
        self.json(self.http.put(self.device_url(&id)).json(&profile))
    }

    fn get_device(&self, id: &DeviceId) -> Result<RegistryRecord, RegistryError> {
        self.json(self.http.get(self.device_url(id)))
    }

    fn delete_device(&self, id: &DeviceId) -> Result<(), RegistryError> {
        self.send(self.http.delete(self.device_url(id))).map(|_| ())
    }

    fn nearby(&self, center: &Position, radius_m: f64) -> Result<Vec<RegistryRecord>, RegistryError> {
        let url = format!(
            "{}/devices?x={}&y={}&radius={}",
            self.base,
            center.x_meters(),
            center.y_meters(),
            radius_m
        );
        self.json(self.http.get(url))
    }

    fn post_consent(&self, submission: ConsentSubmission) -> Result<ConsentRecord, RegistryError> {
        self.json(self.http.post(format!("{}/consents", self.base)).json(&submission))
    }

    fn get_consents(&self, id: &DeviceId, since: Timestamp) -> Result<Vec<ConsentRecord>, RegistryError> {
        let url = format!(
            "{}/consents?device_id={}&since={}",
            self.base,
            id.to_hex(),
            since
        );
        self.json(self.http.get(url))
    }
}
