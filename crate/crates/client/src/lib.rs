//! Typed async client for the narravo service. Bodies are the core crate's
//! types, so a response decodes to exactly what the library would return.

use narravo_core::api::{
    ApiErrorBody, BatchRequest, CreateSession, GenerateScript, Health, RatingsAccepted,
    SceneSummary, ScriptRecord, ScriptSummary, SessionHandle, UploadScript, ValidateRequest,
    ValidateResponse,
};
use narravo_core::engine::{EventOutcome, PendingTrigger, SessionEvent, SessionState, TraversalLog};
use narravo_core::metrics::{MetricReport, RatingSample, ReportInputs};
use narravo_core::pipeline::{BatchOutcome, InputFile};
use narravo_core::scene::{serialize_scene, SceneSnapshot};
use narravo_core::schema::NarrativeScript;
use reqwest::{Method, RequestBuilder, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{status}: {} ({})", body.message, body.error)]
    Api { status: StatusCode, body: ApiErrorBody },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response ({status}): {message}")]
    Decode { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } | ClientError::Decode { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Client {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn check(resp: Response) -> Result<Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        match serde_json::from_str::<ApiErrorBody>(&text) {
            Ok(body) => Err(ClientError::Api { status, body }),
            Err(_) => Err(ClientError::Decode {
                status,
                message: text,
            }),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
        let resp = Self::check(resp).await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            status,
            message: e.to_string(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.request(Method::GET, path).send().await?).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(self.request(Method::POST, path).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    /// Uploads a raw scene document; the service reports parse errors with
    /// their position.
    pub async fn create_scene_document(&self, document: impl Into<String>) -> Result<SceneSnapshot> {
        let resp = self
            .request(Method::POST, "/scenes")
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(document.into())
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn create_scene(&self, scene: &SceneSnapshot) -> Result<SceneSnapshot> {
        self.create_scene_document(serialize_scene(scene)).await
    }

    pub async fn list_scenes(&self) -> Result<Vec<SceneSummary>> {
        self.get("/scenes").await
    }

    pub async fn scene(&self, id: &str) -> Result<SceneSnapshot> {
        self.get(&format!("/scenes/{id}")).await
    }

    pub async fn generate_script(&self, req: &GenerateScript) -> Result<ScriptRecord> {
        self.post("/scripts", req).await
    }

    pub async fn upload_script(&self, scene_id: &str, script: &NarrativeScript) -> Result<ScriptRecord> {
        let body = UploadScript {
            scene_id: scene_id.to_string(),
            script: script.clone(),
        };
        self.post("/scripts", &body).await
    }

    pub async fn script(&self, id: &str) -> Result<ScriptRecord> {
        self.get(&format!("/scripts/{id}")).await
    }

    pub async fn list_scripts(&self, scene_id: Option<&str>) -> Result<Vec<ScriptSummary>> {
        let mut req = self.request(Method::GET, "/scripts");
        if let Some(s) = scene_id {
            req = req.query(&[("scene_id", s)]);
        }
        Self::decode(req.send().await?).await
    }

    pub async fn validate(&self, document: impl Into<String>) -> Result<ValidateResponse> {
        let body = ValidateRequest {
            document: document.into(),
        };
        self.post("/scripts/validate", &body).await
    }

    pub async fn create_session(&self, script_id: &str) -> Result<SessionHandle> {
        let body = CreateSession {
            script_id: script_id.to_string(),
        };
        self.post("/sessions", &body).await
    }

    pub async fn list_sessions(&self) -> Result<Vec<SessionHandle>> {
        self.get("/sessions").await
    }

    pub async fn session(&self, id: &str) -> Result<SessionHandle> {
        self.get(&format!("/sessions/{id}")).await
    }

    pub async fn post_event(&self, session: &str, event: &SessionEvent) -> Result<EventOutcome> {
        self.post(&format!("/sessions/{session}/events"), event).await
    }

    pub async fn state(&self, session: &str) -> Result<SessionState> {
        self.get(&format!("/sessions/{session}/state")).await
    }

    pub async fn triggers(&self, session: &str) -> Result<Vec<PendingTrigger>> {
        self.get(&format!("/sessions/{session}/triggers")).await
    }

    pub async fn log(&self, session: &str) -> Result<TraversalLog> {
        self.get(&format!("/sessions/{session}/log")).await
    }

    pub async fn report(&self, inputs: &ReportInputs) -> Result<MetricReport> {
        self.post("/metrics/report", inputs).await
    }

    pub async fn report_text(&self, inputs: &ReportInputs) -> Result<String> {
        let resp = self
            .request(Method::POST, "/metrics/report")
            .query(&[("format", "text")])
            .json(inputs)
            .send()
            .await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn add_ratings(&self, ratings: &[RatingSample]) -> Result<RatingsAccepted> {
        self.post("/metrics/ratings", ratings).await
    }

    pub async fn ratings(&self) -> Result<Vec<RatingSample>> {
        self.get("/metrics/ratings").await
    }

    /// Report over every rating stored with [`Client::add_ratings`].
    pub async fn stored_report(&self) -> Result<MetricReport> {
        self.get("/metrics/report").await
    }

    pub async fn batch(&self, files: Vec<InputFile>) -> Result<BatchOutcome> {
        self.post("/metrics/batch", &BatchRequest { files }).await
    }
}
