//! Prompt construction for the three generation strategies, VLM backends
//! (live HTTP or digest-keyed replay fixtures) and coercion of replies into
//! [`NarrativeScript`]s.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::SceneSnapshot;
use crate::schema::{parse_script, NarrativeScript};

/// Bumped whenever any template text below changes.
pub const TEMPLATE_VERSION: &str = "narravo-prompts/3";

pub const ENV_VLM_URL: &str = "NARRAVO_VLM_URL";
pub const ENV_VLM_KEY: &str = "NARRAVO_VLM_KEY";

pub const MAX_TRANSPORT_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptStrategy {
    /// Object selection, conventional narrative structure.
    #[serde(rename = "s1")]
    Conventional,
    /// Object selection, conventional structure plus metaphorical links.
    #[serde(rename = "s2")]
    Metaphorical,
    /// Storyboard straight from the scene, no object-specific linking.
    #[serde(rename = "s3")]
    Direct,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 3] = [
        PromptStrategy::Conventional,
        PromptStrategy::Metaphorical,
        PromptStrategy::Direct,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PromptStrategy::Conventional => "s1",
            PromptStrategy::Metaphorical => "s2",
            PromptStrategy::Direct => "s3",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "conventional" => Ok(PromptStrategy::Conventional),
            "s2" | "metaphorical" => Ok(PromptStrategy::Metaphorical),
            "s3" | "direct" => Ok(PromptStrategy::Direct),
            other => Err(format!("unknown strategy `{other}` (expected s1, s2 or s3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub scene: SceneSnapshot,
    pub strategy: PromptStrategy,
    pub max_fragments: usize,
    /// How many key objects the model should select.
    #[serde(default = "default_key_objects")]
    pub key_objects: usize,
    /// Free token mixed into the prompt; distinct seeds give distinct
    /// fixture keys for otherwise identical requests.
    #[serde(default)]
    pub seed: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
}

fn default_key_objects() -> usize {
    3
}

impl GenerationRequest {
    pub fn new(scene: SceneSnapshot, strategy: PromptStrategy) -> Self {
        GenerationRequest {
            scene,
            strategy,
            max_fragments: 13,
            key_objects: default_key_objects(),
            seed: String::new(),
            image_refs: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.max_fragments == 0 {
            return Err("max_fragments must be positive".into());
        }
        if self.max_fragments < self.key_objects {
            return Err(format!(
                "max_fragments ({}) is smaller than the number of key objects ({})",
                self.max_fragments, self.key_objects
            ));
        }
        Ok(())
    }

    /// Digest of the request content, recorded alongside fixtures.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Common,
    Metaphor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBlock {
    pub kind: BlockKind,
    pub text: String,
}

const INTRO: &str = "You are a narrative designer for an augmented-reality story that unfolds \
in a real room. The reader walks around the room and scans physical objects with a phone; \
each scan can reveal a piece of the story anchored to that object.";

const SELECT_TASK: &str = "Select {key} key narrative objects from the scene below and up to \
{branching} further branching objects. Write a linear mainstory around the key objects, \
following a conventional narrative structure (setup, rising tension, turn, resolution), and \
write fragments that deepen the story when the reader scans an object. Refer to objects only \
by the names given in the scene.";

const METAPHOR_TASK: &str = "Additionally, link the selected objects through metaphor. Read each \
object's physical state and function as a clue, give every selected object a short symbolic \
descriptor in its `metaphor` field, state the symbolic meaning of each fragment in \
`symbolic_meaning`, and let the metaphorical links between objects carry the mainstory.";

const DIRECT_TASK: &str = "Generate a storyboard directly from the scene as a whole. Invent the \
objects the story needs from what the images show; do not plan the story around any particular \
list of objects.";

const FORMAT: &str = r#"Reply with a single JSON document and nothing else, shaped exactly like:
{
  "object": [{"name": "...", "role": "key" | "branching", "metaphor": "..."}],
  "mainstory": [{"index": 0, "text": "...", "involved_objects": ["..."]}],
  "fragments": [{
    "name": "fragment_1", "topic": "...", "core_object": "...",
    "agents": ["user"], "interaction_mode": "...", "symbolic_meaning": "...",
    "content": "...",
    "triggerCondition": {"kind": "scan", "object": "..."}
  }]
}
Beat indices count up from 0. Every core_object and every object named in a trigger must appear
in "object". triggerCondition kinds: {"kind":"scan","object":N}, {"kind":"proximity","object":N,
"radius":meters}, {"kind":"after","fragment":F}, {"kind":"all_of","all_of":[...]},
{"kind":"any_of","any_of":[...]}; combinators nest at most two levels. Fragment names are unique."#;

fn fmt1(x: f64) -> String {
    let r = (x * 10.0).round() / 10.0;
    // avoid "-0.0"
    format!("{:.1}", if r == 0.0 { 0.0 } else { r })
}

/// Prompt as tagged blocks. Dropping the metaphor blocks of an S2 prompt
/// yields the S1 prompt for the same request.
pub fn prompt_blocks(req: &GenerationRequest) -> Vec<PromptBlock> {
    let common = |text: String| PromptBlock {
        kind: BlockKind::Common,
        text,
    };
    let metaphor = |text: String| PromptBlock {
        kind: BlockKind::Metaphor,
        text,
    };
    let scene = &req.scene;
    let mut blocks = vec![common(INTRO.to_string())];

    match req.strategy {
        PromptStrategy::Conventional | PromptStrategy::Metaphorical => {
            let branching = req.max_fragments.saturating_sub(req.key_objects);
            blocks.push(common(
                SELECT_TASK
                    .replace("{key}", &req.key_objects.to_string())
                    .replace("{branching}", &branching.to_string()),
            ));
            if req.strategy == PromptStrategy::Metaphorical {
                blocks.push(metaphor(METAPHOR_TASK.to_string()));
            }
            blocks.push(common(format!(
                "Scene `{}` as seen from ({}, {}, {}); positions in meters, y up:",
                scene.scene_id,
                fmt1(scene.viewpoint.position[0]),
                fmt1(scene.viewpoint.position[1]),
                fmt1(scene.viewpoint.position[2]),
            )));
            for obj in &scene.objects {
                let p = obj.pose.position;
                let note = if obj.state.note.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", obj.state.note)
                };
                blocks.push(common(format!(
                    "- {} [{}] at ({}, {}, {}); state: {}{}; physical: {}; functional: {}",
                    obj.name,
                    obj.id,
                    fmt1(p[0]),
                    fmt1(p[1]),
                    fmt1(p[2]),
                    obj.state.label,
                    note,
                    obj.semantics.physical,
                    obj.semantics.functional,
                )));
                if req.strategy == PromptStrategy::Metaphorical {
                    if let Some(m) = &obj.semantics.metaphorical {
                        blocks.push(metaphor(format!(
                            "  metaphorical reading of {}: {} (weight {:.2})",
                            obj.name, m.text, m.weight
                        )));
                    }
                }
            }
        }
        PromptStrategy::Direct => {
            blocks.push(common(DIRECT_TASK.to_string()));
            blocks.push(common(format!(
                "Scene `{}`: a room containing {} physical objects.",
                scene.scene_id,
                scene.objects.len()
            )));
        }
    }
    if !req.image_refs.is_empty() {
        blocks.push(common(format!("Scene images: {}", req.image_refs.join(", "))));
    }
    blocks.push(common(format!(
        "Write at most {} fragments.",
        req.max_fragments
    )));
    blocks.push(common(FORMAT.to_string()));
    if !req.seed.is_empty() {
        blocks.push(common(format!("Variation token: {}", req.seed)));
    }
    blocks
}

pub fn join_blocks(blocks: &[PromptBlock]) -> String {
    let mut out = blocks
        .iter()
        .map(|b| b.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    out.push('\n');
    out
}

pub fn build_prompt(req: &GenerationRequest) -> String {
    join_blocks(&prompt_blocks(req))
}

/// Digest of every fixed template string; cited in bundles so a story can be
/// traced to the exact prompt templates that produced it.
pub fn template_hash() -> String {
    let mut h = Sha256::new();
    for part in [TEMPLATE_VERSION, INTRO, SELECT_TASK, METAPHOR_TASK, DIRECT_TASK, FORMAT] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

const REPAIR: &str = "Your previous reply could not be read as the required JSON document.";

pub fn repair_prompt(prompt: &str, raw: &str, error: &str) -> String {
    format!(
        "{prompt}\n{REPAIR}\nParser error: {error}\nPrevious reply:\n{raw}\n\nReply again with only the corrected JSON document.\n"
    )
}

/// Digest of `(model, prompt)`: the replay lookup key.
pub fn fixture_key(prompt: &str, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub key: String,
    pub request_digest: String,
    pub prompt: String,
    pub response: String,
    pub elapsed_s: f64,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture storage error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture {path} is not valid JSON: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn fixture_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

/// Stores a response under its `(prompt, model)` digest. Re-recording the
/// same pair rewrites the same file.
pub fn record_fixture(
    dir: &Path,
    request_digest: &str,
    prompt: &str,
    model: &str,
    response: &str,
    elapsed_s: f64,
) -> Result<String, FixtureError> {
    let key = fixture_key(prompt, model);
    let fixture = Fixture {
        key: key.clone(),
        request_digest: request_digest.to_string(),
        prompt: prompt.to_string(),
        response: response.to_string(),
        elapsed_s,
    };
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FixtureError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = fixture_path(dir, &key);
    let mut body = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
    body.push('\n');
    fs::write(&path, body).map_err(io(&path))?;
    Ok(key)
}

pub fn load_fixture(dir: &Path, key: &str) -> Result<Option<Fixture>, FixtureError> {
    let path = fixture_path(dir, key);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(FixtureError::Io { path, source }),
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|source| FixtureError::Corrupt { path, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub credentials_env: String,
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
    /// When set, every successful reply is also recorded as a fixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_dir: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_key_env() -> String {
    ENV_VLM_KEY.to_string()
}

fn default_backoff() -> f64 {
    1.0
}

impl LiveConfig {
    /// Endpoint from `NARRAVO_VLM_URL`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, String> {
        let endpoint = std::env::var(ENV_VLM_URL)
            .map_err(|_| format!("{ENV_VLM_URL} is not set"))?;
        Ok(LiveConfig {
            endpoint,
            model: model.into(),
            timeout_s: default_timeout(),
            temperature: 0.0,
            credentials_env: default_key_env(),
            backoff_base_s: default_backoff(),
            record_dir: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub fixture_dir: PathBuf,
    #[serde(default = "default_replay_model")]
    pub model: String,
}

pub fn default_replay_model() -> String {
    "replay".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Live(LiveConfig),
    Replay(ReplayConfig),
}

impl BackendConfig {
    pub fn check(&self) -> Result<(), String> {
        match self {
            BackendConfig::Live(l) => {
                if l.timeout_s.is_nan() || l.timeout_s <= 0.0 {
                    return Err("live backend timeout must be positive".into());
                }
                if l.endpoint.is_empty() {
                    return Err("live backend endpoint is empty".into());
                }
                Ok(())
            }
            BackendConfig::Replay(r) => {
                if !r.fixture_dir.is_dir() {
                    return Err(format!(
                        "replay fixture directory {} is not readable",
                        r.fixture_dir.display()
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn model(&self) -> &str {
        match self {
            BackendConfig::Live(l) => &l.model,
            BackendConfig::Replay(r) => &r.model,
        }
    }

    pub fn into_backend(self) -> Box<dyn VlmBackend> {
        match self {
            BackendConfig::Live(l) => Box::new(LiveBackend::new(l)),
            BackendConfig::Replay(r) => Box::new(ReplayBackend::new(r)),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no replay fixture for key {key}")]
    FixtureMiss { key: String },
    #[error("fixture store: {0}")]
    Storage(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub elapsed_s: f64,
    pub fixture_key: Option<String>,
}

/// A text-in / text-out model endpoint.
pub trait VlmBackend: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, prompt: &str, request_digest: &str) -> Result<Completion, BackendError>;
    /// Whether a malformed reply is worth one repair re-prompt.
    fn supports_repair(&self) -> bool;
}

pub struct ReplayBackend {
    config: ReplayConfig,
}

impl ReplayBackend {
    pub fn new(config: ReplayConfig) -> Self {
        ReplayBackend { config }
    }
}

impl VlmBackend for ReplayBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str, _request_digest: &str) -> Result<Completion, BackendError> {
        let key = fixture_key(prompt, &self.config.model);
        match load_fixture(&self.config.fixture_dir, &key) {
            Ok(Some(f)) => Ok(Completion {
                text: f.response,
                elapsed_s: f.elapsed_s,
                fixture_key: Some(key),
            }),
            Ok(None) => Err(BackendError::FixtureMiss { key }),
            Err(e) => Err(BackendError::Storage(e.to_string())),
        }
    }

    fn supports_repair(&self) -> bool {
        false
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s.max(0.001)))
            .build()
            .expect("http client builds");
        LiveBackend { config, client }
    }

    fn body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.config.endpoint).json(&self.body(prompt));
        if let Ok(key) = std::env::var(&self.config.credentials_env) {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(reply_text(&text))
    }

    fn retryable(e: &BackendError) -> bool {
        match e {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Pulls the assistant text out of common provider reply shapes, falling
/// back to the raw body.
pub fn reply_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let candidates = [
        v.pointer("/choices/0/message/content"),
        v.pointer("/message/content"),
        v.pointer("/content/0/text"),
        v.pointer("/content"),
        v.pointer("/output_text"),
    ];
    let found = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    found.unwrap_or_else(|| body.to_string())
}

impl VlmBackend for LiveBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str, request_digest: &str) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let mut retries = 0;
        let text = loop {
            match self.attempt(prompt) {
                Ok(t) => break t,
                Err(e) if Self::retryable(&e) && retries < MAX_TRANSPORT_RETRIES => {
                    let wait = self.config.backoff_base_s * f64::from(1u32 << retries);
                    tracing::warn!("VLM call failed ({e}); retrying in {wait:.1}s");
                    thread::sleep(Duration::from_secs_f64(wait));
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let elapsed_s = started.elapsed().as_secs_f64();
        let fixture_key = match &self.config.record_dir {
            Some(dir) => Some(
                record_fixture(dir, request_digest, prompt, &self.config.model, &text, elapsed_s)
                    .map_err(|e| BackendError::Storage(e.to_string()))?,
            ),
            None => None,
        };
        Ok(Completion {
            text,
            elapsed_s,
            fixture_key,
        })
    }

    fn supports_repair(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Total model time across calls, in seconds.
    pub elapsed_s: f64,
    pub calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub script: NarrativeScript,
    pub raw: String,
    pub prompt: String,
    pub timing: Timing,
    pub fixture_keys: Vec<String>,
    pub repaired: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationErrorKind {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("model reply is not a valid script ({message})")]
    Format { message: String, raw: String },
}

impl GenerationErrorKind {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerationErrorKind::Backend(BackendError::Transport(_)))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{kind} (after {:.3}s over {} call(s))", timing.elapsed_s, timing.calls)]
pub struct GenerationError {
    pub kind: GenerationErrorKind,
    pub timing: Timing,
}

/// The outermost `{ ... }` span, after stripping Markdown code fences.
pub fn extract_document(raw: &str) -> &str {
    let trimmed = raw.trim();
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(a), Some(b)) if b > a => &trimmed[a..=b],
        _ => trimmed,
    }
}

fn parse_reply(raw: &str) -> Result<NarrativeScript, String> {
    parse_script(extract_document(raw)).map_err(|e| e.to_string())
}

/// Prompts the backend and parses the reply. A malformed reply gets one
/// repair re-prompt when the backend supports it.
pub fn generate_script(
    req: &GenerationRequest,
    backend: &dyn VlmBackend,
) -> Result<Generation, GenerationError> {
    let mut timing = Timing::default();
    let fail = |kind: GenerationErrorKind, timing: &Timing| GenerationError {
        kind,
        timing: timing.clone(),
    };
    req.check()
        .map_err(|m| fail(GenerationErrorKind::InvalidRequest(m), &timing))?;

    let prompt = build_prompt(req);
    let digest = req.digest();
    let mut fixture_keys = Vec::new();

    let first = backend.complete(&prompt, &digest);
    timing.calls += 1;
    let first = first.map_err(|e| fail(e.into(), &timing))?;
    timing.elapsed_s += first.elapsed_s;
    fixture_keys.extend(first.fixture_key.clone());

    let message = match parse_reply(&first.text) {
        Ok(script) => {
            return Ok(Generation {
                script,
                raw: first.text,
                prompt,
                timing,
                fixture_keys,
                repaired: false,
            })
        }
        Err(m) => m,
    };
    if !backend.supports_repair() {
        return Err(fail(
            GenerationErrorKind::Format {
                message,
                raw: first.text,
            },
            &timing,
        ));
    }

    let second = backend.complete(&repair_prompt(&prompt, &first.text, &message), &digest);
    timing.calls += 1;
    let second = second.map_err(|e| fail(e.into(), &timing))?;
    timing.elapsed_s += second.elapsed_s;
    fixture_keys.extend(second.fixture_key.clone());
    match parse_reply(&second.text) {
        Ok(script) => Ok(Generation {
            script,
            raw: second.text,
            prompt,
            timing,
            fixture_keys,
            repaired: true,
        }),
        Err(message) => Err(fail(
            GenerationErrorKind::Format {
                message,
                raw: second.text,
            },
            &timing,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::load_scene;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Mutex;

    const SCENE: &str = r#"{
        "scene_id": "lab",
        "viewpoint": {"position": [0, 1.6, 0], "orientation": [1, 0, 0, 0]},
        "objects": [
          {"id": "door_01", "name": "door", "pose": {"position": [0, 1, -3], "orientation": [1,0,0,0]},
           "bbox": [0.9, 2, 0.05], "state": {"label": "damaged", "note": "hinge loose"},
           "semantics": {"physical": "scratched oak", "functional": "passage",
                         "metaphorical": {"text": "a threshold nobody crosses", "weight": 0.8}}},
          {"id": "server_rack_01", "name": "server rack", "pose": {"position": [2, 1, -2], "orientation": [1,0,0,0]},
           "bbox": [0.6, 2, 1], "state": {"label": "intact", "note": ""},
           "semantics": {"physical": "humming steel", "functional": "hosts machines"}}
        ]
    }"#;

    const SCRIPT: &str = r#"{"object":[{"name":"door","role":"key"}],
        "mainstory":[{"index":0,"text":"A door.","involved_objects":["door"]}],
        "fragments":[]}"#;

    fn request(strategy: PromptStrategy) -> GenerationRequest {
        let mut r = GenerationRequest::new(load_scene(SCENE).unwrap(), strategy);
        r.max_fragments = 5;
        r.key_objects = 2;
        r
    }

    #[test]
    fn prompts_are_deterministic() {
        for s in PromptStrategy::ALL {
            assert_eq!(build_prompt(&request(s)), build_prompt(&request(s)));
        }
    }

    #[test]
    fn metaphor_descriptors_only_in_s2() {
        let s1 = build_prompt(&request(PromptStrategy::Conventional));
        let s2 = build_prompt(&request(PromptStrategy::Metaphorical));
        assert!(s2.contains("a threshold nobody crosses"));
        assert!(!s1.contains("a threshold nobody crosses"));
        assert!(!s1.contains("metaphorical reading"));
        assert!(!s1.contains(METAPHOR_TASK));
    }

    #[test]
    fn s1_and_s2_differ_only_in_metaphor_blocks() {
        let s2: Vec<PromptBlock> = prompt_blocks(&request(PromptStrategy::Metaphorical))
            .into_iter()
            .filter(|b| b.kind == BlockKind::Common)
            .collect();
        assert_eq!(s2, prompt_blocks(&request(PromptStrategy::Conventional)));
    }

    #[test]
    fn s3_has_no_object_enumeration() {
        let s3 = build_prompt(&request(PromptStrategy::Direct));
        for obj in &request(PromptStrategy::Direct).scene.objects {
            assert!(!s3.contains(&obj.name), "{}", obj.name);
            assert!(!s3.contains(&obj.id));
        }
        assert!(s3.contains("\"triggerCondition\""));
    }

    #[test]
    fn every_strategy_demands_the_interchange_format() {
        for s in PromptStrategy::ALL {
            let p = build_prompt(&request(s));
            for key in ["\"object\"", "\"mainstory\"", "\"fragments\"", "\"triggerCondition\""] {
                assert!(p.contains(key), "{s}: {key}");
            }
        }
    }

    #[test]
    fn request_invariant() {
        let mut r = request(PromptStrategy::Conventional);
        r.max_fragments = 1;
        let err = generate_script(&r, &FailingBackend).unwrap_err();
        assert!(matches!(err.kind, GenerationErrorKind::InvalidRequest(_)));
    }

    struct FailingBackend;
    impl VlmBackend for FailingBackend {
        fn model(&self) -> &str {
            "none"
        }
        fn complete(&self, _: &str, _: &str) -> Result<Completion, BackendError> {
            Err(BackendError::Transport("down".into()))
        }
        fn supports_repair(&self) -> bool {
            true
        }
    }

    #[test]
    fn fixture_keys() {
        let dir = tempfile::tempdir().unwrap();
        let k1 = record_fixture(dir.path(), "d", "prompt a", "m", "resp", 1.0).unwrap();
        let k2 = record_fixture(dir.path(), "d", "prompt b", "m", "resp", 1.0).unwrap();
        assert_ne!(k1, k2);
        let again = record_fixture(dir.path(), "d", "prompt a", "m", "resp", 1.0).unwrap();
        assert_eq!(k1, again);
        assert_ne!(fixture_key("prompt a", "m"), fixture_key("prompt a", "other"));
        assert_eq!(load_fixture(dir.path(), &k1).unwrap().unwrap().response, "resp");
    }

    #[test]
    fn replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(PromptStrategy::Metaphorical);
        let prompt = build_prompt(&req);
        let key = record_fixture(dir.path(), &req.digest(), &prompt, "replay", SCRIPT, 4.5).unwrap();
        let backend = ReplayBackend::new(ReplayConfig {
            fixture_dir: dir.path().into(),
            model: "replay".into(),
        });
        let g = generate_script(&req, &backend).unwrap();
        assert_eq!(g.raw, SCRIPT);
        assert_eq!(g.timing.elapsed_s, 4.5);
        assert_eq!(g.fixture_keys, vec![key]);
        assert_eq!(g.script.objects[0].name, "door");
    }

    #[test]
    fn replay_malformed_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(PromptStrategy::Conventional);
        record_fixture(dir.path(), "d", &build_prompt(&req), "replay", "{\"object\": 3}", 1.0).unwrap();
        let backend = ReplayBackend::new(ReplayConfig {
            fixture_dir: dir.path().into(),
            model: "replay".into(),
        });
        let err = generate_script(&req, &backend).unwrap_err();
        assert!(matches!(err.kind, GenerationErrorKind::Format { .. }));
        assert_eq!(err.timing.calls, 1);
    }

    #[test]
    fn replay_miss_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(PromptStrategy::Direct);
        let backend = ReplayBackend::new(ReplayConfig {
            fixture_dir: dir.path().into(),
            model: "replay".into(),
        });
        let err = generate_script(&req, &backend).unwrap_err();
        let want = fixture_key(&build_prompt(&req), "replay");
        assert_eq!(err.kind, GenerationErrorKind::Backend(BackendError::FixtureMiss { key: want }));
    }

    #[test]
    fn fenced_replies_are_unwrapped() {
        let raw = format!("Here you go:\n```json\n{SCRIPT}\n```\n");
        assert!(parse_reply(&raw).is_ok());
    }

    /// Serves canned HTTP replies in order, recording request bodies.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, std::sync::Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let seen = std::sync::Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn live(url: String) -> LiveBackend {
        LiveBackend::new(LiveConfig {
            endpoint: url,
            model: "test-model".into(),
            timeout_s: 5.0,
            temperature: 0.0,
            credentials_env: "NARRAVO_TEST_UNSET_KEY".into(),
            backoff_base_s: 0.01,
            record_dir: None,
        })
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn live_backend_retries_then_repairs() {
        let (url, seen) = stub_server(vec![
            (503, "busy".into()),
            (200, chat("not json at all")),
            (200, chat(SCRIPT)),
        ]);
        let backend = live(url);
        let req = request(PromptStrategy::Conventional);
        let g = generate_script(&req, &backend).unwrap();
        assert!(g.repaired);
        assert_eq!(g.timing.calls, 2);
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        let last: Value = serde_json::from_str(&bodies[2]).unwrap();
        assert_eq!(last["model"], "test-model");
        let content = last["messages"][0]["content"].as_str().unwrap();
        assert!(content.contains(REPAIR));
        assert!(content.contains("not json at all"));
    }

    #[test]
    fn live_backend_gives_up_after_two_retries() {
        let (url, _) = stub_server(vec![(500, "x".into()), (502, "x".into()), (503, "x".into())]);
        let err = generate_script(&request(PromptStrategy::Conventional), &live(url)).unwrap_err();
        assert!(matches!(err.kind, GenerationErrorKind::Backend(BackendError::Http { status: 503, .. })));
        assert_eq!(err.timing.calls, 1);
    }

    #[test]
    fn live_reply_unparseable_after_repair() {
        let (url, _) = stub_server(vec![(200, chat("nope")), (200, chat("still nope"))]);
        let err = generate_script(&request(PromptStrategy::Conventional), &live(url)).unwrap_err();
        match err.kind {
            GenerationErrorKind::Format { raw, .. } => assert_eq!(raw, "still nope"),
            other => panic!("{other:?}"),
        }
        assert_eq!(err.timing.calls, 2);
    }

    #[test]
    fn template_hash_is_stable_hex() {
        let h = template_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, template_hash());
    }
}
