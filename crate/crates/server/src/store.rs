//! On-disk layout under the data directory:
//!
//! ```text
//! scenes/<scene_id>.json
//! scripts/<id>.json
//! sessions/<id>.meta.json
//! sessions/<id>.events.jsonl   one SessionEvent per line, fsynced per append
//! ratings.jsonl
//! ```

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

use narravo_core::api::{ScriptRecord, SessionHandle};
use narravo_core::engine::SessionEvent;
use narravo_core::metrics::RatingSample;
use narravo_core::scene::{load_scene, SceneSnapshot};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::fs::{self, File, OpenOptions};
use tokio::io::AsyncWriteExt;

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub struct Recovered {
    pub scenes: HashMap<String, SceneSnapshot>,
    pub scripts: HashMap<String, ScriptRecord>,
    pub sessions: Vec<(SessionHandle, Vec<SessionEvent>)>,
    pub ratings: Vec<RatingSample>,
}

fn pretty<T: Serialize>(v: &T) -> String {
    narravo_core::pipeline::to_json_pretty(v)
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
}

/// Parses JSONL. A final line without its newline was never acknowledged
/// (the newline is part of every fsynced append) and is dropped.
fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> io::Result<Vec<T>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        tracing::warn!("{}: dropping torn final line", path.display());
    }
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(path, format!("line {}: {e}", i + 1))))
        .collect()
}

impl Store {
    pub async fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["scenes", "scripts", "sessions"] {
            fs::create_dir_all(root.join(sub)).await?;
        }
        Ok(Store { root })
    }

    /// Write-then-rename with fsync, so a crash leaves the old or the new
    /// file but never a torn one.
    async fn write_atomic(&self, path: &Path, contents: &str) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp).await?;
        f.write_all(contents.as_bytes()).await?;
        f.sync_all().await?;
        drop(f);
        fs::rename(&tmp, path).await
    }

    pub async fn save_scene(&self, scene: &SceneSnapshot) -> io::Result<()> {
        let path = self.root.join("scenes").join(format!("{}.json", scene.scene_id));
        self.write_atomic(&path, &narravo_core::scene::serialize_scene(scene)).await
    }

    pub async fn save_script(&self, record: &ScriptRecord) -> io::Result<()> {
        let path = self.root.join("scripts").join(format!("{}.json", record.id));
        self.write_atomic(&path, &pretty(record)).await
    }

    /// Persists the session handle and returns the open, empty event log.
    pub async fn create_session(&self, handle: &SessionHandle) -> io::Result<EventLog> {
        let dir = self.root.join("sessions");
        self.write_atomic(&dir.join(format!("{}.meta.json", handle.id)), &pretty(handle))
            .await?;
        EventLog::open(dir.join(format!("{}.events.jsonl", handle.id))).await
    }

    pub async fn event_log(&self, id: &str) -> io::Result<EventLog> {
        EventLog::open(self.root.join("sessions").join(format!("{id}.events.jsonl"))).await
    }

    pub async fn append_ratings(&self, ratings: &[RatingSample]) -> io::Result<()> {
        let mut body = String::new();
        for r in ratings {
            body.push_str(&serde_json::to_string(r).expect("rating serializes"));
            body.push('\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("ratings.jsonl"))
            .await?;
        f.write_all(body.as_bytes()).await?;
        f.sync_data().await
    }

    async fn read_dir_sorted(&self, sub: &str, suffix: &str) -> io::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let mut rd = fs::read_dir(self.root.join(sub)).await?;
        while let Some(entry) = rd.next_entry().await? {
            let path = entry.path();
            if path.to_string_lossy().ends_with(suffix) {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    pub async fn recover(&self) -> io::Result<Recovered> {
        let mut scenes = HashMap::new();
        for path in self.read_dir_sorted("scenes", ".json").await? {
            let text = fs::read_to_string(&path).await?;
            let scene = load_scene(&text).map_err(|e| invalid(&path, e))?;
            scenes.insert(scene.scene_id.clone(), scene);
        }
        let mut scripts = HashMap::new();
        for path in self.read_dir_sorted("scripts", ".json").await? {
            let text = fs::read_to_string(&path).await?;
            let record: ScriptRecord = serde_json::from_str(&text).map_err(|e| invalid(&path, e))?;
            scripts.insert(record.id.clone(), record);
        }
        let mut sessions = Vec::new();
        for path in self.read_dir_sorted("sessions", ".meta.json").await? {
            let text = fs::read_to_string(&path).await?;
            let handle: SessionHandle = serde_json::from_str(&text).map_err(|e| invalid(&path, e))?;
            let log_path = self
                .root
                .join("sessions")
                .join(format!("{}.events.jsonl", handle.id));
            let events = match fs::read_to_string(&log_path).await {
                Ok(t) => parse_jsonl(&log_path, &t)?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e),
            };
            sessions.push((handle, events));
        }
        let ratings_path = self.root.join("ratings.jsonl");
        let ratings = match fs::read_to_string(&ratings_path).await {
            Ok(t) => parse_jsonl(&ratings_path, &t)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok(Recovered {
            scenes,
            scripts,
            sessions,
            ratings,
        })
    }
}

/// Append-only JSONL event log of one session.
#[derive(Debug)]
pub struct EventLog {
    file: File,
}

impl EventLog {
    async fn open(path: PathBuf) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)
            .await?;
        // cut a torn tail so the next append starts on a fresh line
        let len = file.metadata().await?.len();
        if len > 0 {
            let bytes = fs::read(&path).await?;
            if bytes.last() != Some(&b'\n') {
                let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64).await?;
                file.sync_data().await?;
            }
        }
        Ok(EventLog { file })
    }

    /// Returns once the line is durable.
    pub async fn append(&mut self, event: &SessionEvent) -> io::Result<()> {
        let mut line = serde_json::to_string(event).expect("event serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).await?;
        self.file.sync_data().await
    }
}
