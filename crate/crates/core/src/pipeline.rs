//! End-to-end generation runs (scene to persisted bundle) and batch metric
//! evaluation over a directory of trace and rating files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchor::{match_names, AnchorTable, DEFAULT_MATCH_THRESHOLD};
use crate::gateway::{
    generate_script, template_hash, BackendConfig, GenerationErrorKind, GenerationRequest,
    PromptStrategy, Timing, VlmBackend, TEMPLATE_VERSION,
};
use crate::metrics::{
    build_report, DriftInput, LatencySample, LightingInput, MetricReport, OcclusionTrial,
    PositionPair, RatingSample, ReportInputs, ScenarioInputs,
};
use crate::scene::{load_scene, SceneSnapshot};
use crate::schema::{
    link_story_tree, serialize_script, validate_script, NarrativeScript, StoryTree,
    ValidationReport,
};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub strategy: PromptStrategy,
    pub backend: BackendConfig,
    #[serde(default = "default_threshold")]
    pub anchor_threshold: f64,
    pub output_dir: PathBuf,
    #[serde(default = "default_max_fragments")]
    pub max_fragments: usize,
    #[serde(default = "default_key_objects")]
    pub key_objects: usize,
    #[serde(default)]
    pub seed: String,
}

fn default_threshold() -> f64 {
    DEFAULT_MATCH_THRESHOLD
}

fn default_max_fragments() -> usize {
    13
}

fn default_key_objects() -> usize {
    3
}

impl PipelineConfig {
    pub fn new(
        scene: impl Into<PathBuf>,
        strategy: PromptStrategy,
        backend: BackendConfig,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        PipelineConfig {
            scene: scene.into(),
            strategy,
            backend,
            anchor_threshold: default_threshold(),
            output_dir: output_dir.into(),
            max_fragments: default_max_fragments(),
            key_objects: default_key_objects(),
            seed: String::new(),
        }
    }

    /// Parses a TOML config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::new(Stage::Config, format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| {
            PipelineError::new(Stage::Config, format!("{}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.scene);
        join(&mut self.output_dir);
        match &mut self.backend {
            BackendConfig::Replay(r) => join(&mut r.fixture_dir),
            BackendConfig::Live(l) => {
                if let Some(d) = &mut l.record_dir {
                    join(d)
                }
            }
        }
    }

    /// Startup checks; nothing is generated if these fail.
    pub fn check(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::new(Stage::Config, m);
        if !self.scene.is_file() {
            return Err(cfg(format!("scene file {} not found", self.scene.display())));
        }
        if !(0.0..=1.0).contains(&self.anchor_threshold) {
            return Err(cfg(format!(
                "anchor_threshold must lie in [0, 1], got {}",
                self.anchor_threshold
            )));
        }
        self.backend.check().map_err(cfg)
    }

    /// Digest of the configuration content. The output directory does not
    /// affect what is generated and is left out, so a bundle is identical
    /// wherever it is written.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn request(&self, scene: SceneSnapshot) -> GenerationRequest {
        GenerationRequest {
            scene,
            strategy: self.strategy,
            max_fragments: self.max_fragments,
            key_objects: self.key_objects,
            seed: self.seed.clone(),
            image_refs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    LoadScene,
    Generate,
    Validate,
    Link,
    Bind,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::LoadScene => "load_scene",
            Stage::Generate => "generate",
            Stage::Validate => "validate",
            Stage::Link => "link",
            Stage::Bind => "bind",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

/// Whatever a failed run produced before the failing stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialArtifacts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<NarrativeScript>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
}

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[error("pipeline failed at stage `{stage}`: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<Timing>,
    #[serde(default)]
    pub partial: Box<PartialArtifacts>,
    /// Directory holding the partial artifacts, once written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_dir: Option<PathBuf>,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        PipelineError {
            stage,
            message: message.into(),
            generation: None,
            partial: Box::default(),
            partial_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_version: String,
    pub template_hash: String,
    pub model: String,
    pub strategy: PromptStrategy,
    pub request_digest: String,
    pub scene_digest: String,
    pub fixture_keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Everything a generation run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub scene_id: String,
    pub provenance: Provenance,
    pub generation: Timing,
    pub script: NarrativeScript,
    pub validation: ValidationReport,
    pub tree: StoryTree,
    pub anchors: AnchorTable,
}

impl Bundle {
    pub fn to_json(&self) -> String {
        to_json_pretty(self)
    }
}

/// Generate, validate, link and bind without touching the filesystem.
pub fn generate_bundle(
    request: &GenerationRequest,
    backend: &dyn VlmBackend,
    anchor_threshold: f64,
) -> Result<Bundle, PipelineError> {
    let mut partial = PartialArtifacts {
        prompt: Some(crate::gateway::build_prompt(request)),
        ..Default::default()
    };
    let generation = generate_script(request, backend).map_err(|e| {
        let mut err = PipelineError::new(Stage::Generate, e.kind.to_string());
        if let GenerationErrorKind::Format { raw, .. } = &e.kind {
            partial.raw_response = Some(raw.clone());
        }
        err.generation = Some(e.timing.clone());
        err.partial = Box::new(partial.clone());
        err
    })?;
    partial.raw_response = Some(generation.raw.clone());
    partial.script = Some(generation.script.clone());

    let fail = |stage: Stage, message: String, partial: &PartialArtifacts| {
        let mut err = PipelineError::new(stage, message);
        err.generation = Some(generation.timing.clone());
        err.partial = Box::new(partial.clone());
        err
    };

    let validation = validate_script(&generation.script);
    partial.validation = Some(validation.clone());
    if validation.has_errors() {
        let codes: Vec<String> = validation
            .errors()
            .map(|v| format!("{:?}", v.code))
            .collect();
        return Err(fail(
            Stage::Validate,
            format!("script has {} error(s): {}", codes.len(), codes.join(", ")),
            &partial,
        ));
    }
    let tree = link_story_tree(&generation.script)
        .map_err(|e| fail(Stage::Link, e.to_string(), &partial))?;

    if !(0.0..=1.0).contains(&anchor_threshold) {
        return Err(fail(
            Stage::Bind,
            format!("anchor threshold {anchor_threshold} outside [0, 1]"),
            &partial,
        ));
    }
    let names: Vec<String> = generation
        .script
        .objects
        .iter()
        .map(|o| o.name.clone())
        .collect();
    let anchors = match_names(&names, &request.scene, anchor_threshold);

    Ok(Bundle {
        scene_id: request.scene.scene_id.clone(),
        provenance: Provenance {
            template_version: TEMPLATE_VERSION.to_string(),
            template_hash: template_hash(),
            model: backend.model().to_string(),
            strategy: request.strategy,
            request_digest: request.digest(),
            scene_digest: sha256_hex(
                serde_json::to_string(&request.scene)
                    .expect("scene serializes")
                    .as_bytes(),
            ),
            fixture_keys: generation.fixture_keys,
            config_digest: None,
        },
        generation: generation.timing,
        script: generation.script,
        validation,
        tree,
        anchors,
    })
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const SCRIPT_FILE: &str = "script.json";
pub const ANCHORS_FILE: &str = "anchors.json";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const RAW_FILE: &str = "raw_response.txt";
pub const ERROR_FILE: &str = "error.json";

pub fn bundle_dir(output_dir: &Path, scene_id: &str, strategy: PromptStrategy) -> PathBuf {
    output_dir.join(format!("{scene_id}-{strategy}"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents)
        .map_err(|e| PipelineError::new(Stage::Write, format!("{}: {e}", path.display())))
}

/// Writes bundle.json plus the interchange script and anchor table as
/// standalone files.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)
        .map_err(|e| PipelineError::new(Stage::Write, format!("{}: {e}", dir.display())))?;
    // a stale error from an earlier failed run would contradict the bundle
    let _ = fs::remove_file(dir.join(ERROR_FILE));
    write_file(&dir.join(SCRIPT_FILE), &serialize_script(&bundle.script))?;
    write_file(&dir.join(ANCHORS_FILE), &to_json_pretty(&bundle.anchors))?;
    write_file(&dir.join(BUNDLE_FILE), &bundle.to_json())
}

fn write_partial(dir: &Path, err: &PipelineError) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(BUNDLE_FILE));
    if let Some(p) = &err.partial.prompt {
        fs::write(dir.join(PROMPT_FILE), p)?;
    }
    if let Some(r) = &err.partial.raw_response {
        fs::write(dir.join(RAW_FILE), r)?;
    }
    if let Some(s) = &err.partial.script {
        fs::write(dir.join(SCRIPT_FILE), serialize_script(s))?;
    }
    fs::write(dir.join(ERROR_FILE), to_json_pretty(err))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub bundle: Bundle,
    pub dir: PathBuf,
}

/// Scene file to bundle directory. On failure after the scene is loaded,
/// the partial artifacts are written next to where the bundle would be.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    config.check()?;
    let text = fs::read_to_string(&config.scene).map_err(|e| {
        PipelineError::new(Stage::LoadScene, format!("{}: {e}", config.scene.display()))
    })?;
    let scene = load_scene(&text).map_err(|e| PipelineError::new(Stage::LoadScene, e.to_string()))?;
    let dir = bundle_dir(&config.output_dir, &scene.scene_id, config.strategy);
    let request = config.request(scene);
    let backend = config.backend.clone().into_backend();

    match generate_bundle(&request, backend.as_ref(), config.anchor_threshold) {
        Ok(mut bundle) => {
            bundle.provenance.config_digest = Some(config.digest());
            write_bundle(&dir, &bundle)?;
            fs::write(dir.join(PROMPT_FILE), crate::gateway::build_prompt(&request))
                .map_err(|e| PipelineError::new(Stage::Write, e.to_string()))?;
            Ok(PipelineRun { bundle, dir })
        }
        Err(mut err) => {
            match write_partial(&dir, &err) {
                Ok(()) => err.partial_dir = Some(dir),
                Err(e) => tracing::warn!("could not keep partial artifacts: {e}"),
            }
            Err(err)
        }
    }
}

// ---------------------------------------------------------------------------
// batch evaluation

/// Input kinds recognised by file-name suffix, `<scenario>.<suffix>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputKind {
    Positions,
    Occlusion,
    Latency,
    Lighting,
    Drift,
    Ratings,
}

const SUFFIXES: [(&str, InputKind); 6] = [
    (".positions.jsonl", InputKind::Positions),
    (".occlusion.jsonl", InputKind::Occlusion),
    (".latency.jsonl", InputKind::Latency),
    (".lighting.json", InputKind::Lighting),
    (".drift.json", InputKind::Drift),
    (".ratings.csv", InputKind::Ratings),
];

fn classify(file_name: &str) -> Option<(String, InputKind)> {
    SUFFIXES.iter().find_map(|(suffix, kind)| {
        file_name
            .strip_suffix(suffix)
            .filter(|stem| !stem.is_empty())
            .map(|stem| (stem.to_string(), *kind))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileError {
    /// File name, or `scenario:<name>` / `cross` for metric failures.
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub scenarios: BTreeMap<String, MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross: Option<MetricReport>,
    pub errors: Vec<FileError>,
    /// Files whose names match no known input kind.
    pub ignored: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("no metric input files in {0}")]
    NoInputs(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Ratings CSV with header `rater,dimension,value,scale_max`.
pub fn parse_ratings_csv(text: &str) -> Result<Vec<RatingSample>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let want = ["rater", "dimension", "value", "scale_max"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(format!(
            "expected header `{}`, found `{}`",
            want.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| e.to_string()))
        .collect()
}

pub fn ratings_to_csv(samples: &[RatingSample]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(s).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

#[derive(Default)]
struct Collected {
    scenarios: BTreeMap<String, ScenarioInputs>,
    metaphor: Vec<RatingSample>,
    stories: Vec<RatingSample>,
}

/// Parses the whole file before touching `c`, so a malformed file leaves
/// no partial contribution.
fn ingest(c: &mut Collected, scenario: &str, kind: InputKind, text: &str) -> Result<(), String> {
    fn entry<'a>(c: &'a mut Collected, scenario: &str) -> &'a mut ScenarioInputs {
        c.scenarios
            .entry(scenario.to_string())
            .or_insert_with(|| ScenarioInputs {
                name: scenario.to_string(),
                ..Default::default()
            })
    }
    match kind {
        InputKind::Positions => {
            let v: Vec<PositionPair> = parse_jsonl(text)?;
            entry(c, scenario).positions = Some(v);
        }
        InputKind::Occlusion => {
            let v: Vec<OcclusionTrial> = parse_jsonl(text)?;
            entry(c, scenario).occlusion = Some(v);
        }
        InputKind::Latency => {
            let v: Vec<LatencySample> = parse_jsonl(text)?;
            entry(c, scenario).latency = Some(v);
        }
        InputKind::Lighting => {
            let v: LightingInput = serde_json::from_str(text).map_err(|e| e.to_string())?;
            entry(c, scenario).lighting = Some(v);
        }
        InputKind::Drift => {
            let v: DriftInput = serde_json::from_str(text).map_err(|e| e.to_string())?;
            entry(c, scenario).drift = Some(v);
        }
        InputKind::Ratings => {
            let rows = parse_ratings_csv(text)?;
            let mut nbi = Vec::new();
            for r in rows {
                let (metric, _) = r.metric_and_subject();
                if metric == crate::metrics::NBI_DIMENSION {
                    // NBI rows belong to the file's scenario, subject or not
                    nbi.push(RatingSample {
                        dimension: crate::metrics::NBI_DIMENSION.to_string(),
                        ..r
                    });
                } else if crate::api::METAPHOR_METRICS.contains(&metric) {
                    c.metaphor.push(r);
                } else {
                    c.stories.push(r);
                }
            }
            if !nbi.is_empty() {
                entry(c, scenario).nbi.get_or_insert_with(Vec::new).extend(nbi);
            }
        }
    }
    Ok(())
}

/// Evaluates in-memory input files. Malformed files and failing scenarios
/// are reported in `errors`; the rest still produce reports. The outcome
/// does not depend on the order of `files`.
pub fn evaluate_files(files: &[InputFile]) -> Result<BatchOutcome, BatchError> {
    let mut sorted: Vec<&InputFile> = files.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name).then(a.contents.cmp(&b.contents)));

    let mut collected = Collected::default();
    let mut errors = Vec::new();
    let mut ignored = Vec::new();
    let mut recognised = 0;
    for file in sorted {
        let Some((scenario, kind)) = classify(&file.name) else {
            ignored.push(file.name.clone());
            continue;
        };
        recognised += 1;
        if let Err(message) = ingest(&mut collected, &scenario, kind, &file.contents) {
            errors.push(FileError {
                source: file.name.clone(),
                message,
            });
        }
    }
    if recognised == 0 {
        return Err(BatchError::NoInputs(format!("{} file(s)", files.len())));
    }

    let mut scenarios = BTreeMap::new();
    let mut good = Vec::new();
    for (name, inputs) in &collected.scenarios {
        let single = ReportInputs {
            scenarios: vec![inputs.clone()],
            ..Default::default()
        };
        match build_report(&single) {
            Ok(r) => {
                scenarios.insert(name.clone(), r);
                good.push(inputs.clone());
            }
            Err(e) => errors.push(FileError {
                source: format!("scenario:{name}"),
                message: e.to_string(),
            }),
        }
    }
    let cross_inputs = ReportInputs {
        scenarios: good,
        metaphor_ratings: collected.metaphor,
        story_ratings: collected.stories,
    };
    let cross = match build_report(&cross_inputs) {
        Ok(r) => Some(r),
        Err(e) => {
            errors.push(FileError {
                source: "cross".into(),
                message: e.to_string(),
            });
            None
        }
    };
    errors.sort();
    Ok(BatchOutcome {
        scenarios,
        cross,
        errors,
        ignored,
    })
}

/// Reads every regular file in `dir` and evaluates them.
pub fn evaluate_batch(dir: &Path) -> Result<BatchOutcome, BatchError> {
    let io = |path: &Path, source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    let mut unreadable = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let entry = entry.map_err(|e| io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match fs::read_to_string(&path) {
            Ok(contents) => files.push(InputFile { name, contents }),
            Err(e) => unreadable.push(FileError {
                source: name,
                message: e.to_string(),
            }),
        }
    }
    if files.is_empty() && unreadable.is_empty() {
        return Err(BatchError::NoInputs(dir.display().to_string()));
    }
    let mut outcome = evaluate_files(&files).or_else(|e| match e {
        BatchError::NoInputs(_) if !unreadable.is_empty() => Ok(BatchOutcome {
            scenarios: BTreeMap::new(),
            cross: None,
            errors: Vec::new(),
            ignored: Vec::new(),
        }),
        BatchError::NoInputs(_) => Err(BatchError::NoInputs(dir.display().to_string())),
        other => Err(other),
    })?;
    outcome.errors.extend(unreadable);
    outcome.errors.sort();
    Ok(outcome)
}

pub const CROSS_REPORT_STEM: &str = "cross-scenario";

/// Writes `<scenario>.report.{json,txt}`, the cross-scenario pair and
/// `errors.json`; returns the written paths.
pub fn write_batch(out: &Path, outcome: &BatchOutcome) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: String| -> std::io::Result<()> {
        let path = out.join(name);
        fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    for (name, report) in &outcome.scenarios {
        put(format!("{name}.report.json"), to_json_pretty(report))?;
        put(format!("{name}.report.txt"), report.render_text())?;
    }
    if let Some(cross) = &outcome.cross {
        put(format!("{CROSS_REPORT_STEM}.report.json"), to_json_pretty(cross))?;
        put(format!("{CROSS_REPORT_STEM}.report.txt"), cross.render_text())?;
    }
    put("errors.json".into(), to_json_pretty(&outcome.errors))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(name: &str, contents: &str) -> InputFile {
        InputFile {
            name: name.into(),
            contents: contents.into(),
        }
    }

    fn living_area() -> Vec<InputFile> {
        let mut occl = String::new();
        // 5 of 6 correct -> 83.3
        for (tier, ok) in [("T30", true), ("T30", true), ("T60", true), ("T60", true), ("T90", true), ("T90", false)] {
            occl.push_str(&format!("{{\"tier\":\"{tier}\",\"correct\":{ok}}}\n"));
        }
        vec![
            file("living.occlusion.jsonl", &occl),
            file(
                "living.latency.jsonl",
                "{\"event\":0.0,\"response\":4.0}\n{\"event\":10.0,\"response\":15.0}\n",
            ),
            file(
                "living.ratings.csv",
                "rater,dimension,value,scale_max\nr1,NBI,2,10\nr2,NBI,3,10\n",
            ),
            file("living.lighting.json", "{\"ap_extreme\":0.921,\"ap_normal\":1.0}"),
        ]
    }

    #[test]
    fn living_area_row() {
        let out = evaluate_files(&living_area()).unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let row = &out.scenarios["living"].scenarios[0];
        assert_eq!(row.or_pct, Some(83.3));
        assert_eq!(row.latency_s, Some(4.5));
        assert_eq!(row.nbi, Some(2.5));
        assert!((row.lr_pct.unwrap() - 92.1).abs() < 1e-9);
        assert_eq!(row.ce, None);
    }

    #[test]
    fn malformed_file_is_isolated() {
        let files = vec![
            file("a.latency.jsonl", "{\"event\":0,\"response\":1}\n"),
            file("b.latency.jsonl", "{\"event\":0,\"response\":2}\n"),
            file("c.latency.jsonl", "{\"event\":0,\"resp"),
        ];
        let out = evaluate_files(&files).unwrap();
        assert_eq!(out.scenarios.len(), 2);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].source, "c.latency.jsonl");
        assert!(out.errors[0].message.contains("line 1"));
        assert_eq!(out.cross.unwrap().scenarios.len(), 2);
    }

    #[test]
    fn order_does_not_matter() {
        let mut files = living_area();
        files.push(file("x.latency.jsonl", "bad"));
        let a = evaluate_files(&files).unwrap();
        files.reverse();
        let b = evaluate_files(&files).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_recognised_files_is_an_error() {
        assert!(matches!(
            evaluate_files(&[file("notes.md", "hi")]),
            Err(BatchError::NoInputs(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(evaluate_batch(dir.path()), Err(BatchError::NoInputs(_))));
    }

    #[test]
    fn invalid_values_fail_the_scenario_only() {
        let files = vec![
            file("a.latency.jsonl", "{\"event\":5,\"response\":1}\n"),
            file("b.latency.jsonl", "{\"event\":0,\"response\":2}\n"),
        ];
        let out = evaluate_files(&files).unwrap();
        assert_eq!(out.scenarios.keys().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(out.errors[0].source, "scenario:a");
    }

    #[test]
    fn ratings_route_by_metric() {
        let csv = "rater,dimension,value,scale_max\n\
                   r1,MA@Door,4,5\nr1,Interesting@S1,3,5\nr1,Interesting@S2,4,5\n";
        let out = evaluate_files(&[file("study.ratings.csv", csv)]).unwrap();
        let cross = out.cross.unwrap();
        assert_eq!(cross.metaphor.len(), 1);
        assert_eq!(cross.stories.len(), 1);
        assert!(out.scenarios.is_empty());
    }

    #[test]
    fn bad_header_is_reported() {
        let err = parse_ratings_csv("who,what,value,max\na,b,1,5\n").unwrap_err();
        assert!(err.contains("expected header"));
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![RatingSample::new("r,1", "MA@Door", 4.0, 5.0)];
        assert_eq!(parse_ratings_csv(&ratings_to_csv(&s)).unwrap(), s);
    }

    #[test]
    fn write_batch_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = evaluate_files(&living_area()).unwrap();
        write_batch(dir.path(), &out).unwrap();
        for f in ["living.report.json", "living.report.txt", "cross-scenario.report.txt", "errors.json"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn config_paths_resolve_against_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("narravo.toml");
        fs::write(
            &path,
            "scene = \"scene.json\"\nstrategy = \"s2\"\noutput_dir = \"out\"\n\
             [backend]\nkind = \"replay\"\nfixture_dir = \"fx\"\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.scene, dir.path().join("scene.json"));
        assert_eq!(cfg.strategy, PromptStrategy::Metaphorical);
        let err = cfg.check().unwrap_err();
        assert_eq!(err.stage, Stage::Config);
    }

    #[test]
    fn config_with_two_backends_is_rejected() {
        let text = "scene = \"s\"\nstrategy = \"s1\"\noutput_dir = \"o\"\n\
                    [backend]\nkind = \"replay\"\nfixture_dir = \"fx\"\nendpoint = \"http://x\"\n";
        // the extra live-only key is not silently dropped
        let parsed: Result<PipelineConfig, _> = toml::from_str(text);
        assert!(parsed.is_err());
    }
}
