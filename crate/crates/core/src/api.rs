//! Request and response bodies of the HTTP service, shared by the server
//! and the client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anchor::AnchorTable;
use crate::gateway::{BackendConfig, PromptStrategy, Timing};
use crate::metrics::{RatingSample, ReportInputs, ScenarioInputs, NBI_DIMENSION};
use crate::pipeline::{InputFile, Provenance};
use crate::schema::{NarrativeScript, StoryTree, ValidationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub template_hash: String,
}

/// Error payload for every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    /// Stable machine-readable code, e.g. `not_found`, `invalid_event`.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateScript {
    pub scene_id: String,
    pub strategy: PromptStrategy,
    /// Overrides the service's configured backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_fragments: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_objects: Option<usize>,
}

impl GenerateScript {
    pub fn new(scene_id: impl Into<String>, strategy: PromptStrategy) -> Self {
        GenerateScript {
            scene_id: scene_id.into(),
            strategy,
            backend: None,
            seed: None,
            max_fragments: None,
            key_objects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadScript {
    pub scene_id: String,
    pub script: NarrativeScript,
}

/// Body of `POST /scripts`: a body carrying `script` is an upload,
/// otherwise a generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CreateScript {
    Upload(UploadScript),
    Generate(GenerateScript),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptSource {
    Generated,
    Uploaded,
}

/// A validated, linked and anchored script held by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub id: String,
    pub scene_id: String,
    pub source: ScriptSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<PromptStrategy>,
    pub script_digest: String,
    pub script: NarrativeScript,
    pub validation: ValidationReport,
    pub tree: StoryTree,
    pub anchors: AnchorTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<Timing>,
}

impl ScriptRecord {
    pub fn summary(&self) -> ScriptSummary {
        ScriptSummary {
            id: self.id.clone(),
            scene_id: self.scene_id.clone(),
            source: self.source,
            strategy: self.strategy,
            script_digest: self.script_digest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSummary {
    pub id: String,
    pub scene_id: String,
    pub source: ScriptSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<PromptStrategy>,
    pub script_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateRequest {
    /// The raw interchange document.
    pub document: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResponse {
    /// Set when the document did not parse; `report` is then absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ValidationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub script_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    /// Unix time in seconds.
    pub created: f64,
    pub script_id: String,
    pub script_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsAccepted {
    pub accepted: usize,
    pub stored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub files: Vec<InputFile>,
}

pub const METAPHOR_METRICS: [&str; 3] = ["MA", "SEF", "MD"];

/// Scenario name NBI ratings without an `@scenario` subject are filed under.
pub const UNNAMED_SCENARIO: &str = "default";

/// Routes free-standing ratings into report inputs: `MA`/`SEF`/`MD` to the
/// metaphor table, `NBI@<scenario>` to that scenario's row, everything else
/// to the story-comparison table.
pub fn ratings_report_inputs(samples: &[RatingSample]) -> ReportInputs {
    let mut inputs = ReportInputs::default();
    let mut nbi: BTreeMap<String, Vec<RatingSample>> = BTreeMap::new();
    for s in samples {
        let (metric, subject) = s.metric_and_subject();
        if metric == NBI_DIMENSION {
            nbi.entry(subject.unwrap_or(UNNAMED_SCENARIO).to_string())
                .or_default()
                .push(RatingSample {
                    dimension: NBI_DIMENSION.to_string(),
                    ..s.clone()
                });
        } else if METAPHOR_METRICS.contains(&metric) {
            inputs.metaphor_ratings.push(s.clone());
        } else {
            inputs.story_ratings.push(s.clone());
        }
    }
    inputs.scenarios = nbi
        .into_iter()
        .map(|(name, samples)| ScenarioInputs {
            name,
            nbi: Some(samples),
            ..Default::default()
        })
        .collect();
    inputs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_script_variants() {
        let up: CreateScript = serde_json::from_str(
            r#"{"scene_id":"office","script":{"object":[],"mainstory":[],"fragments":[]}}"#,
        )
        .unwrap();
        assert!(matches!(up, CreateScript::Upload(_)));
        let gen: CreateScript =
            serde_json::from_str(r#"{"scene_id":"office","strategy":"s2"}"#).unwrap();
        assert_eq!(
            gen,
            CreateScript::Generate(GenerateScript::new("office", PromptStrategy::Metaphorical))
        );
    }

    #[test]
    fn ratings_are_routed() {
        let inputs = ratings_report_inputs(&[
            RatingSample::new("a", "NBI@living", 3.0, 10.0),
            RatingSample::new("a", "NBI", 2.0, 10.0),
            RatingSample::new("a", "MA@Door", 4.0, 5.0),
            RatingSample::new("a", "Interesting@S1", 4.0, 5.0),
        ]);
        let names: Vec<&str> = inputs.scenarios.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec![UNNAMED_SCENARIO, "living"]);
        assert_eq!(inputs.metaphor_ratings.len(), 1);
        assert_eq!(inputs.story_ratings.len(), 1);
    }
}
