//! Binding narrative object names to tracked scene anchors.
//!
//! Names produced by a language model drift from runtime object names
//! ("console table" vs `table_console_01`), so matching works on
//! normalized token sets rather than raw strings.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{distance, SceneSnapshot, Vec3};
use crate::schema::NarrativeScript;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PLACEMENT_TOLERANCE_M: f64 = 0.5;
pub const DEFAULT_ANCHOR_COUNT: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("placement refers to unbound name `{0}`")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub name: String,
    pub id: String,
    pub score: f64,
    pub position: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub bindings: Vec<Binding>,
    pub unbound: Vec<String>,
}

impl AnchorTable {
    pub fn binding(&self, name: &str) -> Option<&Binding> {
        self.bindings.iter().find(|b| b.name == name)
    }

    pub fn name_for_id(&self, id: &str) -> Option<&str> {
        self.bindings
            .iter()
            .find(|b| b.id == id)
            .map(|b| b.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub score: f64,
}

/// Scores of one narrative name against every scene object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub name: String,
    /// Descending by score, ties by scene id.
    pub candidates: Vec<Candidate>,
    pub chosen: Option<String>,
}

fn singular(token: &str) -> &str {
    if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        &token[..token.len() - 1]
    } else {
        token
    }
}

/// Lowercased tokens, split on anything that is not a letter (whitespace,
/// underscores, digits, punctuation), with a trailing plural `s` dropped.
pub fn tokens(name: &str) -> BTreeSet<String> {
    name.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(|t| singular(t).to_string())
        .collect()
}

fn normalized(name: &str) -> String {
    name.trim().to_lowercase()
}

/// `max(exact match, token-set Jaccard)`, in `[0, 1]`.
pub fn name_score(a: &str, b: &str) -> f64 {
    let na = normalized(a);
    if !na.is_empty() && na == normalized(b) {
        return 1.0;
    }
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Best score of `name` against a scene object's display name and id.
fn object_score(name: &str, object_name: &str, object_id: &str) -> f64 {
    name_score(name, object_name).max(name_score(name, object_id))
}

pub fn candidates(name: &str, scene: &SceneSnapshot) -> Vec<Candidate> {
    let mut c: Vec<Candidate> = scene
        .objects
        .iter()
        .map(|o| Candidate {
            id: o.id.clone(),
            score: object_score(name, &o.name, &o.id),
        })
        .collect();
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    c
}

/// Per-name diagnostics behind [`match_names`].
pub fn explain_matches(names: &[String], scene: &SceneSnapshot, threshold: f64) -> Vec<MatchResult> {
    let table = match_names(names, scene, threshold);
    dedup(names)
        .into_iter()
        .map(|name| MatchResult {
            candidates: candidates(name, scene),
            chosen: table.binding(name).map(|b| b.id.clone()),
            name: name.to_string(),
        })
        .collect()
}

fn dedup(names: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    names
        .iter()
        .map(String::as_str)
        .filter(|n| seen.insert(*n))
        .collect()
}

/// Greedy one-to-one assignment in descending score order. Ties go to the
/// earlier narrative name, then to the lexicographically smaller scene id.
/// Pairs scoring zero or below `threshold` never bind.
pub fn match_names(names: &[String], scene: &SceneSnapshot, threshold: f64) -> AnchorTable {
    let names = dedup(names);
    let mut pairs: Vec<(f64, usize, &str, usize)> = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        for (oi, obj) in scene.objects.iter().enumerate() {
            let score = object_score(name, &obj.name, &obj.id);
            if score > 0.0 && score >= threshold {
                pairs.push((score, ni, obj.id.as_str(), oi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(b.2))
    });

    let mut by_name: BTreeMap<usize, Binding> = BTreeMap::new();
    let mut used_ids = HashSet::new();
    for (score, ni, id, oi) in pairs {
        if by_name.contains_key(&ni) || used_ids.contains(id) {
            continue;
        }
        used_ids.insert(id);
        by_name.insert(
            ni,
            Binding {
                name: names[ni].to_string(),
                id: id.to_string(),
                score,
                position: scene.objects[oi].centroid(),
            },
        );
    }
    let unbound = names
        .iter()
        .enumerate()
        .filter(|(i, _)| !by_name.contains_key(i))
        .map(|(_, n)| n.to_string())
        .collect();
    AnchorTable {
        bindings: by_name.into_values().collect(),
        unbound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementViolation {
    pub name: String,
    pub distance: f64,
}

/// Placements farther than `tolerance` meters from their bound anchor.
pub fn spatial_consistency_check(
    table: &AnchorTable,
    placements: &[(String, Vec3)],
    tolerance: f64,
) -> Result<Vec<PlacementViolation>, AnchorError> {
    let mut out = Vec::new();
    for (name, position) in placements {
        let binding = table
            .binding(name)
            .ok_or_else(|| AnchorError::Unbound(name.clone()))?;
        let d = distance(binding.position, *position);
        if d > tolerance {
            out.push(PlacementViolation {
                name: name.clone(),
                distance: d,
            });
        }
    }
    Ok(out)
}

/// Ranks the script's metaphor-bearing objects by metaphorical weight, then
/// by how many fragments use them as core object, then by name; returns at
/// most `k`.
///
/// An object carries a metaphor when the script gives it one or when its
/// matched scene object has a metaphorical layer. The weight comes from the
/// scene layer (0 when absent).
pub fn progressive_anchor_selection(
    script: &NarrativeScript,
    scene: &SceneSnapshot,
    k: usize,
) -> Vec<String> {
    let names: Vec<String> = script.objects.iter().map(|o| o.name.clone()).collect();
    let table = match_names(&names, scene, DEFAULT_MATCH_THRESHOLD);

    let mut ranked: Vec<(f64, usize, &str)> = script
        .objects
        .iter()
        .filter_map(|obj| {
            let layer = table
                .binding(&obj.name)
                .and_then(|b| scene.object(&b.id))
                .and_then(|o| o.semantics.metaphorical.as_ref());
            let scripted = obj.metaphor.as_deref().is_some_and(|m| !m.trim().is_empty());
            if !scripted && layer.is_none() {
                return None;
            }
            let weight = layer.map_or(0.0, |m| m.weight);
            let uses = script
                .fragments
                .iter()
                .filter(|f| f.core_object == obj.name)
                .count();
            Some((weight, uses, obj.name.as_str()))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.cmp(&a.1))
            .then_with(|| a.2.cmp(b.2))
    });
    ranked.dedup_by(|a, b| a.2 == b.2);
    ranked.into_iter().take(k).map(|r| r.2.to_string()).collect()
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::scene::{ObjectState, Pose, SceneObject, SemanticLayers, StateLabel};
    use proptest::prelude::*;

    const WORDS: [&str; 8] = ["door", "table", "console", "rack", "server", "curtain", "lamp", "chair"];

    fn arb_name() -> impl Strategy<Value = String> {
        proptest::collection::vec(0..WORDS.len(), 1..4)
            .prop_map(|ix| ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
    }

    fn scene_of(names: &[String]) -> SceneSnapshot {
        SceneSnapshot {
            scene_id: "p".into(),
            timestamp: 0.0,
            viewpoint: Pose::IDENTITY,
            objects: names
                .iter()
                .enumerate()
                .map(|(i, n)| SceneObject {
                    id: format!("{}_{i:02}", n.replace(' ', "_")),
                    name: n.clone(),
                    pose: Pose::at([i as f64, 0.0, 0.0]),
                    bbox: [1.0; 3],
                    state: ObjectState::new(StateLabel::Intact),
                    semantics: SemanticLayers {
                        physical: "p".into(),
                        functional: "f".into(),
                        metaphorical: None,
                    },
                })
                .collect(),
        }
    }

    proptest! {
        #[test]
        fn raising_threshold_never_binds_more(
            narrative in proptest::collection::vec(arb_name(), 1..8),
            objects in proptest::collection::vec(arb_name(), 1..8),
            lo in 0.0..1.0f64,
            bump in 0.0..1.0f64,
        ) {
            let s = scene_of(&objects);
            let hi = (lo + bump).min(1.0);
            let a = match_names(&narrative, &s, lo);
            let b = match_names(&narrative, &s, hi);
            let bound_lo: HashSet<_> = a.bindings.iter().map(|x| x.name.clone()).collect();
            for x in &b.bindings {
                prop_assert!(bound_lo.contains(&x.name));
            }
            let ids: HashSet<_> = a.bindings.iter().map(|x| x.id.clone()).collect();
            prop_assert_eq!(ids.len(), a.bindings.len());
        }
    }
}
