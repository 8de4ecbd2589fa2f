//! The narrative interchange document: key objects, a linear mainstory and
//! trigger-gated fragments. Parsing is structural only; cross references
//! are checked by [`validate_script`] and the story tree is assembled by
//! [`link_story_tree`].
//!
//! Fields a producer adds beyond the known set are kept in `extra` maps and
//! written back out unchanged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Maximum nesting of `all_of` / `any_of` combinators.
pub const MAX_TRIGGER_DEPTH: usize = 2;

pub type Extra = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("script parse error at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("script failed validation with {} error(s)", .0.errors().count())]
    Invalid(ValidationReport),
    #[error("cycle in after-edges: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRole {
    Key,
    Branching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub name: String,
    pub role: ObjectRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metaphor: Option<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainStoryBeat {
    pub index: u32,
    pub text: String,
    #[serde(default)]
    pub involved_objects: Vec<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

/// When a fragment becomes available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TriggerWire", into = "TriggerWire")]
pub enum TriggerCondition {
    Scan { object: String },
    Proximity { object: String, radius: f64 },
    After { fragment: String },
    AllOf(Vec<TriggerCondition>),
    AnyOf(Vec<TriggerCondition>),
}

impl TriggerCondition {
    pub fn scan(object: impl Into<String>) -> Self {
        TriggerCondition::Scan {
            object: object.into(),
        }
    }

    pub fn after(fragment: impl Into<String>) -> Self {
        TriggerCondition::After {
            fragment: fragment.into(),
        }
    }

    /// Combinator nesting depth; leaves are 0.
    pub fn depth(&self) -> usize {
        match self {
            TriggerCondition::AllOf(c) | TriggerCondition::AnyOf(c) => {
                1 + c.iter().map(TriggerCondition::depth).max().unwrap_or(0)
            }
            _ => 0,
        }
    }

    /// Leaf conditions in pre-order.
    pub fn leaves(&self) -> Vec<&TriggerCondition> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a TriggerCondition>) {
        match self {
            TriggerCondition::AllOf(c) | TriggerCondition::AnyOf(c) => {
                c.iter().for_each(|t| t.collect_leaves(out))
            }
            leaf => out.push(leaf),
        }
    }

    /// Fragment names this trigger waits on.
    pub fn after_refs(&self) -> impl Iterator<Item = &str> {
        self.leaves().into_iter().filter_map(|l| match l {
            TriggerCondition::After { fragment } => Some(fragment.as_str()),
            _ => None,
        })
    }

    /// Object names this trigger observes (scan or proximity).
    pub fn object_refs(&self) -> impl Iterator<Item = &str> {
        self.leaves().into_iter().filter_map(|l| match l {
            TriggerCondition::Scan { object } | TriggerCondition::Proximity { object, .. } => {
                Some(object.as_str())
            }
            _ => None,
        })
    }
}

impl fmt::Display for TriggerCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, name: &str, c: &[TriggerCondition]| {
            write!(f, "{name}(")?;
            for (i, t) in c.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{t}")?;
            }
            f.write_str(")")
        };
        match self {
            TriggerCondition::Scan { object } => write!(f, "scan({object})"),
            TriggerCondition::Proximity { object, radius } => {
                write!(f, "proximity({object}, {radius} m)")
            }
            TriggerCondition::After { fragment } => write!(f, "after({fragment})"),
            TriggerCondition::AllOf(c) => join(f, "all_of", c),
            TriggerCondition::AnyOf(c) => join(f, "any_of", c),
        }
    }
}

/// Flat on-the-wire shape of a trigger condition.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TriggerWire {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fragment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    all_of: Option<Vec<TriggerCondition>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    any_of: Option<Vec<TriggerCondition>>,
}

impl TryFrom<TriggerWire> for TriggerCondition {
    type Error = String;

    fn try_from(w: TriggerWire) -> Result<Self, String> {
        let need = |v: Option<String>, field: &str| {
            v.ok_or_else(|| format!("trigger kind `{}` requires field `{field}`", w.kind))
        };
        match w.kind.as_str() {
            "scan" => Ok(TriggerCondition::Scan {
                object: need(w.object.clone(), "object")?,
            }),
            "proximity" => Ok(TriggerCondition::Proximity {
                object: need(w.object.clone(), "object")?,
                radius: w
                    .radius
                    .ok_or_else(|| "trigger kind `proximity` requires field `radius`".to_string())?,
            }),
            "after" => Ok(TriggerCondition::After {
                fragment: need(w.fragment.clone(), "fragment")?,
            }),
            "all_of" => w
                .all_of
                .map(TriggerCondition::AllOf)
                .ok_or_else(|| "trigger kind `all_of` requires field `all_of`".to_string()),
            "any_of" => w
                .any_of
                .map(TriggerCondition::AnyOf)
                .ok_or_else(|| "trigger kind `any_of` requires field `any_of`".to_string()),
            other => Err(format!(
                "unknown trigger kind `{other}` (expected scan, proximity, after, all_of, any_of)"
            )),
        }
    }
}

impl From<TriggerCondition> for TriggerWire {
    fn from(t: TriggerCondition) -> Self {
        match t {
            TriggerCondition::Scan { object } => TriggerWire {
                kind: "scan".into(),
                object: Some(object),
                ..Default::default()
            },
            TriggerCondition::Proximity { object, radius } => TriggerWire {
                kind: "proximity".into(),
                object: Some(object),
                radius: Some(radius),
                ..Default::default()
            },
            TriggerCondition::After { fragment } => TriggerWire {
                kind: "after".into(),
                fragment: Some(fragment),
                ..Default::default()
            },
            TriggerCondition::AllOf(c) => TriggerWire {
                kind: "all_of".into(),
                all_of: Some(c),
                ..Default::default()
            },
            TriggerCondition::AnyOf(c) => TriggerWire {
                kind: "any_of".into(),
                any_of: Some(c),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub name: String,
    #[serde(default)]
    pub topic: String,
    pub core_object: String,
    #[serde(default)]
    pub agents: Vec<String>,
    #[serde(default)]
    pub interaction_mode: String,
    #[serde(default)]
    pub symbolic_meaning: String,
    pub content: String,
    #[serde(rename = "triggerCondition")]
    pub trigger: TriggerCondition,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeScript {
    #[serde(rename = "object")]
    pub objects: Vec<ObjectRef>,
    pub mainstory: Vec<MainStoryBeat>,
    #[serde(default)]
    pub fragments: Vec<Fragment>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl NarrativeScript {
    pub fn fragment(&self, name: &str) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.name == name)
    }

    pub fn object(&self, name: &str) -> Option<&ObjectRef> {
        self.objects.iter().find(|o| o.name == name)
    }
}

/// Structural parse; no cross-reference checks.
pub fn parse_script(document: &str) -> Result<NarrativeScript, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        SchemaError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}

/// Pretty JSON with a fixed key order and trailing newline.
pub fn serialize_script(script: &NarrativeScript) -> String {
    let mut out = serde_json::to_string_pretty(script).expect("script serializes");
    out.push('\n');
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptyMainstory,
    NoncontiguousBeatIndex,
    EmptyField,
    DuplicateFragmentName,
    UnresolvedCoreObject,
    UnresolvedTriggerReference,
    UnresolvedBeatObject,
    InvalidTrigger,
    CycleInAfterEdges,
    OrphanFragment,
}

impl ViolationCode {
    pub const ALL: [ViolationCode; 10] = [
        ViolationCode::EmptyMainstory,
        ViolationCode::NoncontiguousBeatIndex,
        ViolationCode::EmptyField,
        ViolationCode::DuplicateFragmentName,
        ViolationCode::UnresolvedCoreObject,
        ViolationCode::UnresolvedTriggerReference,
        ViolationCode::UnresolvedBeatObject,
        ViolationCode::InvalidTrigger,
        ViolationCode::CycleInAfterEdges,
        ViolationCode::OrphanFragment,
    ];

    pub fn severity(self) -> Severity {
        match self {
            ViolationCode::OrphanFragment | ViolationCode::UnresolvedBeatObject => {
                Severity::Warning
            }
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            code,
            severity: code.severity(),
            path: path.into(),
            message: message.into(),
        });
    }
}

/// Checks every script invariant. Never fails; violations are returned as
/// data.
pub fn validate_script(script: &NarrativeScript) -> ValidationReport {
    use ViolationCode::*;
    let mut report = ValidationReport::default();

    let object_names: HashSet<&str> = script.objects.iter().map(|o| o.name.as_str()).collect();
    for (i, o) in script.objects.iter().enumerate() {
        if o.name.trim().is_empty() {
            report.push(EmptyField, format!("object[{i}].name"), "object name is empty");
        }
    }

    if script.mainstory.is_empty() {
        report.push(EmptyMainstory, "mainstory", "mainstory has no beats");
    }
    for (pos, beat) in script.mainstory.iter().enumerate() {
        let path = format!("mainstory[{pos}]");
        if beat.index as usize != pos {
            report.push(
                NoncontiguousBeatIndex,
                format!("{path}.index"),
                format!("expected index {pos}, found {}", beat.index),
            );
        }
        if beat.text.trim().is_empty() {
            report.push(EmptyField, format!("{path}.text"), "beat text is empty");
        }
        for (j, name) in beat.involved_objects.iter().enumerate() {
            if !object_names.contains(name.as_str()) {
                report.push(
                    UnresolvedBeatObject,
                    format!("{path}.involved_objects[{j}]"),
                    format!("`{name}` is not a declared object"),
                );
            }
        }
    }

    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (i, frag) in script.fragments.iter().enumerate() {
        let path = format!("fragments[{i}]");
        if frag.name.trim().is_empty() {
            report.push(EmptyField, format!("{path}.name"), "fragment name is empty");
        }
        if let Some(prev) = first_seen.get(frag.name.as_str()) {
            report.push(
                DuplicateFragmentName,
                format!("{path}.name"),
                format!("`{}` already declared at fragments[{prev}]", frag.name),
            );
        } else {
            first_seen.insert(frag.name.as_str(), i);
        }
        if frag.content.trim().is_empty() {
            report.push(EmptyField, format!("{path}.content"), "fragment content is empty");
        }
        if !object_names.contains(frag.core_object.as_str()) {
            report.push(
                UnresolvedCoreObject,
                format!("{path}.core_object"),
                format!("`{}` is not a declared object", frag.core_object),
            );
        }
        let trigger_path = format!("{path}.triggerCondition");
        if frag.trigger.depth() > MAX_TRIGGER_DEPTH {
            report.push(
                InvalidTrigger,
                &trigger_path,
                format!(
                    "combinator nesting depth {} exceeds {MAX_TRIGGER_DEPTH}",
                    frag.trigger.depth()
                ),
            );
        }
        check_trigger(
            &frag.trigger,
            &trigger_path,
            &object_names,
            script,
            &mut report,
        );
    }

    if let Some(cycle) = find_after_cycle(script) {
        report.push(
            CycleInAfterEdges,
            "fragments",
            format!("after-edges form a cycle: {}", cycle.join(" -> ")),
        );
    }

    let attached = attached_fragments(script);
    for (i, frag) in script.fragments.iter().enumerate() {
        if !attached[i] {
            report.push(
                OrphanFragment,
                format!("fragments[{i}]"),
                format!(
                    "`{}` is not reachable from any mainstory beat through its trigger",
                    frag.name
                ),
            );
        }
    }
    report
}

fn check_trigger(
    trigger: &TriggerCondition,
    path: &str,
    objects: &HashSet<&str>,
    script: &NarrativeScript,
    report: &mut ValidationReport,
) {
    use ViolationCode::*;
    match trigger {
        TriggerCondition::Scan { object } => {
            if !objects.contains(object.as_str()) {
                report.push(
                    UnresolvedTriggerReference,
                    format!("{path}.object"),
                    format!("`{object}` is not a declared object"),
                );
            }
        }
        TriggerCondition::Proximity { object, radius } => {
            if !objects.contains(object.as_str()) {
                report.push(
                    UnresolvedTriggerReference,
                    format!("{path}.object"),
                    format!("`{object}` is not a declared object"),
                );
            }
            if !radius.is_finite() || *radius <= 0.0 {
                report.push(
                    InvalidTrigger,
                    format!("{path}.radius"),
                    format!("radius must be positive, found {radius}"),
                );
            }
        }
        TriggerCondition::After { fragment } => {
            if script.fragment(fragment).is_none() {
                report.push(
                    UnresolvedTriggerReference,
                    format!("{path}.fragment"),
                    format!("`{fragment}` is not a declared fragment"),
                );
            }
        }
        TriggerCondition::AllOf(children) | TriggerCondition::AnyOf(children) => {
            let key = if matches!(trigger, TriggerCondition::AllOf(_)) {
                "all_of"
            } else {
                "any_of"
            };
            if children.is_empty() {
                report.push(InvalidTrigger, format!("{path}.{key}"), "combinator has no operands");
            }
            for (i, c) in children.iter().enumerate() {
                check_trigger(c, &format!("{path}.{key}[{i}]"), objects, script, report);
            }
        }
    }
}

/// Directed after-edges `enabler -> dependent`, over resolved names only,
/// in declaration order of the dependent.
fn after_edges(script: &NarrativeScript) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for frag in &script.fragments {
        for dep in frag.trigger.after_refs() {
            if script.fragment(dep).is_some() {
                let edge = (dep.to_string(), frag.name.clone());
                if !edges.contains(&edge) {
                    edges.push(edge);
                }
            }
        }
    }
    edges
}

/// First cycle found by depth-first search in declaration order, listed
/// along edge direction starting from its earliest-declared member.
fn find_after_cycle(script: &NarrativeScript) -> Option<Vec<String>> {
    let mut names: Vec<&str> = Vec::new();
    for f in &script.fragments {
        if !names.contains(&f.name.as_str()) {
            names.push(f.name.as_str());
        }
    }
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut adj = vec![Vec::new(); names.len()];
    for (from, to) in after_edges(script) {
        adj[index[from.as_str()]].push(index[to.as_str()]);
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn dfs(
        u: usize,
        adj: &[Vec<usize>],
        mark: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        mark[u] = Mark::Active;
        stack.push(u);
        for &v in &adj[u] {
            match mark[v] {
                Mark::Active => {
                    let start = stack.iter().position(|&x| x == v).unwrap();
                    return Some(stack[start..].to_vec());
                }
                Mark::New => {
                    if let Some(c) = dfs(v, adj, mark, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        mark[u] = Mark::Done;
        None
    }

    let mut mark = vec![Mark::New; names.len()];
    for u in 0..names.len() {
        if mark[u] == Mark::New {
            let mut stack = Vec::new();
            if let Some(mut cycle) = dfs(u, &adj, &mut mark, &mut stack) {
                let min_pos = (0..cycle.len()).min_by_key(|&i| cycle[i]).unwrap();
                cycle.rotate_left(min_pos);
                return Some(cycle.into_iter().map(|i| names[i].to_string()).collect());
            }
        }
    }
    None
}

/// A fragment is attached when some leaf of its trigger observes an object
/// involved in a mainstory beat, or waits on an attached fragment.
fn attached_fragments(script: &NarrativeScript) -> Vec<bool> {
    let beat_objects: HashSet<&str> = script
        .mainstory
        .iter()
        .flat_map(|b| b.involved_objects.iter().map(String::as_str))
        .collect();
    let mut attached = vec![false; script.fragments.len()];
    loop {
        let mut changed = false;
        for (i, frag) in script.fragments.iter().enumerate() {
            if attached[i] {
                continue;
            }
            let hit = frag.trigger.leaves().into_iter().any(|leaf| match leaf {
                TriggerCondition::Scan { object } | TriggerCondition::Proximity { object, .. } => {
                    beat_objects.contains(object.as_str())
                }
                TriggerCondition::After { fragment } => script
                    .fragments
                    .iter()
                    .enumerate()
                    .any(|(j, g)| attached[j] && g.name == *fragment),
                _ => false,
            });
            if hit {
                attached[i] = true;
                changed = true;
            }
        }
        if !changed {
            return attached;
        }
    }
}

/// Mainstory spine plus trigger-gated fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryTree {
    pub objects: Vec<ObjectRef>,
    pub beats: Vec<MainStoryBeat>,
    pub fragments: Vec<Fragment>,
    /// `(beat index, fragment)`: the fragment's trigger observes an object
    /// involved in that beat.
    pub beat_edges: Vec<(u32, String)>,
    /// `(enabler, dependent)` from `after` conditions.
    pub after_edges: Vec<(String, String)>,
    /// Fragments not reachable from the spine; empty for a clean script.
    pub orphans: Vec<String>,
}

impl StoryTree {
    pub fn fragment_index(&self, name: &str) -> Option<usize> {
        self.fragments.iter().position(|f| f.name == name)
    }
}

pub fn link_story_tree(script: &NarrativeScript) -> Result<StoryTree, SchemaError> {
    if let Some(cycle) = find_after_cycle(script) {
        return Err(SchemaError::Cycle(cycle));
    }
    let report = validate_script(script);
    if report.has_errors() {
        return Err(SchemaError::Invalid(report));
    }

    let mut beat_edges = Vec::new();
    for beat in &script.mainstory {
        for frag in &script.fragments {
            if frag
                .trigger
                .object_refs()
                .any(|o| beat.involved_objects.iter().any(|b| b == o))
            {
                beat_edges.push((beat.index, frag.name.clone()));
            }
        }
    }
    let attached = attached_fragments(script);
    let orphans = script
        .fragments
        .iter()
        .zip(&attached)
        .filter(|(_, a)| !**a)
        .map(|(f, _)| f.name.clone())
        .collect();

    Ok(StoryTree {
        objects: script.objects.clone(),
        beats: script.mainstory.clone(),
        fragments: script.fragments.clone(),
        beat_edges,
        after_edges: after_edges(script),
        orphans,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn object(name: &str, role: ObjectRole) -> ObjectRef {
        ObjectRef {
            name: name.into(),
            role,
            metaphor: None,
            extra: Extra::new(),
        }
    }

    pub fn beat(index: u32, text: &str, involved: &[&str]) -> MainStoryBeat {
        MainStoryBeat {
            index,
            text: text.into(),
            involved_objects: involved.iter().map(|s| s.to_string()).collect(),
            extra: Extra::new(),
        }
    }

    pub fn fragment(name: &str, core: &str, trigger: TriggerCondition) -> Fragment {
        Fragment {
            name: name.into(),
            topic: "topic".into(),
            core_object: core.into(),
            agents: vec!["user".into()],
            interaction_mode: "scan".into(),
            symbolic_meaning: "meaning".into(),
            content: format!("content of {name}"),
            trigger,
            extra: Extra::new(),
        }
    }

    pub fn minimal() -> NarrativeScript {
        NarrativeScript {
            objects: vec![object("door", ObjectRole::Key)],
            mainstory: vec![beat(0, "The door waits.", &["door"])],
            fragments: vec![],
            extra: Extra::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn minimal_script_parses_and_validates() {
        let doc = r#"{"object":[{"name":"door","role":"key"}],
                      "mainstory":[{"index":0,"text":"Once.","involved_objects":["door"]}],
                      "fragments":[]}"#;
        let s = parse_script(doc).unwrap();
        assert_eq!(s, minimal_with_text("Once."));
        assert!(validate_script(&s).is_clean());
    }

    fn minimal_with_text(t: &str) -> NarrativeScript {
        let mut s = minimal();
        s.mainstory[0].text = t.into();
        s
    }

    #[test]
    fn missing_trigger_condition_reports_field_path() {
        let doc = r#"{"object":[{"name":"door","role":"key"}],
            "mainstory":[{"index":0,"text":"x"}],
            "fragments":[{"name":"f","core_object":"door","content":"c"}]}"#;
        match parse_script(doc) {
            Err(SchemaError::Parse { path, message, .. }) => {
                assert_eq!(path, "fragments[0]");
                assert!(message.contains("triggerCondition"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_script("{\"object\": [\n  {\"name\": }") {
            Err(SchemaError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trigger_kind_requires_its_fields() {
        let doc = r#"{"object":[{"name":"door","role":"key"}],
            "mainstory":[{"index":0,"text":"x"}],
            "fragments":[{"name":"f","core_object":"door","content":"c",
                          "triggerCondition":{"kind":"proximity","object":"door"}}]}"#;
        match parse_script(doc) {
            Err(SchemaError::Parse { path, message, .. }) => {
                assert!(path.starts_with("fragments[0]"), "{path}");
                assert!(message.contains("radius"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_survive_roundtrip() {
        let doc = r#"{"object":[{"name":"door","role":"key","confidence":0.8}],
            "mainstory":[{"index":0,"text":"x","mood":"tense"}],
            "fragments":[],"title":"The Office"}"#;
        let s = parse_script(doc).unwrap();
        assert_eq!(s.extra["title"], Value::String("The Office".into()));
        let out = serialize_script(&s);
        assert!(out.contains("\"confidence\": 0.8"));
        assert_eq!(parse_script(&out).unwrap(), s);
    }

    #[test]
    fn unresolved_core_object_is_caught() {
        let mut s = minimal();
        s.fragments.push(fragment("f", "CAVE", TriggerCondition::scan("door")));
        assert_eq!(validate_script(&s).codes(), vec![ViolationCode::UnresolvedCoreObject]);
    }

    #[test]
    fn duplicate_fragment_names_are_caught() {
        let mut s = minimal();
        s.fragments.push(fragment("fragment_1", "door", TriggerCondition::scan("door")));
        s.fragments.push(fragment("fragment_1", "door", TriggerCondition::scan("door")));
        assert_eq!(validate_script(&s).codes(), vec![ViolationCode::DuplicateFragmentName]);
    }

    #[test]
    fn empty_mainstory_is_caught() {
        let mut s = minimal();
        s.mainstory.clear();
        assert_eq!(validate_script(&s).codes(), vec![ViolationCode::EmptyMainstory]);
    }

    #[test]
    fn deep_triggers_and_bad_radius_are_invalid() {
        use TriggerCondition::*;
        let mut s = minimal();
        let deep = AllOf(vec![AnyOf(vec![AllOf(vec![TriggerCondition::scan("door")])])]);
        s.fragments.push(fragment("f", "door", deep));
        s.fragments.push(fragment(
            "g",
            "door",
            Proximity {
                object: "door".into(),
                radius: 0.0,
            },
        ));
        let codes = validate_script(&s).codes();
        assert_eq!(codes, vec![ViolationCode::InvalidTrigger, ViolationCode::InvalidTrigger]);
    }

    #[test]
    fn depth_two_is_allowed() {
        use TriggerCondition::*;
        let mut s = minimal();
        let t = AllOf(vec![AnyOf(vec![TriggerCondition::scan("door")]), TriggerCondition::scan("door")]);
        assert_eq!(t.depth(), 2);
        s.fragments.push(fragment("f", "door", t));
        assert!(validate_script(&s).is_clean());
    }

    #[test]
    fn linking_without_fragments_is_spine_only() {
        let tree = link_story_tree(&minimal()).unwrap();
        assert_eq!(tree.beats.len(), 1);
        assert!(tree.fragments.is_empty() && tree.after_edges.is_empty());
    }

    #[test]
    fn after_creates_edge() {
        let mut s = minimal();
        s.fragments.push(fragment("A", "door", TriggerCondition::scan("door")));
        s.fragments.push(fragment("B", "door", TriggerCondition::after("A")));
        let tree = link_story_tree(&s).unwrap();
        assert_eq!(tree.after_edges, vec![("A".to_string(), "B".to_string())]);
        assert_eq!(tree.beat_edges, vec![(0, "A".to_string())]);
        assert!(tree.orphans.is_empty());
    }

    #[test]
    fn mutual_after_is_a_cycle() {
        let mut s = minimal();
        s.fragments.push(fragment("A", "door", TriggerCondition::after("B")));
        s.fragments.push(fragment("B", "door", TriggerCondition::after("A")));
        match link_story_tree(&s) {
            Err(SchemaError::Cycle(c)) => assert_eq!(c, vec!["A", "B"]),
            other => panic!("{other:?}"),
        }
        assert!(validate_script(&s).codes().contains(&ViolationCode::CycleInAfterEdges));
    }

    #[test]
    fn orphans_are_warnings_and_flagged_in_tree() {
        let mut s = minimal();
        s.objects.push(object("lamp", ObjectRole::Branching));
        s.fragments.push(fragment("lonely", "lamp", TriggerCondition::scan("lamp")));
        let report = validate_script(&s);
        assert_eq!(report.codes(), vec![ViolationCode::OrphanFragment]);
        assert!(!report.has_errors());
        let tree = link_story_tree(&s).unwrap();
        assert_eq!(tree.orphans, vec!["lonely"]);
    }

    #[test]
    fn link_refuses_invalid_scripts() {
        let mut s = minimal();
        s.fragments.push(fragment("f", "CAVE", TriggerCondition::scan("door")));
        assert!(matches!(link_story_tree(&s), Err(SchemaError::Invalid(_))));
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut s = minimal();
        s.fragments.push(fragment("A", "door", TriggerCondition::scan("door")));
        assert_eq!(serialize_script(&s), serialize_script(&s));
        assert_eq!(parse_script(&serialize_script(&s)).unwrap(), s);
    }
}

#[cfg(test)]
mod proptests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn arb_leaf(n_objects: usize, n_frags: usize) -> impl Strategy<Value = TriggerCondition> {
        prop_oneof![
            (0..n_objects).prop_map(|i| TriggerCondition::scan(format!("obj {i}"))),
            (0..n_objects, 0.1..5.0f64).prop_map(|(i, r)| TriggerCondition::Proximity {
                object: format!("obj {i}"),
                radius: r
            }),
            (0..n_frags.max(1)).prop_map(|i| TriggerCondition::after(format!("frag_{i}"))),
        ]
    }

    fn arb_trigger() -> impl Strategy<Value = TriggerCondition> {
        arb_leaf(4, 6).prop_recursive(2, 8, 3, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 1..3).prop_map(TriggerCondition::AllOf),
                proptest::collection::vec(inner, 1..3).prop_map(TriggerCondition::AnyOf),
            ]
        })
    }

    prop_compose! {
        fn arb_script()(
            n_beats in 1usize..4,
            triggers in proptest::collection::vec(arb_trigger(), 0..6),
            metaphor in proptest::option::of("[a-z ]{1,12}"),
            text in "[A-Za-z ,.\u{e9}\u{201c}]{1,40}",
        ) -> NarrativeScript {
            let mut objects: Vec<ObjectRef> = (0..4)
                .map(|i| object(&format!("obj {i}"), if i == 0 { ObjectRole::Key } else { ObjectRole::Branching }))
                .collect();
            objects[1].metaphor = metaphor;
            NarrativeScript {
                objects,
                mainstory: (0..n_beats as u32).map(|i| beat(i, &text, &["obj 0"])).collect(),
                fragments: triggers
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| fragment(&format!("frag_{i}"), "obj 1", t))
                    .collect(),
                extra: Extra::new(),
            }
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_roundtrip(s in arb_script()) {
            let doc = serialize_script(&s);
            prop_assert_eq!(parse_script(&doc).unwrap(), s);
        }

        #[test]
        fn link_succeeds_iff_no_errors_and_acyclic(s in arb_script()) {
            let report = validate_script(&s);
            let acyclic = !report.codes().contains(&ViolationCode::CycleInAfterEdges);
            prop_assert_eq!(link_story_tree(&s).is_ok(), !report.has_errors() && acyclic);
        }
    }
}
