//! Interactive session over a linked [`StoryTree`].
//!
//! The event log is the source of truth: a [`SessionState`] is exactly what
//! [`replay`] produces from its log. Trigger conditions are positive (no
//! negation), so the set of satisfied fragments only grows as events arrive.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::AnchorTable;
use crate::schema::{ObjectRole, StoryTree, TriggerCondition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("story tree has no mainstory beats")]
    NoBeats,
    #[error("event at t={got} precedes last logged event at t={last}")]
    OutOfOrder { last: f64, got: f64 },
    #[error("event timestamp {0} is not a finite non-negative number")]
    BadTimestamp(f64),
    #[error("unknown fragment `{0}`")]
    UnknownFragment(String),
    #[error("fragment `{0}` is already being viewed")]
    AlreadyViewing(String),
    #[error("view_end for `{0}` without a matching view_start")]
    UnmatchedViewEnd(String),
    #[error("proximity distance {0} must be finite and non-negative")]
    BadDistance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Scan { object: String },
    Proximity { object: String, distance: f64 },
    ViewStart { fragment: String },
    ViewEnd { fragment: String },
    /// Explicit request to move to the next mainstory beat.
    Advance,
}

/// One line of the session JSONL log: `{"t":1.5,"kind":"scan","object":"door"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn scan(t: f64, object: impl Into<String>) -> Self {
        SessionEvent {
            t,
            kind: EventKind::Scan {
                object: object.into(),
            },
        }
    }

    pub fn proximity(t: f64, object: impl Into<String>, distance: f64) -> Self {
        SessionEvent {
            t,
            kind: EventKind::Proximity {
                object: object.into(),
                distance,
            },
        }
    }

    pub fn view_start(t: f64, fragment: impl Into<String>) -> Self {
        SessionEvent {
            t,
            kind: EventKind::ViewStart {
                fragment: fragment.into(),
            },
        }
    }

    pub fn view_end(t: f64, fragment: impl Into<String>) -> Self {
        SessionEvent {
            t,
            kind: EventKind::ViewEnd {
                fragment: fragment.into(),
            },
        }
    }

    pub fn advance(t: f64) -> Self {
        SessionEvent {
            t,
            kind: EventKind::Advance,
        }
    }
}

pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect()
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<SessionEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", content = "id", rename_all = "snake_case")]
pub enum PathStep {
    Beat(u32),
    Fragment(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub activated: Vec<String>,
    pub warnings: Vec<String>,
    pub current_beat: u32,
    pub completed: bool,
}

/// Raw facts accumulated from the log that trigger leaves are checked
/// against, keyed by narrative object name.
#[derive(Debug, Clone, Default, PartialEq)]
struct Observations {
    scanned: HashSet<String>,
    /// Closest reported distance per object.
    nearest: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub tree: StoryTree,
    pub anchor_table: AnchorTable,
    pub activated: Vec<String>,
    pub current_beat: u32,
    /// Set once the final beat's fragments are all activated, or the final
    /// beat is advanced past.
    pub completed: bool,
    pub log: Vec<SessionEvent>,
    pub fragment_view_durations: BTreeMap<String, f64>,
    /// Open view_start times.
    pub viewing: BTreeMap<String, f64>,
    pub path: Vec<PathStep>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    observations: Observations,
}

pub fn start_session(tree: StoryTree, anchors: AnchorTable) -> Result<SessionState, EngineError> {
    if tree.beats.is_empty() {
        return Err(EngineError::NoBeats);
    }
    Ok(SessionState {
        tree,
        anchor_table: anchors,
        activated: Vec::new(),
        current_beat: 0,
        completed: false,
        log: Vec::new(),
        fragment_view_durations: BTreeMap::new(),
        viewing: BTreeMap::new(),
        path: vec![PathStep::Beat(0)],
        warnings: Vec::new(),
        observations: Observations::default(),
    })
}

/// Rebuilds a session from its event log.
pub fn replay(
    tree: StoryTree,
    anchors: AnchorTable,
    events: &[SessionEvent],
) -> Result<SessionState, EngineError> {
    let mut state = start_session(tree, anchors)?;
    for e in events {
        state.handle_event(e.clone())?;
    }
    Ok(state)
}

impl SessionState {
    /// Narrative names an event's object id stands for: the name bound to
    /// that scene id, and the id itself when it is a declared narrative name.
    fn names_for(&self, object: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(n) = self.anchor_table.name_for_id(object) {
            out.push(n.to_string());
        }
        if self.tree.objects.iter().any(|o| o.name == object) && !out.iter().any(|n| n == object) {
            out.push(object.to_string());
        }
        out
    }

    fn is_known_object(&self, object: &str) -> bool {
        !self.names_for(object).is_empty()
    }

    fn leaf_met(&self, leaf: &TriggerCondition, active: &HashSet<&str>) -> bool {
        match leaf {
            TriggerCondition::Scan { object } => self.observations.scanned.contains(object),
            TriggerCondition::Proximity { object, radius } => self
                .observations
                .nearest
                .get(object)
                .is_some_and(|d| d <= radius),
            TriggerCondition::After { fragment } => active.contains(fragment.as_str()),
            TriggerCondition::AllOf(c) => c.iter().all(|t| self.leaf_met(t, active)),
            TriggerCondition::AnyOf(c) => c.iter().any(|t| self.leaf_met(t, active)),
        }
    }

    /// Human-readable unmet parts of a trigger, or `None` when satisfied.
    fn unmet(&self, t: &TriggerCondition, active: &HashSet<&str>) -> Option<String> {
        if self.leaf_met(t, active) {
            return None;
        }
        match t {
            TriggerCondition::AllOf(c) => {
                let parts: Vec<String> = c.iter().filter_map(|x| self.unmet(x, active)).collect();
                Some(if parts.len() == 1 {
                    parts.into_iter().next().unwrap()
                } else {
                    format!("all_of({})", parts.join(", "))
                })
            }
            TriggerCondition::AnyOf(c) => {
                let parts: Vec<String> = c.iter().filter_map(|x| self.unmet(x, active)).collect();
                Some(format!("any_of({})", parts.join(", ")))
            }
            leaf => Some(leaf.to_string()),
        }
    }

    fn check(&self, event: &SessionEvent) -> Result<(), EngineError> {
        if !event.t.is_finite() || event.t < 0.0 {
            return Err(EngineError::BadTimestamp(event.t));
        }
        if let Some(last) = self.log.last() {
            if event.t < last.t {
                return Err(EngineError::OutOfOrder {
                    last: last.t,
                    got: event.t,
                });
            }
        }
        match &event.kind {
            EventKind::Proximity { distance, .. } if !distance.is_finite() || *distance < 0.0 => {
                Err(EngineError::BadDistance(*distance))
            }
            EventKind::ViewStart { fragment } => {
                if self.tree.fragment_index(fragment).is_none() {
                    Err(EngineError::UnknownFragment(fragment.clone()))
                } else if self.viewing.contains_key(fragment) {
                    Err(EngineError::AlreadyViewing(fragment.clone()))
                } else {
                    Ok(())
                }
            }
            EventKind::ViewEnd { fragment } => {
                if self.tree.fragment_index(fragment).is_none() {
                    Err(EngineError::UnknownFragment(fragment.clone()))
                } else if !self.viewing.contains_key(fragment) {
                    Err(EngineError::UnmatchedViewEnd(fragment.clone()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Validates without applying; `Ok` means [`Self::handle_event`] will
    /// accept the event.
    pub fn accepts(&self, event: &SessionEvent) -> Result<(), EngineError> {
        self.check(event)
    }

    /// Appends the event and activates every fragment whose trigger became
    /// satisfied, in declaration order. A rejected event leaves the state
    /// untouched.
    pub fn handle_event(&mut self, event: SessionEvent) -> Result<EventOutcome, EngineError> {
        self.check(&event)?;
        let mut warnings = Vec::new();
        let mut explicit_advance = false;
        match &event.kind {
            EventKind::Scan { object } => {
                if !self.is_known_object(object) {
                    warnings.push(format!("scan of unknown object `{object}`"));
                }
                for n in self.names_for(object) {
                    self.observations.scanned.insert(n);
                }
            }
            EventKind::Proximity { object, distance } => {
                if !self.is_known_object(object) {
                    warnings.push(format!("proximity to unknown object `{object}`"));
                }
                for n in self.names_for(object) {
                    let e = self.observations.nearest.entry(n).or_insert(f64::INFINITY);
                    *e = e.min(*distance);
                }
            }
            EventKind::ViewStart { fragment } => {
                self.viewing.insert(fragment.clone(), event.t);
            }
            EventKind::ViewEnd { fragment } => {
                let start = self.viewing.remove(fragment).expect("checked");
                *self
                    .fragment_view_durations
                    .entry(fragment.clone())
                    .or_insert(0.0) += event.t - start;
            }
            EventKind::Advance => explicit_advance = true,
        }
        self.log.push(event);

        let activated = self.activate();
        for name in &activated {
            self.path.push(PathStep::Fragment(name.clone()));
        }
        self.advance_beats(explicit_advance);
        for w in &warnings {
            tracing::warn!("{w}");
        }
        self.warnings.extend(warnings.iter().cloned());
        Ok(EventOutcome {
            activated,
            warnings,
            current_beat: self.current_beat,
            completed: self.completed,
        })
    }

    /// Least fixpoint of trigger satisfaction; newly satisfied fragments are
    /// returned in declaration order.
    fn activate(&mut self) -> Vec<String> {
        let mut active: HashSet<&str> = self.activated.iter().map(String::as_str).collect();
        let mut fresh = vec![false; self.tree.fragments.len()];
        loop {
            let mut changed = false;
            for (i, frag) in self.tree.fragments.iter().enumerate() {
                if active.contains(frag.name.as_str()) {
                    continue;
                }
                if self.leaf_met(&frag.trigger, &active) {
                    active.insert(frag.name.as_str());
                    fresh[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let new: Vec<String> = self
            .tree
            .fragments
            .iter()
            .zip(&fresh)
            .filter(|(_, f)| **f)
            .map(|(f, _)| f.name.clone())
            .collect();
        self.activated.extend(new.iter().cloned());
        new
    }

    /// Fragments whose core object is involved in the beat.
    fn beat_fragments(&self, beat: u32) -> Vec<&str> {
        let Some(b) = self.tree.beats.get(beat as usize) else {
            return Vec::new();
        };
        self.tree
            .fragments
            .iter()
            .filter(|f| b.involved_objects.contains(&f.core_object))
            .map(|f| f.name.as_str())
            .collect()
    }

    fn beat_done(&self, beat: u32) -> bool {
        let frags = self.beat_fragments(beat);
        !frags.is_empty() && frags.iter().all(|f| self.activated.iter().any(|a| a == f))
    }

    fn advance_beats(&mut self, mut explicit: bool) {
        let last = self.tree.beats.len() as u32 - 1;
        while !self.completed && (explicit || self.beat_done(self.current_beat)) {
            explicit = false;
            if self.current_beat == last {
                self.completed = true;
            } else {
                self.current_beat += 1;
                self.path.push(PathStep::Beat(self.current_beat));
            }
        }
    }

    pub fn available_triggers(&self) -> Vec<PendingTrigger> {
        let active: HashSet<&str> = self.activated.iter().map(String::as_str).collect();
        self.tree
            .fragments
            .iter()
            .filter(|f| !active.contains(f.name.as_str()))
            .map(|f| PendingTrigger {
                fragment: f.name.clone(),
                unmet: self
                    .unmet(&f.trigger, &active)
                    .unwrap_or_else(|| f.trigger.to_string()),
            })
            .collect()
    }

    pub fn export_log(&self) -> TraversalLog {
        let mut scan_counts = BTreeMap::new();
        for e in &self.log {
            if let EventKind::Scan { object } = &e.kind {
                *scan_counts.entry(object.clone()).or_insert(0u64) += 1;
            }
        }
        let mut durations = self.fragment_view_durations.clone();
        let mut warnings = Vec::new();
        if !self.viewing.is_empty() {
            let close = self.log.last().map_or(0.0, |e| e.t);
            for (frag, start) in &self.viewing {
                *durations.entry(frag.clone()).or_insert(0.0) += close - start;
                warnings.push(format!(
                    "view of `{frag}` still open at export; closed at t={close}"
                ));
            }
        }
        TraversalLog {
            scan_counts,
            activation_order: self.activated.clone(),
            view_durations: durations,
            triggered_path: self.path.clone(),
            event_count: self.log.len(),
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTrigger {
    pub fragment: String,
    pub unmet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalLog {
    /// Scan events per scanned object id.
    pub scan_counts: BTreeMap<String, u64>,
    pub activation_order: Vec<String>,
    pub view_durations: BTreeMap<String, f64>,
    pub triggered_path: Vec<PathStep>,
    pub event_count: usize,
    pub warnings: Vec<String>,
}

/// How far a traversal went beyond what the key objects alone unlock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSummary {
    pub key_fragments_activated: usize,
    pub other_fragments_activated: usize,
    pub total_fragments: usize,
    /// `other / (total - key-only)`; 0 when no such fragments exist.
    pub beyond_key_fraction: f64,
}

/// Splits activations into fragments centered on key objects and the rest.
pub fn exploration_summary(state: &SessionState) -> ExplorationSummary {
    let is_key = |core: &str| {
        state
            .tree
            .objects
            .iter()
            .any(|o| o.name == core && o.role == ObjectRole::Key)
    };
    let mut key = 0;
    let mut other = 0;
    for name in &state.activated {
        let idx = state.tree.fragment_index(name).expect("activated fragment exists");
        if is_key(&state.tree.fragments[idx].core_object) {
            key += 1;
        } else {
            other += 1;
        }
    }
    let non_key_total = state
        .tree
        .fragments
        .iter()
        .filter(|f| !is_key(&f.core_object))
        .count();
    ExplorationSummary {
        key_fragments_activated: key,
        other_fragments_activated: other,
        total_fragments: state.tree.fragments.len(),
        beyond_key_fraction: if non_key_total == 0 {
            0.0
        } else {
            other as f64 / non_key_total as f64
        },
    }
}
