//! State-aware scene description: objects with poses, states and layered
//! (physical / functional / metaphorical) semantics, plus the geometric
//! primitives the rest of the pipeline consumes.
//!
//! Coordinates are meters in a right-handed, y-up frame. Orientations are
//! unit quaternions stored as `[w, x, y, z]`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Centroid displacement above which an object counts as moved.
pub const MOVE_THRESHOLD_M: f64 = 0.05;

/// Weight assigned to a metaphorical descriptor that arrives without one.
pub const DEFAULT_METAPHOR_WEIGHT: f64 = 0.5;

const QUAT_NORM_TOLERANCE: f64 = 1e-6;
const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("duplicate object id `{0}`")]
    DuplicateId(String),
    #[error("invalid scene at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("viewpoint coincides with the centroid of `{0}`; projection is degenerate")]
    DegenerateProjection(String),
    #[error("target `{0}` must not be among its own occluders")]
    TargetInOccluders(String),
    #[error("scene ids differ: `{before}` vs `{after}`")]
    SceneMismatch { before: String, after: String },
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    /// `[w, x, y, z]`
    pub orientation: [f64; 4],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: [0.0, 0.0, 0.0],
        orientation: [1.0, 0.0, 0.0, 0.0],
    };

    pub fn at(position: Vec3) -> Self {
        Pose {
            position,
            ..Pose::IDENTITY
        }
    }

    fn check(&self, path: &str) -> Result<(), SceneError> {
        if self.position.iter().any(|c| !c.is_finite()) {
            return Err(invalid(format!("{path}.position"), "components must be finite"));
        }
        let n = self.orientation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOLERANCE {
            return Err(invalid(
                format!("{path}.orientation"),
                format!("quaternion norm {n} is not 1"),
            ));
        }
        Ok(())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metaphor {
    pub text: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    DEFAULT_METAPHOR_WEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLayers {
    pub physical: String,
    pub functional: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metaphorical: Option<Metaphor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StateLabel {
    Intact,
    Damaged,
    Displaced,
    Hidden,
    Custom(String),
}

impl StateLabel {
    pub fn as_str(&self) -> &str {
        match self {
            StateLabel::Intact => "intact",
            StateLabel::Damaged => "damaged",
            StateLabel::Displaced => "displaced",
            StateLabel::Hidden => "hidden",
            StateLabel::Custom(tag) => tag,
        }
    }

    pub fn parse(label: &str) -> Self {
        match label {
            "intact" => StateLabel::Intact,
            "damaged" => StateLabel::Damaged,
            "displaced" => StateLabel::Displaced,
            "hidden" => StateLabel::Hidden,
            other => StateLabel::Custom(other.to_string()),
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for StateLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StateLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(StateLabel::parse(&raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub label: StateLabel,
    #[serde(default)]
    pub note: String,
}

impl ObjectState {
    pub fn new(label: StateLabel) -> Self {
        ObjectState {
            label,
            note: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub name: String,
    pub pose: Pose,
    /// Axis-aligned full extents `[dx, dy, dz]` in meters.
    pub bbox: Vec3,
    pub state: ObjectState,
    pub semantics: SemanticLayers,
}

impl SceneObject {
    pub fn centroid(&self) -> Vec3 {
        self.pose.position
    }

    fn corners(&self) -> [Vec3; 8] {
        let c = self.centroid();
        let h = scale(self.bbox, 0.5);
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *corner = [c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2]];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub scene_id: String,
    #[serde(default)]
    pub timestamp: f64,
    pub viewpoint: Pose,
    pub objects: Vec<SceneObject>,
}

impl SceneSnapshot {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Checks every snapshot invariant; used by [`load_scene`] and by callers
    /// that build snapshots in code.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.scene_id.trim().is_empty() {
            return Err(invalid("scene_id", "must be non-empty"));
        }
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(invalid("timestamp", "must be finite and non-negative"));
        }
        self.viewpoint.check("viewpoint")?;
        let mut seen = HashSet::new();
        for (i, obj) in self.objects.iter().enumerate() {
            let path = format!("objects[{i}]");
            if obj.id.trim().is_empty() {
                return Err(invalid(format!("{path}.id"), "must be non-empty"));
            }
            if !seen.insert(obj.id.as_str()) {
                return Err(SceneError::DuplicateId(obj.id.clone()));
            }
            obj.pose.check(&format!("{path}.pose"))?;
            if obj.bbox.iter().any(|e| !e.is_finite() || *e <= 0.0) {
                return Err(invalid(format!("{path}.bbox"), "extents must be strictly positive"));
            }
            if let StateLabel::Custom(tag) = &obj.state.label {
                if tag.trim().is_empty() {
                    return Err(invalid(format!("{path}.state.label"), "custom tag must be non-empty"));
                }
            }
            let sem = &obj.semantics;
            if sem.physical.trim().is_empty() {
                return Err(invalid(format!("{path}.semantics.physical"), "must be non-empty"));
            }
            if sem.functional.trim().is_empty() {
                return Err(invalid(format!("{path}.semantics.functional"), "must be non-empty"));
            }
            if let Some(m) = &sem.metaphorical {
                if !(0.0..=1.0).contains(&m.weight) {
                    return Err(invalid(
                        format!("{path}.semantics.metaphorical.weight"),
                        "must lie in [0, 1]",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a scene document. Object order is preserved.
pub fn load_scene(document: &str) -> Result<SceneSnapshot, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let snapshot: SceneSnapshot = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        SceneError::Parse {
            path: e.path().to_string(),
            message: format!("{inner} (line {}, column {})", inner.line(), inner.column()),
        }
    })?;
    snapshot.validate()?;
    Ok(snapshot)
}

pub fn serialize_scene(snapshot: &SceneSnapshot) -> String {
    let mut out = serde_json::to_string_pretty(snapshot).expect("scene serializes");
    out.push('\n');
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn clip(&self, other: &Rect) -> Option<Rect> {
        let r = Rect {
            x0: self.x0.max(other.x0),
            x1: self.x1.min(other.x1),
            y0: self.y0.max(other.y0),
            y1: self.y1.min(other.y1),
        };
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }
}

/// Orthographic frame on the plane through the target centroid,
/// perpendicular to the view ray.
struct ViewFrame {
    origin: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    depth: f64,
}

impl ViewFrame {
    fn new(target: &SceneObject, viewpoint: &Pose) -> Result<Self, SceneError> {
        let origin = target.centroid();
        let ray = sub(origin, viewpoint.position);
        let depth = norm(ray);
        if depth < DEGENERATE_DISTANCE {
            return Err(SceneError::DegenerateProjection(target.id.clone()));
        }
        let forward = scale(ray, 1.0 / depth);
        let mut right = cross(forward, [0.0, 1.0, 0.0]);
        if norm(right) < 1e-6 {
            // looking straight up or down
            right = cross(forward, [0.0, 0.0, -1.0]);
        }
        let right = scale(right, 1.0 / norm(right));
        let up = cross(right, forward);
        Ok(ViewFrame {
            origin,
            forward,
            right,
            up,
            depth,
        })
    }

    /// Depth of a point along the view ray, measured from the viewpoint.
    fn depth_of(&self, p: Vec3) -> f64 {
        self.depth + dot(sub(p, self.origin), self.forward)
    }

    fn project(&self, obj: &SceneObject) -> Rect {
        let mut r = Rect {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for c in obj.corners() {
            let rel = sub(c, self.origin);
            let (x, y) = (dot(rel, self.right), dot(rel, self.up));
            r.x0 = r.x0.min(x);
            r.x1 = r.x1.max(x);
            r.y0 = r.y0.min(y);
            r.y1 = r.y1.max(y);
        }
        r
    }
}

/// Area of the union of rectangles, by coordinate compression.
fn union_area(rects: &[Rect]) -> f64 {
    if rects.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x0, r.x1]).collect();
    let mut ys: Vec<f64> = rects.iter().flat_map(|r| [r.y0, r.y1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        let mx = 0.5 * (xw[0] + xw[1]);
        for yw in ys.windows(2) {
            let my = 0.5 * (yw[0] + yw[1]);
            if rects
                .iter()
                .any(|r| r.x0 <= mx && mx <= r.x1 && r.y0 <= my && my <= r.y1)
            {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Fraction of the target's projected bounding rectangle covered by the
/// projected rectangles of occluders lying between the viewpoint and the
/// target. Projection is orthographic along the view ray onto the plane
/// through the target centroid.
///
/// Occluders whose centroid is not strictly between the viewpoint and the
/// target plane do not contribute.
pub fn occlusion_fraction(
    target: &SceneObject,
    viewpoint: &Pose,
    occluders: &[SceneObject],
) -> Result<f64, SceneError> {
    if occluders.iter().any(|o| o.id == target.id) {
        return Err(SceneError::TargetInOccluders(target.id.clone()));
    }
    let frame = ViewFrame::new(target, viewpoint)?;
    let target_rect = frame.project(target);
    let covering: Vec<Rect> = occluders
        .iter()
        .filter(|o| {
            let d = frame.depth_of(o.centroid());
            d > 0.0 && d < frame.depth
        })
        .filter_map(|o| frame.project(o).clip(&target_rect))
        .collect();
    let total = target_rect.area();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((union_area(&covering) / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OcclusionTier {
    T30,
    T60,
    T90,
}

impl OcclusionTier {
    pub const ALL: [OcclusionTier; 3] = [OcclusionTier::T30, OcclusionTier::T60, OcclusionTier::T90];

    pub fn fraction(self) -> f64 {
        match self {
            OcclusionTier::T30 => 0.30,
            OcclusionTier::T60 => 0.60,
            OcclusionTier::T90 => 0.90,
        }
    }
}

/// Builds a synthetic occluder that covers the tier's fraction of the
/// target's projected rectangle.
///
/// The occluder is congruent with the target, placed halfway along the view
/// ray and slid sideways so that exactly the left `fraction` of the target's
/// projection is covered. Orthographic projection of an axis-aligned box is
/// translation-equivariant, so the cover is exact up to rounding.
pub fn make_occlusion_tier(
    target: &SceneObject,
    viewpoint: &Pose,
    tier: OcclusionTier,
) -> Result<Vec<SceneObject>, SceneError> {
    let frame = ViewFrame::new(target, viewpoint)?;
    let rect = frame.project(target);
    let width = rect.x1 - rect.x0;
    let f = tier.fraction();
    // rectangle centered at 0: slide left by (1 - f) * width
    let shift = -(1.0 - f) * width;
    let center = add(
        sub(target.centroid(), scale(frame.forward, 0.5 * frame.depth)),
        scale(frame.right, shift),
    );
    Ok(vec![SceneObject {
        id: format!("{}__occluder_{:?}", target.id, tier).to_lowercase(),
        name: format!("occluder for {}", target.name),
        pose: Pose::at(center),
        bbox: target.bbox,
        state: ObjectState::new(StateLabel::Custom("synthetic".into())),
        semantics: SemanticLayers {
            physical: "synthetic occluding panel".into(),
            functional: "blocks line of sight".into(),
            metaphorical: None,
        },
    }])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum StateChange {
    Changed {
        id: String,
        old: StateLabel,
        new: StateLabel,
        displacement: f64,
    },
    Added {
        id: String,
        state: StateLabel,
    },
    Removed {
        id: String,
        state: StateLabel,
    },
}

impl StateChange {
    pub fn id(&self) -> &str {
        match self {
            StateChange::Changed { id, .. }
            | StateChange::Added { id, .. }
            | StateChange::Removed { id, .. } => id,
        }
    }
}

/// Objects whose label changed or whose centroid moved more than
/// [`MOVE_THRESHOLD_M`], in `before` order, followed by additions in
/// `after` order.
pub fn diff_states(
    before: &SceneSnapshot,
    after: &SceneSnapshot,
) -> Result<Vec<StateChange>, SceneError> {
    if before.scene_id != after.scene_id {
        return Err(SceneError::SceneMismatch {
            before: before.scene_id.clone(),
            after: after.scene_id.clone(),
        });
    }
    let after_by_id: HashMap<&str, &SceneObject> =
        after.objects.iter().map(|o| (o.id.as_str(), o)).collect();
    let before_ids: HashSet<&str> = before.objects.iter().map(|o| o.id.as_str()).collect();

    let mut changes = Vec::new();
    for old in &before.objects {
        match after_by_id.get(old.id.as_str()) {
            None => changes.push(StateChange::Removed {
                id: old.id.clone(),
                state: old.state.label.clone(),
            }),
            Some(new) => {
                let displacement = distance(old.centroid(), new.centroid());
                if old.state.label != new.state.label || displacement > MOVE_THRESHOLD_M {
                    changes.push(StateChange::Changed {
                        id: old.id.clone(),
                        old: old.state.label.clone(),
                        new: new.state.label.clone(),
                        displacement,
                    });
                }
            }
        }
    }
    for new in &after.objects {
        if !before_ids.contains(new.id.as_str()) {
            changes.push(StateChange::Added {
                id: new.id.clone(),
                state: new.state.label.clone(),
            });
        }
    }
    Ok(changes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn block(id: &str, position: Vec3, bbox: Vec3) -> SceneObject {
        SceneObject {
            id: id.into(),
            name: id.replace('_', " "),
            pose: Pose::at(position),
            bbox,
            state: ObjectState::new(StateLabel::Intact),
            semantics: SemanticLayers {
                physical: "wood".into(),
                functional: "holds things".into(),
                metaphorical: None,
            },
        }
    }

    const MINIMAL: &str = r#"{
        "scene_id": "mini",
        "viewpoint": {"position": [0, 0, 0], "orientation": [1, 0, 0, 0]},
        "objects": [{
            "id": "door", "name": "door",
            "pose": {"position": [0, 1, -3], "orientation": [1, 0, 0, 0]},
            "bbox": [0.9, 2.0, 0.05],
            "state": {"label": "intact", "note": ""},
            "semantics": {"physical": "painted wood", "functional": "passage",
                          "metaphorical": {"text": "threshold of change"}}
        }]
    }"#;

    #[test]
    fn minimal_document_loads() {
        let s = load_scene(MINIMAL).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert_eq!(s.viewpoint.position, [0.0, 0.0, 0.0]);
        let m = s.objects[0].semantics.metaphorical.as_ref().unwrap();
        assert_eq!(m.weight, DEFAULT_METAPHOR_WEIGHT);
    }

    #[test]
    fn duplicate_id_is_named() {
        let mut s = load_scene(MINIMAL).unwrap();
        s.objects.push(s.objects[0].clone());
        let doc = serialize_scene(&s);
        match load_scene(&doc) {
            Err(SceneError::DuplicateId(id)) => assert_eq!(id, "door"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_field_path() {
        let doc = MINIMAL.replace(r#""bbox": [0.9, 2.0, 0.05],"#, "");
        let err = load_scene(&doc).unwrap_err();
        match err {
            SceneError::Parse { path, message } => {
                assert_eq!(path, "objects[0]");
                assert!(message.contains("bbox"), "{message}");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_unit_quaternion_and_bad_bbox() {
        let doc = MINIMAL.replace(
            r#""orientation": [1, 0, 0, 0]},
            "bbox""#,
            r#""orientation": [2, 0, 0, 0]},
            "bbox""#,
        );
        assert!(matches!(load_scene(&doc), Err(SceneError::Invalid { .. })));
        let doc = MINIMAL.replace("[0.9, 2.0, 0.05]", "[0.9, 0.0, 0.05]");
        assert!(matches!(load_scene(&doc), Err(SceneError::Invalid { .. })));
    }

    #[test]
    fn custom_state_label_roundtrips() {
        let doc = MINIMAL.replace(r#""label": "intact""#, r#""label": "ajar""#);
        let s = load_scene(&doc).unwrap();
        assert_eq!(s.objects[0].state.label, StateLabel::Custom("ajar".into()));
        assert_eq!(load_scene(&serialize_scene(&s)).unwrap(), s);
    }

    #[test]
    fn no_occluders_means_zero() {
        let t = block("t", [0.0, 0.0, -5.0], [1.0, 1.0, 1.0]);
        assert_eq!(occlusion_fraction(&t, &Pose::IDENTITY, &[]).unwrap(), 0.0);
    }

    #[test]
    fn congruent_occluder_in_front_covers_fully() {
        let t = block("t", [0.0, 0.0, -5.0], [1.0, 1.0, 1.0]);
        let o = block("o", [0.0, 0.0, -2.5], [1.0, 1.0, 1.0]);
        assert_eq!(occlusion_fraction(&t, &Pose::IDENTITY, &[o]).unwrap(), 1.0);
    }

    #[test]
    fn left_half_cover_is_half() {
        // Looking down -z the right axis is +x. Target spans x in [-1, 1],
        // y in [-0.5, 0.5]; occluder spans x in [-1, 0] over the full height.
        // Hand-computed: (1 * 1) / (2 * 1) = 0.5.
        let t = block("t", [0.0, 0.0, -5.0], [2.0, 1.0, 0.2]);
        let o = block("o", [-0.5, 0.0, -3.0], [1.0, 1.0, 0.2]);
        let f = occlusion_fraction(&t, &Pose::IDENTITY, &[o]).unwrap();
        assert!((f - 0.5).abs() < 1e-12, "{f}");
    }

    #[test]
    fn occluder_behind_target_does_not_count() {
        let t = block("t", [0.0, 0.0, -5.0], [1.0, 1.0, 1.0]);
        let o = block("o", [0.0, 0.0, -8.0], [3.0, 3.0, 1.0]);
        assert_eq!(occlusion_fraction(&t, &Pose::IDENTITY, &[o]).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_occluders_are_not_double_counted() {
        let t = block("t", [0.0, 0.0, -5.0], [2.0, 1.0, 0.2]);
        let a = block("a", [-0.5, 0.0, -3.0], [1.0, 1.0, 0.2]);
        let b = block("b", [-0.5, 0.0, -2.0], [1.0, 1.0, 0.2]);
        let f = occlusion_fraction(&t, &Pose::IDENTITY, &[a, b]).unwrap();
        assert!((f - 0.5).abs() < 1e-12, "{f}");
    }

    #[test]
    fn degenerate_viewpoint_errors() {
        let t = block("t", [1.0, 2.0, 3.0], [1.0, 1.0, 1.0]);
        let v = Pose::at([1.0, 2.0, 3.0]);
        assert!(matches!(
            occlusion_fraction(&t, &v, &[]),
            Err(SceneError::DegenerateProjection(_))
        ));
    }

    #[test]
    fn vertical_view_ray_is_supported() {
        let t = block("t", [0.0, -4.0, 0.0], [1.0, 1.0, 1.0]);
        for tier in OcclusionTier::ALL {
            let occ = make_occlusion_tier(&t, &Pose::IDENTITY, tier).unwrap();
            let f = occlusion_fraction(&t, &Pose::IDENTITY, &occ).unwrap();
            assert!((f - tier.fraction()).abs() <= 0.02, "{tier:?}: {f}");
        }
    }

    #[test]
    fn tiers_hit_their_targets() {
        let t = block("t", [0.3, 0.8, -4.0], [0.7, 1.2, 0.4]);
        let v = Pose::at([1.0, 1.6, 0.5]);
        for tier in OcclusionTier::ALL {
            let occ = make_occlusion_tier(&t, &v, tier).unwrap();
            let f = occlusion_fraction(&t, &v, &occ).unwrap();
            assert!((f - tier.fraction()).abs() <= 0.02, "{tier:?}: {f}");
        }
    }

    #[test]
    fn identical_snapshots_have_no_diff() {
        let s = load_scene(MINIMAL).unwrap();
        assert!(diff_states(&s, &s).unwrap().is_empty());
    }

    #[test]
    fn moved_chair_reports_displacement() {
        let chair = block("chair", [0.0, 0.0, 0.0], [0.5, 1.0, 0.5]);
        let before = SceneSnapshot {
            scene_id: "s".into(),
            timestamp: 0.0,
            viewpoint: Pose::IDENTITY,
            objects: vec![chair.clone()],
        };
        let mut after = before.clone();
        after.objects[0].pose.position = [0.6, 0.0, 0.8];
        after.objects[0].state.label = StateLabel::Displaced;
        let changes = diff_states(&before, &after).unwrap();
        assert_eq!(changes.len(), 1);
        match &changes[0] {
            StateChange::Changed {
                old,
                new,
                displacement,
                ..
            } => {
                assert_eq!(*old, StateLabel::Intact);
                assert_eq!(*new, StateLabel::Displaced);
                // sqrt(0.36 + 0.64)
                assert!((displacement - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jitter_below_threshold_is_ignored() {
        let chair = block("chair", [0.0, 0.0, 0.0], [0.5, 1.0, 0.5]);
        let before = SceneSnapshot {
            scene_id: "s".into(),
            timestamp: 0.0,
            viewpoint: Pose::IDENTITY,
            objects: vec![chair],
        };
        let mut after = before.clone();
        after.objects[0].pose.position = [0.04, 0.0, 0.0];
        assert!(diff_states(&before, &after).unwrap().is_empty());
    }

    #[test]
    fn added_and_removed_objects() {
        let before = SceneSnapshot {
            scene_id: "s".into(),
            timestamp: 0.0,
            viewpoint: Pose::IDENTITY,
            objects: vec![block("a", [0.0; 3], [1.0; 3])],
        };
        let mut after = before.clone();
        after.objects = vec![block("b", [0.0; 3], [1.0; 3])];
        let changes = diff_states(&before, &after).unwrap();
        assert!(matches!(&changes[0], StateChange::Removed { id, .. } if id == "a"));
        assert!(matches!(&changes[1], StateChange::Added { id, .. } if id == "b"));
    }

    #[test]
    fn scene_mismatch_errors() {
        let a = load_scene(MINIMAL).unwrap();
        let mut b = a.clone();
        b.scene_id = "other".into();
        assert!(matches!(diff_states(&a, &b), Err(SceneError::SceneMismatch { .. })));
    }
}

#[cfg(test)]
mod proptests {
    use super::tests::block;
    use super::*;
    use proptest::prelude::*;

    fn arb_block(id: &'static str) -> impl Strategy<Value = SceneObject> {
        (
            (-3.0..3.0f64, -3.0..3.0f64, -9.0..-1.0f64),
            (0.1..2.0f64, 0.1..2.0f64, 0.1..2.0f64),
        )
            .prop_map(move |(p, b)| block(id, [p.0, p.1, p.2], [b.0, b.1, b.2]))
    }

    proptest! {
        #[test]
        fn adding_occluders_never_reduces_cover(
            target in arb_block("t"),
            a in arb_block("a"),
            b in arb_block("b"),
            c in arb_block("c"),
        ) {
            let v = Pose::at([0.2, 0.5, 2.0]);
            let base = occlusion_fraction(&target, &v, &[a.clone(), b.clone()]).unwrap();
            let more = occlusion_fraction(&target, &v, &[a, b, c]).unwrap();
            prop_assert!(more + 1e-12 >= base);
            prop_assert!((0.0..=1.0).contains(&more));
        }

        #[test]
        fn scene_roundtrip(objs in proptest::collection::vec(arb_block("x"), 1..6)) {
            let objects: Vec<SceneObject> = objs
                .into_iter()
                .enumerate()
                .map(|(i, mut o)| { o.id = format!("obj_{i}"); o })
                .collect();
            let s = SceneSnapshot {
                scene_id: "prop".into(),
                timestamp: 1.5,
                viewpoint: Pose::IDENTITY,
                objects,
            };
            let back = load_scene(&serialize_scene(&s)).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
