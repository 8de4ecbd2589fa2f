//! Evaluation metrics across spatial, temporal, adaptive and metaphorical
//! dimensions, and the table-shaped report built from them.
//!
//! Conventions surfaced in every report legend:
//! - ratings become percentages as `mean / scale_max * 100`;
//! - NBI scores are break severity, so lower means fewer narrative breaks;
//! - dynamic tolerance (DT) is the percentage of fragments sharing no tag
//!   with the theme.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::scene::{distance, OcclusionTier, Vec3};

pub const NBI_DIMENSION: &str = "NBI";
pub const NBI_SCALE_MAX: f64 = 10.0;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub const REPORT_LEGEND: [&str; 4] = [
    "ratings -> percent: mean / scale_max * 100",
    "NBI: mean break-severity score on 1-10, lower = fewer narrative breaks",
    "DT: percent of fragments whose tags share nothing with the theme",
    "'-' marks a metric that was not measured",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0}: no input samples")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("response at {response} precedes event at {event}")]
    ResponseBeforeEvent { event: f64, response: f64 },
    #[error("AP under normal lighting must be positive, got {0}")]
    NonPositiveNormal(f64),
    #[error("AP under extreme lighting must lie in [0, AP normal], got {extreme} vs {normal}")]
    ExtremeOutOfRange { extreme: f64, normal: f64 },
    #[error("rating {value} outside [1, {scale_max}] (rater `{rater}`, dimension `{dimension}`)")]
    RatingOutOfScale {
        rater: String,
        dimension: String,
        value: f64,
        scale_max: f64,
    },
    #[error("expected dimension `{expected}`, found `{found}`")]
    WrongDimension { expected: String, found: String },
    #[error("samples for `{0}` mix rating scales")]
    MixedScales(String),
    #[error("theme tag set is empty")]
    EmptyTheme,
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("paired differences have zero variance; t statistic undefined")]
    DegenerateVariance,
    #[error("report needs at least one metric input")]
    NoInputs,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionPair {
    #[serde(rename = "true")]
    pub truth: Vec3,
    pub detected: Vec3,
}

/// Coordinate error: mean Euclidean distance between true and detected
/// positions, in meters.
pub fn coordinate_error(pairs: &[PositionPair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("coordinate error"));
    }
    if pairs
        .iter()
        .any(|p| p.truth.iter().chain(&p.detected).any(|c| !c.is_finite()))
    {
        return Err(MetricError::NonFinite("position pairs"));
    }
    Ok(mean(pairs.iter().map(|p| distance(p.truth, p.detected))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionTrial {
    pub tier: OcclusionTier,
    pub correct: bool,
}

/// Occlusion recognition rate in percent, one decimal.
pub fn occlusion_rate(trials: &[OcclusionTrial]) -> Result<f64, MetricError> {
    if trials.is_empty() {
        return Err(MetricError::Empty("occlusion rate"));
    }
    let correct = trials.iter().filter(|t| t.correct).count() as f64;
    Ok(round1(correct / trials.len() as f64 * 100.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub event: f64,
    pub response: f64,
}

/// Mean of `response - event`, in seconds.
pub fn latency(trace: &[LatencySample]) -> Result<f64, MetricError> {
    if trace.is_empty() {
        return Err(MetricError::Empty("latency"));
    }
    for s in trace {
        if !s.event.is_finite() || !s.response.is_finite() {
            return Err(MetricError::NonFinite("latency trace"));
        }
        if s.response < s.event {
            return Err(MetricError::ResponseBeforeEvent {
                event: s.event,
                response: s.response,
            });
        }
    }
    Ok(mean(trace.iter().map(|s| s.response - s.event)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSample {
    pub rater: String,
    /// Metric tag, optionally qualified by a subject: `MA@Door`,
    /// `Interesting@S2`, `NBI`.
    pub dimension: String,
    pub value: f64,
    pub scale_max: f64,
}

impl RatingSample {
    pub fn new(rater: impl Into<String>, dimension: impl Into<String>, value: f64, scale_max: f64) -> Self {
        RatingSample {
            rater: rater.into(),
            dimension: dimension.into(),
            value,
            scale_max,
        }
    }

    /// `(metric, subject)` split of the dimension tag.
    pub fn metric_and_subject(&self) -> (&str, Option<&str>) {
        match self.dimension.split_once('@') {
            Some((m, s)) => (m, Some(s)),
            None => (self.dimension.as_str(), None),
        }
    }

    pub fn check(&self) -> Result<(), MetricError> {
        if !self.value.is_finite() || !self.scale_max.is_finite() {
            return Err(MetricError::NonFinite("rating"));
        }
        if self.value < 1.0 || self.value > self.scale_max {
            return Err(MetricError::RatingOutOfScale {
                rater: self.rater.clone(),
                dimension: self.dimension.clone(),
                value: self.value,
                scale_max: self.scale_max,
            });
        }
        Ok(())
    }
}

/// Narrative break index: mean of 1-10 scores.
pub fn narrative_break_index(scores: &[RatingSample]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty("narrative break index"));
    }
    for s in scores {
        if s.metric_and_subject().0 != NBI_DIMENSION {
            return Err(MetricError::WrongDimension {
                expected: NBI_DIMENSION.into(),
                found: s.dimension.clone(),
            });
        }
        if s.scale_max != NBI_SCALE_MAX {
            return Err(MetricError::MixedScales(s.dimension.clone()));
        }
        s.check()?;
    }
    Ok(mean(scores.iter().map(|s| s.value)))
}

/// Lighting robustness: `extreme / normal * 100`.
///
/// AP is any non-negative accuracy-like score. Extreme-condition scores above
/// the normal baseline are rejected so the result stays a percentage.
pub fn lighting_robustness(ap_extreme: f64, ap_normal: f64) -> Result<f64, MetricError> {
    if !ap_extreme.is_finite() || !ap_normal.is_finite() {
        return Err(MetricError::NonFinite("lighting scores"));
    }
    if ap_normal <= 0.0 {
        return Err(MetricError::NonPositiveNormal(ap_normal));
    }
    if ap_extreme < 0.0 || ap_extreme > ap_normal {
        return Err(MetricError::ExtremeOutOfRange {
            extreme: ap_extreme,
            normal: ap_normal,
        });
    }
    Ok(ap_extreme / ap_normal * 100.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FragmentTags {
    #[serde(default)]
    pub topic_tags: Vec<String>,
    #[serde(default)]
    pub content_tags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftInput {
    pub theme: Vec<String>,
    pub fragments: Vec<FragmentTags>,
}

/// Dynamic tolerance: percent of fragments (one decimal) whose topic and
/// content tags share nothing with the theme.
pub fn dynamic_tolerance(fragments: &[FragmentTags], theme: &[String]) -> Result<f64, MetricError> {
    if fragments.is_empty() {
        return Err(MetricError::Empty("dynamic tolerance"));
    }
    let theme: BTreeSet<&str> = theme.iter().map(String::as_str).collect();
    if theme.is_empty() {
        return Err(MetricError::EmptyTheme);
    }
    let drifting = fragments
        .iter()
        .filter(|f| {
            !f.topic_tags
                .iter()
                .chain(&f.content_tags)
                .any(|t| theme.contains(t.as_str()))
        })
        .count();
    Ok(round1(drifting as f64 / fragments.len() as f64 * 100.0))
}

/// Mean rating of one dimension as a percent of its scale, one decimal.
/// Samples tagged with other dimensions are ignored.
pub fn aggregate_ratings(samples: &[RatingSample], dimension: &str) -> Result<f64, MetricError> {
    let picked: Vec<&RatingSample> = samples.iter().filter(|s| s.dimension == dimension).collect();
    if picked.is_empty() {
        return Err(MetricError::Empty("rating aggregate"));
    }
    let scale = picked[0].scale_max;
    for s in &picked {
        if s.scale_max != scale {
            return Err(MetricError::MixedScales(dimension.to_string()));
        }
        s.check()?;
    }
    Ok(round1(mean(picked.iter().map(|s| s.value)) / scale * 100.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_difference: f64,
}

impl TTestResult {
    pub fn significant(&self) -> bool {
        self.p < SIGNIFICANCE_LEVEL
    }
}

/// Two-tailed paired-sample t-test with `n - 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFewPairs(a.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite("t-test samples"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let m = mean(diffs.iter().copied());
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= f64::EPSILON * m.abs().max(1.0) {
        return Err(MetricError::DegenerateVariance);
    }
    let t = m / (var / n).sqrt();
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult {
        t,
        df,
        p,
        mean_difference: m,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LightingInput {
    pub ap_extreme: f64,
    pub ap_normal: f64,
}

/// Raw inputs for one scenario row. Absent inputs become absent cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInputs {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<PositionPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<Vec<OcclusionTrial>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<LatencySample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbi: Option<Vec<RatingSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<LightingInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftInput>,
}

impl ScenarioInputs {
    fn is_empty(&self) -> bool {
        self.positions.is_none()
            && self.occlusion.is_none()
            && self.latency.is_none()
            && self.nbi.is_none()
            && self.lighting.is_none()
            && self.drift.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    #[serde(default)]
    pub scenarios: Vec<ScenarioInputs>,
    /// `MA@<object>`, `SEF@<object>`, `MD@<object>` ratings.
    #[serde(default)]
    pub metaphor_ratings: Vec<RatingSample>,
    /// `<dimension>@<story>` ratings, paired across stories by rater.
    #[serde(default)]
    pub story_ratings: Vec<RatingSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub ce: Option<f64>,
    pub or_pct: Option<f64>,
    pub latency_s: Option<f64>,
    pub nbi: Option<f64>,
    pub lr_pct: Option<f64>,
    pub dt_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaphorRow {
    pub object: String,
    pub ma_pct: Option<f64>,
    pub sef_pct: Option<f64>,
    pub md_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub n: usize,
    /// Absent when the pair could not be tested; `note` says why.
    pub p: Option<f64>,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryDimensionRow {
    pub dimension: String,
    /// Percent per story, keyed by story tag.
    pub percent: BTreeMap<String, f64>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub legend: Vec<String>,
    pub scenarios: Vec<ScenarioRow>,
    pub metaphor: Vec<MetaphorRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metaphor_average: Option<MetaphorRow>,
    pub stories: Vec<StoryDimensionRow>,
}

fn opt<T, U>(input: &Option<T>, f: impl FnOnce(&T) -> Result<U, MetricError>) -> Result<Option<U>, MetricError> {
    input.as_ref().map(f).transpose()
}

fn scenario_row(s: &ScenarioInputs) -> Result<ScenarioRow, MetricError> {
    Ok(ScenarioRow {
        scenario: s.name.clone(),
        ce: opt(&s.positions, |p| coordinate_error(p))?,
        or_pct: opt(&s.occlusion, |t| occlusion_rate(t))?,
        latency_s: opt(&s.latency, |t| latency(t))?,
        nbi: opt(&s.nbi, |n| narrative_break_index(n))?,
        lr_pct: opt(&s.lighting, |l| lighting_robustness(l.ap_extreme, l.ap_normal))?,
        dt_pct: opt(&s.drift, |d| dynamic_tolerance(&d.fragments, &d.theme))?,
    })
}

fn metaphor_rows(samples: &[RatingSample]) -> Result<(Vec<MetaphorRow>, Option<MetaphorRow>), MetricError> {
    let mut objects: Vec<&str> = Vec::new();
    for s in samples {
        if let (_, Some(obj)) = s.metric_and_subject() {
            if !objects.contains(&obj) {
                objects.push(obj);
            }
        }
    }
    let cell = |metric: &str, obj: &str| -> Result<Option<f64>, MetricError> {
        let dim = format!("{metric}@{obj}");
        if samples.iter().any(|s| s.dimension == dim) {
            aggregate_ratings(samples, &dim).map(Some)
        } else {
            Ok(None)
        }
    };
    let mut rows = Vec::new();
    for obj in objects {
        rows.push(MetaphorRow {
            object: obj.to_string(),
            ma_pct: cell("MA", obj)?,
            sef_pct: cell("SEF", obj)?,
            md_pct: cell("MD", obj)?,
        });
    }
    if rows.is_empty() {
        return Ok((rows, None));
    }
    let avg = |get: fn(&MetaphorRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(get).collect();
        (!v.is_empty()).then(|| round1(v.iter().sum::<f64>() / v.len() as f64))
    };
    let average = MetaphorRow {
        object: "Average".into(),
        ma_pct: avg(|r| r.ma_pct),
        sef_pct: avg(|r| r.sef_pct),
        md_pct: avg(|r| r.md_pct),
    };
    Ok((rows, Some(average)))
}

fn story_rows(samples: &[RatingSample]) -> Result<Vec<StoryDimensionRow>, MetricError> {
    // dimension -> story -> rater -> value
    let mut grid: BTreeMap<&str, BTreeMap<&str, BTreeMap<&str, f64>>> = BTreeMap::new();
    let mut dim_order: Vec<&str> = Vec::new();
    for s in samples {
        s.check()?;
        let (dim, story) = s.metric_and_subject();
        let story = story.unwrap_or("");
        if !dim_order.contains(&dim) {
            dim_order.push(dim);
        }
        grid.entry(dim)
            .or_default()
            .entry(story)
            .or_default()
            .insert(s.rater.as_str(), s.value);
    }
    let mut rows = Vec::new();
    for dim in dim_order {
        let stories = &grid[dim];
        let mut percent = BTreeMap::new();
        for story in stories.keys() {
            percent.insert(
                story.to_string(),
                aggregate_ratings(samples, &format!("{dim}@{story}"))?,
            );
        }
        let tags: Vec<&str> = stories.keys().copied().collect();
        let mut pairwise = Vec::new();
        for i in 0..tags.len() {
            for j in i + 1..tags.len() {
                let (ra, rb) = (&stories[tags[i]], &stories[tags[j]]);
                let common: Vec<&str> = ra.keys().filter(|r| rb.contains_key(*r)).copied().collect();
                let a: Vec<f64> = common.iter().map(|r| ra[r]).collect();
                let b: Vec<f64> = common.iter().map(|r| rb[r]).collect();
                let (p, note) = match paired_ttest(&a, &b) {
                    Ok(r) => (Some(r.p), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                pairwise.push(PairwiseTest {
                    a: tags[i].to_string(),
                    b: tags[j].to_string(),
                    n: common.len(),
                    significant: p.is_some_and(|p| p < SIGNIFICANCE_LEVEL),
                    p,
                    note,
                });
            }
        }
        rows.push(StoryDimensionRow {
            dimension: dim.to_string(),
            percent,
            pairwise,
        });
    }
    Ok(rows)
}

/// Builds the report; each cell is the output of the standalone metric.
pub fn build_report(inputs: &ReportInputs) -> Result<MetricReport, MetricError> {
    let any_scenario = inputs.scenarios.iter().any(|s| !s.is_empty());
    if !any_scenario && inputs.metaphor_ratings.is_empty() && inputs.story_ratings.is_empty() {
        return Err(MetricError::NoInputs);
    }
    let scenarios = inputs
        .scenarios
        .iter()
        .filter(|s| !s.is_empty())
        .map(scenario_row)
        .collect::<Result<Vec<_>, _>>()?;
    let (metaphor, metaphor_average) = metaphor_rows(&inputs.metaphor_ratings)?;
    Ok(MetricReport {
        legend: REPORT_LEGEND.iter().map(|s| s.to_string()).collect(),
        scenarios,
        metaphor,
        metaphor_average,
        stories: story_rows(&inputs.story_ratings)?,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in rows {
        line(out, r);
    }
}

impl MetricReport {
    /// Aligned-column text rendering of all non-empty tables.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let s = |x: &str| x.to_string();
        if !self.scenarios.is_empty() {
            let _ = writeln!(out, "Cross-scenario evaluation");
            let rows: Vec<Vec<String>> = self
                .scenarios
                .iter()
                .map(|r| {
                    vec![
                        r.scenario.clone(),
                        r.ce.map_or_else(|| "-".into(), |x| format!("{x:.3}")),
                        cell(r.or_pct),
                        cell(r.latency_s),
                        cell(r.nbi),
                        cell(r.lr_pct),
                        cell(r.dt_pct),
                    ]
                })
                .collect();
            table(
                &mut out,
                &[s("Scenario"), s("CE(m)"), s("OR(%)"), s("Latency(s)"), s("NBI(1-10)"), s("LR(%)"), s("DT(%)")],
                &rows,
            );
            out.push('\n');
        }
        if !self.metaphor.is_empty() {
            let _ = writeln!(out, "Metaphorical evaluation");
            let rows: Vec<Vec<String>> = self
                .metaphor
                .iter()
                .chain(&self.metaphor_average)
                .map(|r| vec![r.object.clone(), cell(r.ma_pct), cell(r.sef_pct), cell(r.md_pct)])
                .collect();
            table(&mut out, &[s("Object"), s("MA(%)"), s("SEF(%)"), s("MD(%)")], &rows);
            out.push('\n');
        }
        if !self.stories.is_empty() {
            let tags: BTreeSet<&String> = self.stories.iter().flat_map(|r| r.percent.keys()).collect();
            let _ = writeln!(out, "Story ratings (%)");
            let mut header = vec![s("Dimension")];
            header.extend(tags.iter().map(|t| t.to_string()));
            let rows: Vec<Vec<String>> = self
                .stories
                .iter()
                .map(|r| {
                    let mut row = vec![r.dimension.clone()];
                    row.extend(tags.iter().map(|t| cell(r.percent.get(*t).copied())));
                    row
                })
                .collect();
            table(&mut out, &header, &rows);
            out.push('\n');

            let pairs: Vec<(String, String)> = self
                .stories
                .iter()
                .flat_map(|r| r.pairwise.iter().map(|p| (p.a.clone(), p.b.clone())))
                .fold(Vec::new(), |mut acc, p| {
                    if !acc.contains(&p) {
                        acc.push(p);
                    }
                    acc
                });
            let _ = writeln!(out, "Pairwise paired t-tests (p, * = p < {SIGNIFICANCE_LEVEL})");
            let mut header = vec![s("Dimension")];
            header.extend(pairs.iter().map(|(a, b)| format!("{a} vs {b}")));
            let rows: Vec<Vec<String>> = self
                .stories
                .iter()
                .map(|r| {
                    let mut row = vec![r.dimension.clone()];
                    for (a, b) in &pairs {
                        let p = r.pairwise.iter().find(|p| &p.a == a && &p.b == b);
                        row.push(match p.and_then(|p| p.p.map(|v| (v, p.significant))) {
                            Some((v, true)) => format!("{v:.4}*"),
                            Some((v, false)) => format!("{v:.4}"),
                            None => "-".into(),
                        });
                    }
                    row
                })
                .collect();
            table(&mut out, &header, &rows);
            out.push('\n');
        }
        let _ = writeln!(out, "Legend");
        for l in &self.legend {
            let _ = writeln!(out, "  {l}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: Vec3, d: Vec3) -> PositionPair {
        PositionPair { truth: t, detected: d }
    }

    #[test]
    fn coordinate_error_examples() {
        assert_eq!(coordinate_error(&[pair([1.0; 3], [1.0; 3])]).unwrap(), 0.0);
        let pairs = [pair([0.0; 3], [1.0, 0.0, 0.0]), pair([0.0; 3], [0.0, 2.0, 0.0])];
        assert_eq!(coordinate_error(&pairs).unwrap(), 1.5);
        let shifted: Vec<_> = pairs
            .iter()
            .map(|p| pair(crate::scene::add(p.truth, [5.0; 3]), crate::scene::add(p.detected, [5.0; 3])))
            .collect();
        assert!((coordinate_error(&shifted).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(coordinate_error(&[]), Err(MetricError::Empty("coordinate error")));
    }

    fn trials(correct: usize, total: usize) -> Vec<OcclusionTrial> {
        (0..total)
            .map(|i| OcclusionTrial {
                tier: OcclusionTier::ALL[i % 3],
                correct: i < correct,
            })
            .collect()
    }

    #[test]
    fn occlusion_rate_examples() {
        assert_eq!(occlusion_rate(&trials(5, 6)).unwrap(), 83.3);
        assert_eq!(occlusion_rate(&trials(0, 7)).unwrap(), 0.0);
        assert_eq!(occlusion_rate(&trials(4, 4)).unwrap(), 100.0);
        assert!(occlusion_rate(&[]).is_err());
    }

    #[test]
    fn latency_examples() {
        let s = |e: f64, r: f64| LatencySample { event: e, response: r };
        assert_eq!(latency(&[s(1.0, 1.0), s(2.0, 2.0)]).unwrap(), 0.0);
        assert!((latency(&[s(0.0, 4.2), s(10.0, 14.8)]).unwrap() - 4.5).abs() < 1e-12);
        assert!((latency(&[s(3.0, 7.7)]).unwrap() - 4.7).abs() < 1e-12);
        assert!(matches!(latency(&[s(3.0, 2.0)]), Err(MetricError::ResponseBeforeEvent { .. })));
    }

    fn nbi(values: &[f64]) -> Vec<RatingSample> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| RatingSample::new(format!("r{i}"), NBI_DIMENSION, *v, NBI_SCALE_MAX))
            .collect()
    }

    #[test]
    fn nbi_examples() {
        assert_eq!(narrative_break_index(&nbi(&[2.0, 3.0])).unwrap(), 2.5);
        assert_eq!(narrative_break_index(&nbi(&[6.0, 6.0, 6.0])).unwrap(), 6.0);
        assert!((narrative_break_index(&nbi(&[2.0, 2.0, 3.0])).unwrap() - 7.0 / 3.0).abs() < 1e-9);
        assert!(matches!(
            narrative_break_index(&nbi(&[0.0])),
            Err(MetricError::RatingOutOfScale { .. })
        ));
        assert!(matches!(
            narrative_break_index(&[RatingSample::new("r", "MA", 3.0, 10.0)]),
            Err(MetricError::WrongDimension { .. })
        ));
        assert!(narrative_break_index(&[]).is_err());
    }

    #[test]
    fn lighting_examples() {
        assert!((lighting_robustness(0.921, 1.0).unwrap() - 92.1).abs() < 1e-9);
        assert_eq!(lighting_robustness(0.7, 0.7).unwrap(), 100.0);
        let a = lighting_robustness(0.3, 0.8).unwrap();
        let b = lighting_robustness(0.3 * 7.0, 0.8 * 7.0).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert_eq!(lighting_robustness(0.5, 0.0), Err(MetricError::NonPositiveNormal(0.0)));
        assert!(lighting_robustness(1.2, 1.0).is_err());
    }

    fn tags(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dynamic_tolerance_examples() {
        let theme = tags(&["loss", "memory"]);
        let on = FragmentTags { topic_tags: tags(&["memory"]), content_tags: vec![] };
        let off = FragmentTags { topic_tags: tags(&["weather"]), content_tags: tags(&["rain"]) };
        assert_eq!(dynamic_tolerance(&[on.clone(), on.clone()], &theme).unwrap(), 0.0);
        let mut frags = vec![on.clone(); 38];
        frags.extend([off.clone(), off.clone()]);
        assert_eq!(dynamic_tolerance(&frags, &theme).unwrap(), 5.0);
        assert_eq!(dynamic_tolerance(&[off], &theme).unwrap(), 100.0);
        assert!(dynamic_tolerance(&[], &theme).is_err());
        assert_eq!(dynamic_tolerance(&[on], &[]), Err(MetricError::EmptyTheme));
    }

    #[test]
    fn aggregate_examples() {
        let max = vec![RatingSample::new("a", "MA@Door", 7.0, 7.0); 3];
        assert_eq!(aggregate_ratings(&max, "MA@Door").unwrap(), 100.0);
        // 26 raters summing to 145: mean 5.5769..., / 7 = 79.67% -> 79.7
        let mut door: Vec<RatingSample> = (0..26)
            .map(|i| RatingSample::new(format!("r{i}"), "MA@Door", if i < 15 { 6.0 } else { 5.0 }, 7.0))
            .collect();
        assert_eq!(door.iter().map(|s| s.value).sum::<f64>(), 145.0);
        assert_eq!(aggregate_ratings(&door, "MA@Door").unwrap(), 79.7);
        assert_eq!(aggregate_ratings(&vec![RatingSample::new("a", "X", 3.0, 5.0); 4], "X").unwrap(), 60.0);
        door.push(RatingSample::new("x", "MA@Door", 4.0, 5.0));
        assert!(matches!(aggregate_ratings(&door, "MA@Door"), Err(MetricError::MixedScales(_))));
    }

    #[test]
    fn ttest_examples() {
        let r = paired_ttest(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
        assert!((r.t - 3.872983346207417).abs() < 1e-9);
        // independent reference value: 0.030466291662...
        assert!((r.p - 0.0305).abs() < 1e-3);
        assert!((r.p - 0.030466291662170977).abs() < 1e-9);
        assert!(r.significant());

        let zero = paired_ttest(&[2.0, 1.0, 2.0, 1.0], &[1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!((zero.p - 1.0).abs() < 1e-9);

        assert_eq!(paired_ttest(&[1.0, 2.0], &[0.0, 1.0]), Err(MetricError::DegenerateVariance));
        assert_eq!(paired_ttest(&[1.0], &[0.0]), Err(MetricError::TooFewPairs(1)));
        assert_eq!(paired_ttest(&[1.0, 2.0], &[0.0]), Err(MetricError::LengthMismatch(2, 1)));
    }

    #[test]
    fn report_marks_absent_cells() {
        let inputs = ReportInputs {
            scenarios: vec![ScenarioInputs {
                name: "Living Area".into(),
                occlusion: Some(trials(5, 6)),
                latency: Some(vec![LatencySample { event: 0.0, response: 4.5 }]),
                ..Default::default()
            }],
            ..Default::default()
        };
        let report = build_report(&inputs).unwrap();
        let row = &report.scenarios[0];
        assert_eq!(row.ce, None);
        assert_eq!(row.or_pct, Some(83.3));
        let text = report.render_text();
        let line = text.lines().find(|l| l.starts_with("Living Area")).unwrap();
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[2], "-");
        assert_eq!(cells[3], "83.3");
        assert_eq!(cells[4], "4.5");
    }

    #[test]
    fn empty_report_is_an_error() {
        assert_eq!(build_report(&ReportInputs::default()), Err(MetricError::NoInputs));
        let only_names = ReportInputs {
            scenarios: vec![ScenarioInputs { name: "x".into(), ..Default::default() }],
            ..Default::default()
        };
        assert_eq!(build_report(&only_names), Err(MetricError::NoInputs));
    }

    #[test]
    fn story_table_pairs_by_rater() {
        let mut samples = Vec::new();
        for (i, (a, b)) in [(5.0, 3.0), (6.0, 3.0), (4.0, 3.0), (6.0, 2.0)].iter().enumerate() {
            samples.push(RatingSample::new(format!("r{i}"), "Interesting@S1", *a, 7.0));
            samples.push(RatingSample::new(format!("r{i}"), "Interesting@S3", *b, 7.0));
        }
        let report = build_report(&ReportInputs { story_ratings: samples.clone(), ..Default::default() }).unwrap();
        let row = &report.stories[0];
        assert_eq!(row.pairwise.len(), 1);
        let a: Vec<f64> = samples.iter().step_by(2).map(|s| s.value).collect();
        let b: Vec<f64> = samples.iter().skip(1).step_by(2).map(|s| s.value).collect();
        assert_eq!(row.pairwise[0].p, Some(paired_ttest(&a, &b).unwrap().p));
        assert!(report.render_text().contains("S1 vs S3"));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn percentages_stay_in_range(
            correct in proptest::collection::vec(any::<bool>(), 1..200),
            extreme in 0.0..1.0f64,
            normal in 0.0..1.0f64,
            ratings in proptest::collection::vec(1.0..=7.0f64, 1..100),
        ) {
            let trials: Vec<_> = correct.iter().map(|c| OcclusionTrial { tier: OcclusionTier::T60, correct: *c }).collect();
            let or = occlusion_rate(&trials).unwrap();
            prop_assert!((0.0..=100.0).contains(&or));
            if normal > 0.0 && extreme <= normal {
                let lr = lighting_robustness(extreme, normal).unwrap();
                prop_assert!((0.0..=100.0).contains(&lr));
            }
            let samples: Vec<_> = ratings.iter().map(|v| RatingSample::new("r", "MA", *v, 7.0)).collect();
            let pct = aggregate_ratings(&samples, "MA").unwrap();
            prop_assert!((0.0..=100.0).contains(&pct));
        }

        #[test]
        fn ttest_is_symmetric(
            a in proptest::collection::vec(1.0..7.0f64, 3..30),
            noise in proptest::collection::vec(-2.0..2.0f64, 30),
        ) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
            if let (Ok(ab), Ok(ba)) = (paired_ttest(&a, &b), paired_ttest(&b, &a)) {
                prop_assert!((ab.p - ba.p).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&ab.p));
            }
        }

        #[test]
        fn latency_is_non_negative(deltas in proptest::collection::vec(0.0..20.0f64, 1..50)) {
            let trace: Vec<_> = deltas.iter()
                .map(|d| LatencySample { event: 0.0, response: *d })
                .collect();
            let l = latency(&trace).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, deltas.iter().all(|d| *d == 0.0));
        }
    }
}
