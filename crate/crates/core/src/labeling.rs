//! Threshold labeling of clusters and the per-window state timeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureLayout;
use crate::timeseries::{Axis, Band, TimeSegmentSet};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("rule {0} matches no channel in the feature layout")]
    RuleMatchesNoChannel(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("no label for cluster {0}")]
    MissingLabel(usize),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("windows must be sorted, non-overlapping and non-empty: {0}")]
    InvalidWindows(String),
    #[error("timelines cover different windows")]
    WindowMismatch,
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, LabelError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabelError + '_ {
    move |source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Environmental phenomenon a threshold rule detects.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Phenomenon {
    Earthquake,
    HighMicroseism,
    HighAnthropogenic,
    Other(String),
}

impl fmt::Display for Phenomenon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phenomenon::Earthquake => f.write_str("earthquake"),
            Phenomenon::HighMicroseism => f.write_str("high_microseism"),
            Phenomenon::HighAnthropogenic => f.write_str("high_anthropogenic"),
            Phenomenon::Other(name) => f.write_str(name),
        }
    }
}

impl FromStr for Phenomenon {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "earthquake" => Phenomenon::Earthquake,
            "high_microseism" | "microseism" => Phenomenon::HighMicroseism,
            "high_anthropogenic" | "anthropogenic" => Phenomenon::HighAnthropogenic,
            "" => return Err(LabelError::InvalidRule("empty phenomenon name".into())),
            _ if norm.contains(['@', ';', ',']) || norm.chars().any(char::is_whitespace) => {
                return Err(LabelError::InvalidRule(format!("phenomenon name {s:?} contains a reserved character")))
            }
            _ => Phenomenon::Other(norm),
        })
    }
}

impl TryFrom<String> for Phenomenon {
    type Error = LabelError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Phenomenon> for String {
    fn from(p: Phenomenon) -> String {
        p.to_string()
    }
}

/// Fires a tag when the selected feature of a matching channel exceeds the
/// threshold. `None` for sensor or axis matches any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RuleRecord", into = "RuleRecord")]
pub struct ThresholdRule {
    pub phenomenon: Phenomenon,
    pub band: Band,
    pub sensor: Option<String>,
    pub axis: Option<Axis>,
    pub feature: String,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct RuleRecord {
    phenomenon: Phenomenon,
    band: Band,
    #[serde(default = "wildcard")]
    sensor: String,
    #[serde(default = "wildcard")]
    axis: String,
    #[serde(default = "default_feature")]
    feature: String,
    threshold_nm_s: f64,
}

fn wildcard() -> String {
    "*".into()
}

fn default_feature() -> String {
    "mean".into()
}

impl TryFrom<RuleRecord> for ThresholdRule {
    type Error = LabelError;

    fn try_from(r: RuleRecord) -> Result<Self> {
        let axis = match r.axis.as_str() {
            "*" => None,
            a => Some(a.parse::<Axis>().map_err(|e| LabelError::InvalidRule(e.to_string()))?),
        };
        let sensor = (r.sensor != "*").then_some(r.sensor);
        ThresholdRule::new(r.phenomenon, r.band, sensor, axis, &r.feature, r.threshold_nm_s)
    }
}

impl From<ThresholdRule> for RuleRecord {
    fn from(r: ThresholdRule) -> Self {
        RuleRecord {
            phenomenon: r.phenomenon,
            band: r.band,
            sensor: r.sensor.unwrap_or_else(wildcard),
            axis: r.axis.map_or_else(wildcard, |a| a.to_string()),
            feature: r.feature,
            threshold_nm_s: r.threshold,
        }
    }
}

impl ThresholdRule {
    pub fn new(
        phenomenon: Phenomenon,
        band: Band,
        sensor: Option<String>,
        axis: Option<Axis>,
        feature: &str,
        threshold: f64,
    ) -> Result<Self> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(LabelError::InvalidRule(format!("threshold must be positive, got {threshold}")));
        }
        Ok(ThresholdRule {
            phenomenon,
            band,
            sensor,
            axis,
            feature: feature.to_ascii_lowercase(),
            threshold,
        })
    }

    fn describe(&self) -> String {
        format!(
            "{} ({} band, sensor {}, axis {}, {})",
            self.phenomenon,
            self.band,
            self.sensor.as_deref().unwrap_or("*"),
            self.axis.map_or("*".to_string(), |a| a.to_string()),
            self.feature
        )
    }

    /// `(vector index, sensor)` for every channel the rule applies to.
    fn targets(&self, layout: &FeatureLayout) -> Result<Vec<(usize, String)>> {
        let f = layout
            .feature_index(&self.feature)
            .ok_or_else(|| LabelError::LayoutMismatch(format!("feature {:?} not in layout", self.feature)))?;
        let out: Vec<(usize, String)> = layout
            .channels
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.band == self.band
                    && self.sensor.as_ref().is_none_or(|s| *s == c.sensor)
                    && self.axis.is_none_or(|a| a == c.axis)
            })
            .map(|(ci, c)| (layout.index(ci, f), c.sensor.clone()))
            .collect();
        if out.is_empty() {
            return Err(LabelError::RuleMatchesNoChannel(self.describe()));
        }
        Ok(out)
    }
}

pub fn load_rules(path: &Path) -> Result<Vec<ThresholdRule>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| LabelError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// A `(phenomenon, sensor)` annotation.
pub type Tag = (Phenomenon, String);

pub fn format_tags(tags: &BTreeSet<Tag>) -> String {
    tags.iter().map(|(p, s)| format!("{p}@{s}")).collect::<Vec<_>>().join(";")
}

pub fn parse_tags(s: &str) -> Result<BTreeSet<Tag>> {
    s.split(';')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (p, sensor) = t
                .split_once('@')
                .ok_or_else(|| LabelError::InvalidRule(format!("tag {t:?} is not phenomenon@sensor")))?;
            Ok((p.parse()?, sensor.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLabel {
    pub cluster_id: usize,
    pub tags: BTreeSet<Tag>,
}

impl StateLabel {
    pub fn quiet(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Applies prepared rule targets to one raw-unit vector.
struct CompiledRules<'r> {
    rules: Vec<(&'r ThresholdRule, Vec<(usize, String)>)>,
    dim: usize,
}

impl<'r> CompiledRules<'r> {
    fn new(rules: &'r [ThresholdRule], layout: &FeatureLayout) -> Result<Self> {
        let rules = rules
            .iter()
            .map(|r| Ok((r, r.targets(layout)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledRules { rules, dim: layout.dim() })
    }

    fn tags(&self, raw: &[f64]) -> Result<BTreeSet<Tag>> {
        if raw.len() != self.dim {
            return Err(LabelError::LayoutMismatch(format!(
                "vector has {} entries, layout has {}",
                raw.len(),
                self.dim
            )));
        }
        let mut tags = BTreeSet::new();
        for (rule, targets) in &self.rules {
            for (idx, sensor) in targets {
                if raw[*idx] > rule.threshold {
                    tags.insert((rule.phenomenon.clone(), sensor.clone()));
                }
            }
        }
        Ok(tags)
    }
}

/// Tags a cluster by comparing its raw-unit centroid against every rule.
/// A tag fires when any matching channel at that sensor is strictly above
/// the threshold.
pub fn label_cluster(cluster_id: usize, centroid_raw: &[f64], rules: &[ThresholdRule], layout: &FeatureLayout) -> Result<StateLabel> {
    let tags = CompiledRules::new(rules, layout)?.tags(centroid_raw)?;
    Ok(StateLabel { cluster_id, tags })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineWindow {
    pub start_gps: i64,
    pub end_gps: i64,
    pub cluster_id: usize,
}

/// Per-window state assignment with a label for every state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateTimeline {
    pub windows: Vec<TimelineWindow>,
    pub labels: BTreeMap<usize, StateLabel>,
}

pub fn build_timeline(assignments: &[usize], labels: &BTreeMap<usize, StateLabel>, bounds: &[(i64, i64)]) -> Result<StateTimeline> {
    if assignments.len() != bounds.len() {
        return Err(LabelError::LayoutMismatch(format!(
            "{} assignments for {} windows",
            assignments.len(),
            bounds.len()
        )));
    }
    let mut prev_end = i64::MIN;
    for &(s, e) in bounds {
        if s >= e || s < prev_end {
            return Err(LabelError::InvalidWindows(format!("[{s}, {e}) after end {prev_end}")));
        }
        prev_end = e;
    }
    let mut used = BTreeMap::new();
    for &c in assignments {
        let label = labels.get(&c).ok_or(LabelError::MissingLabel(c))?;
        used.insert(c, label.clone());
    }
    Ok(StateTimeline {
        windows: bounds
            .iter()
            .zip(assignments)
            .map(|(&(start_gps, end_gps), &cluster_id)| TimelineWindow {
                start_gps,
                end_gps,
                cluster_id,
            })
            .collect(),
        labels: used,
    })
}

/// Labels each window directly from its own raw features. Distinct tag sets
/// become states numbered in order of first appearance.
pub fn threshold_baseline(bounds: &[(i64, i64)], raw_rows: &[&[f64]], rules: &[ThresholdRule], layout: &FeatureLayout) -> Result<StateTimeline> {
    let compiled = CompiledRules::new(rules, layout)?;
    let mut ids: Vec<BTreeSet<Tag>> = Vec::new();
    let mut assignments = Vec::with_capacity(raw_rows.len());
    for row in raw_rows {
        let tags = compiled.tags(row)?;
        let id = match ids.iter().position(|t| *t == tags) {
            Some(i) => i,
            None => {
                ids.push(tags);
                ids.len() - 1
            }
        };
        assignments.push(id);
    }
    let labels = ids
        .into_iter()
        .enumerate()
        .map(|(cluster_id, tags)| (cluster_id, StateLabel { cluster_id, tags }))
        .collect();
    build_timeline(&assignments, &labels, bounds)
}

impl StateTimeline {
    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn tags_of(&self, w: &TimelineWindow) -> &BTreeSet<Tag> {
        &self.labels[&w.cluster_id].tags
    }

    /// Segments per state, adjacent same-state windows merged.
    pub fn state_segments(&self) -> BTreeMap<usize, TimeSegmentSet> {
        let mut raw: BTreeMap<usize, Vec<(i64, i64)>> = BTreeMap::new();
        for w in &self.windows {
            let segs = raw.entry(w.cluster_id).or_default();
            match segs.last_mut() {
                Some(last) if last.1 == w.start_gps => last.1 = w.end_gps,
                _ => segs.push((w.start_gps, w.end_gps)),
            }
        }
        raw.into_iter()
            .map(|(k, v)| (k, TimeSegmentSet::new(v).expect("windows are sorted and disjoint")))
            .collect()
    }

    /// Total covered time: the sum of window lengths.
    pub fn windowed_span(&self) -> i64 {
        self.windows.iter().map(|w| w.end_gps - w.start_gps).sum()
    }

    pub fn assignments(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.cluster_id).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "window_start,window_end,cluster_id,tags")?;
        for w in &self.windows {
            writeln!(out, "{},{},{},{}", w.start_gps, w.end_gps, w.cluster_id, format_tags(self.tags_of(w)))?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
        self.write_csv(&mut out).map_err(io_err(path))?;
        out.flush().map_err(io_err(path))
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |line: usize, reason: String| LabelError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "window_start,window_end,cluster_id,tags" => {}
            _ => return Err(bad(1, "expected header window_start,window_end,cluster_id,tags".into())),
        }
        let mut bounds = Vec::new();
        let mut assignments = Vec::new();
        let mut labels: BTreeMap<usize, StateLabel> = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(4, ',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, "expected 4 fields".into()));
            }
            let int = |s: &str| s.trim().parse::<i64>().map_err(|e| bad(i + 1, e.to_string()));
            let (s, e) = (int(f[0])?, int(f[1])?);
            let c: usize = f[2].trim().parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?;
            let tags = parse_tags(f[3].trim()).map_err(|e| bad(i + 1, e.to_string()))?;
            match labels.get(&c) {
                Some(l) if l.tags != tags => return Err(bad(i + 1, format!("cluster {c} has inconsistent tags"))),
                Some(_) => {}
                None => {
                    labels.insert(c, StateLabel { cluster_id: c, tags });
                }
            }
            bounds.push((s, e));
            assignments.push(c);
        }
        build_timeline(&assignments, &labels, &bounds)
    }

    /// Writes `state_<id>.csv` flag files into `dir`, one per state.
    pub fn write_state_flags(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (id, segs) in self.state_segments() {
            let path = dir.join(format!("state_{id}.csv"));
            let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            crate::timeseries::write_segments(&segs, &mut out).map_err(io_err(&path))?;
            out.flush().map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Mean per-window Jaccard similarity of tag sets; two empty sets agree.
pub fn tag_agreement(a: &StateTimeline, b: &StateTimeline) -> Result<f64> {
    if a.windows.len() != b.windows.len()
        || a
            .windows
            .iter()
            .zip(&b.windows)
            .any(|(x, y)| (x.start_gps, x.end_gps) != (y.start_gps, y.end_gps))
    {
        return Err(LabelError::WindowMismatch);
    }
    if a.windows.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = a
        .windows
        .iter()
        .zip(&b.windows)
        .map(|(x, y)| jaccard(a.tags_of(x), b.tags_of(y)))
        .sum();
    Ok(total / a.windows.len() as f64)
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}
