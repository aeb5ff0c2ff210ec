//! Config-driven stages shared by the monolithic run and the per-stage
//! subcommands. Each stage reads and writes the documented interchange
//! files, so running the stages one by one gives the same bytes as `run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clustering::{
    adjusted_rand_index, kmeans, rank_by_score, seed_for_k, select_k, ClusterError, ClusterModel, KMeansParams,
    SelectionParams, ValidationReport,
};
use crate::dsp::{blrms_channel, DspError, DEFAULT_ORDER, DEFAULT_STRIDE_S};
use crate::evaluation::{correlate_by_class, correlate_with, load_catalog, CorrelateOptions, EvalError, EventKind};
use crate::features::{FeatureError, FeatureSpec, FeatureTable, Standardizer, WindowingConfig};
use crate::labeling::{build_timeline, label_cluster, load_rules, tag_agreement, threshold_baseline, LabelError, StateLabel, StateTimeline};
use crate::simulate::{generate, truth_labels, write_scenario, GroundTruth, ScenarioSpec, SimError};
use crate::timeseries::{
    align_batch, load_flags, load_manifest, load_trend_file, load_trend_file_split, mask_to_segments, ChannelBatch,
    ChannelSeries, TimeSegmentSet, TimeSeriesError,
};
use crate::derive_seed;

/// Failure classes with distinct process exit codes.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Data(_) => "data",
            PipelineError::Internal(_) => "internal",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind(), "exit_code": self.exit_code(), "message": self.to_string()}})
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(TimeSeriesError, DspError, FeatureError, EvalError);

impl From<ClusterError> for PipelineError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::InvalidKRange { .. } | ClusterError::KTooLarge { .. } | ClusterError::ZeroK | ClusterError::NoRestarts => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<LabelError> for PipelineError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::RuleMatchesNoChannel(_) | LabelError::InvalidRule(_) => PipelineError::Config(e.to_string()),
            LabelError::MissingLabel(_) => PipelineError::Internal(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidSpec(_) | SimError::Malformed { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_stride")]
    pub stride_s: u64,
}

fn default_order() -> usize {
    DEFAULT_ORDER
}
fn default_stride() -> u64 {
    DEFAULT_STRIDE_S
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            order: DEFAULT_ORDER,
            stride_s: DEFAULT_STRIDE_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    #[serde(default = "default_set")]
    pub set: Vec<String>,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default = "yes")]
    pub log_transform: bool,
}

fn default_set() -> Vec<String> {
    FeatureSpec::default().names()
}
fn yes() -> bool {
    true
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            set: default_set(),
            standardize: true,
            log_transform: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_range: Option<(usize, usize)>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// `intrinsic`, or `external:<catalog name>`.
    #[serde(default = "default_rank_by")]
    pub rank_by: String,
    #[serde(default = "default_silhouette_sample")]
    pub silhouette_sample: usize,
}

fn default_restarts() -> usize {
    KMeansParams::default().restarts
}
fn default_max_iter() -> usize {
    KMeansParams::default().max_iter
}
fn default_tol() -> f64 {
    KMeansParams::default().tol
}
fn default_rank_by() -> String {
    "intrinsic".into()
}
fn default_silhouette_sample() -> usize {
    SelectionParams::default().silhouette_sample
}

impl ClusteringConfig {
    fn params(&self) -> SelectionParams {
        SelectionParams {
            kmeans: KMeansParams {
                restarts: self.restarts,
                max_iter: self.max_iter,
                tol: self.tol,
            },
            silhouette_sample: self.silhouette_sample,
        }
    }

    fn external_catalog(&self) -> Option<&str> {
        self.rank_by.strip_prefix("external:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    pub path: PathBuf,
    #[serde(default = "default_kind")]
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_min: Option<f64>,
    /// Used in artifact names; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn default_kind() -> EventKind {
    EventKind::Glitch
}

impl CatalogConfig {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "catalog".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<PathBuf>,
    #[serde(default)]
    pub split_on_gap: bool,
    #[serde(default)]
    pub dsp: DspConfig,
    #[serde(default)]
    pub windowing: WindowingConfig,
    #[serde(default)]
    pub features: FeaturesConfig,
    pub clustering: ClusteringConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub catalogs: Vec<CatalogConfig>,
    /// Adds exact Poisson tail p-values to rate reports.
    #[serde(default)]
    pub poisson_p: bool,
    /// Also writes one rate report per event class label.
    #[serde(default)]
    pub group_by_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    /// Parses a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output);
        self.flags.as_mut().map(fix);
        self.rules.as_mut().map(fix);
        self.ground_truth.as_mut().map(fix);
        self.catalogs.iter_mut().for_each(|c| fix(&mut c.path));
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        let c = &self.clustering;
        match (c.k, c.k_range) {
            (Some(_), Some(_)) => return cfg("clustering: give exactly one of k and k_range, not both".into()),
            (None, None) => return cfg("clustering: one of k and k_range is required".into()),
            (Some(k), None) if k == 0 => return cfg("clustering: k must be at least 1".into()),
            (None, Some((lo, hi))) if lo < 2 || lo > hi => {
                return cfg(format!("clustering: k_range [{lo}, {hi}] must satisfy 2 <= lo <= hi"))
            }
            _ => {}
        }
        if c.restarts == 0 || c.max_iter == 0 || !(c.tol.is_finite() && c.tol >= 0.0) {
            return cfg("clustering: restarts and max_iter must be positive and tol non-negative".into());
        }
        if c.rank_by != "intrinsic" {
            let Some(name) = c.external_catalog() else {
                return cfg(format!("clustering: rank_by must be intrinsic or external:<catalog>, got {:?}", c.rank_by));
            };
            if !self.catalogs.iter().any(|cat| cat.name() == name) {
                return cfg(format!("clustering: rank_by names unknown catalog {name:?}"));
            }
            if c.k_range.is_none() {
                return cfg("clustering: external ranking needs k_range".into());
            }
        }
        if self.windowing.window_s == 0 {
            return cfg("windowing: window_s must be positive".into());
        }
        if self.dsp.stride_s == 0 {
            return cfg("dsp: stride_s must be positive".into());
        }
        FeatureSpec::from_names(&self.features.set).map_err(|e| PipelineError::Config(format!("features: {e}")))?;
        let mut names = std::collections::BTreeSet::new();
        for cat in &self.catalogs {
            let n = cat.name();
            if !names.insert(n.clone()) || n.contains(['/', '\\']) {
                return cfg(format!("catalogs: name {n:?} must be unique and path-safe"));
            }
            if cat.snr_min.is_some_and(|v| !v.is_finite()) {
                return cfg("catalogs: snr_min must be finite".into());
            }
        }
        Ok(())
    }

    fn require(path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(PipelineError::Config(format!("{what} {} does not exist", path.display())))
        }
    }

    fn rules_path(&self) -> Result<&Path> {
        let p = self
            .rules
            .as_deref()
            .ok_or_else(|| PipelineError::Config("labeling needs a rules file; none is configured".into()))?;
        Self::require(p, "rules file")?;
        Ok(p)
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::from_names(&self.features.set).expect("validated")
    }

    /// Seed the clustering stage draws from.
    pub fn cluster_seed(&self) -> u64 {
        derive_seed(self.clustering.seed, STAGE_CLUSTER)
    }
}

const STAGE_CLUSTER: u64 = 1;

/// Artifact locations inside the output directory.
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(write_err(dir))?;
        Ok(Outputs { dir: dir.to_path_buf() })
    }
    pub fn features(&self) -> PathBuf {
        self.dir.join("features.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }
    pub fn validation(&self) -> PathBuf {
        self.dir.join("validation.json")
    }
    pub fn timeline(&self) -> PathBuf {
        self.dir.join("timeline.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.json")
    }
    pub fn baseline(&self) -> PathBuf {
        self.dir.join("baseline_timeline.csv")
    }
    pub fn states(&self) -> PathBuf {
        self.dir.join("states")
    }
    pub fn rates(&self, name: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("rates_{name}.json")), self.dir.join(format!("rates_{name}.csv")))
    }
    pub fn rates_by_label(&self, name: &str) -> PathBuf {
        self.dir.join(format!("rates_{name}_by_label.json"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("run_manifest.json")
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(write_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Data(format!("{what} {}: {e} (run the earlier stage first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{what} {}: {e}", path.display())))
}

/// Loads every manifest channel (band-passing raw traces into trends),
/// aligns them and applies the observing flags.
pub fn load_batches(cfg: &PipelineConfig) -> Result<Vec<ChannelBatch>> {
    PipelineConfig::require(&cfg.manifest, "manifest")?;
    let entries = load_manifest(&cfg.manifest)?;
    for e in &entries {
        PipelineConfig::require(&e.file, "trend file")?;
    }
    let pieces: Vec<Vec<ChannelSeries>> = entries
        .par_iter()
        .map(|e| -> Result<Vec<ChannelSeries>> {
            let id = e.channel_id()?;
            let dt = e.sample_interval();
            let parts = if cfg.split_on_gap {
                load_trend_file_split(&e.file, id, dt)?
            } else {
                vec![load_trend_file(&e.file, id, dt)?]
            };
            if e.is_raw() {
                parts
                    .iter()
                    .map(|p| blrms_channel(p, cfg.dsp.order, cfg.dsp.stride_s).map_err(Into::into))
                    .collect()
            } else {
                Ok(parts)
            }
        })
        .collect::<Result<_>>()?;

    let batches = if cfg.split_on_gap {
        common_batches(pieces)?
    } else {
        vec![align_batch(pieces.into_iter().flatten().collect())?]
    };
    let Some(flags_path) = &cfg.flags else {
        return Ok(batches);
    };
    PipelineConfig::require(flags_path, "flags file")?;
    let flags = load_flags(flags_path)?;
    Ok(batches.iter().flat_map(|b| mask_to_segments(b, &flags)).collect())
}

fn series_span(s: &ChannelSeries) -> (i64, i64) {
    (s.start_gps, s.start_gps + s.span_secs().floor() as i64)
}

/// One aligned batch per stretch of time that every channel covers.
fn common_batches(pieces: Vec<Vec<ChannelSeries>>) -> Result<Vec<ChannelBatch>> {
    let mut common: Option<TimeSegmentSet> = None;
    for parts in &pieces {
        let spans = TimeSegmentSet::from_unsorted(parts.iter().map(series_span).filter(|(s, e)| s < e).collect())?;
        common = Some(match common {
            None => spans,
            Some(c) => c.intersect(&spans),
        });
    }
    let common = common.unwrap_or_default();
    if common.is_empty() {
        return Err(TimeSeriesError::NoOverlap.into());
    }
    let mut out = Vec::new();
    for &seg in common.segments() {
        let only = TimeSegmentSet::new(vec![seg])?;
        let mut members = Vec::new();
        for parts in &pieces {
            let piece = parts
                .iter()
                .find(|p| {
                    let (s, e) = series_span(p);
                    s <= seg.0 && seg.1 <= e
                })
                .ok_or_else(|| PipelineError::Internal("common segment not covered by a piece".into()))?;
            let one = ChannelBatch::new(vec![piece.clone()])?;
            members.extend(mask_to_segments(&one, &only).into_iter().flat_map(|b| b.channels().to_vec()));
        }
        out.push(align_batch(members)?);
    }
    Ok(out)
}

/// Stage: windowed features, written to `features.csv`.
pub fn stage_features(cfg: &PipelineConfig, out: &Outputs) -> Result<FeatureTable> {
    let batches = load_batches(cfg)?;
    if batches.is_empty() {
        return Err(PipelineError::Data("no data inside the observing flags".into()));
    }
    let table = FeatureTable::extract(&batches, &cfg.windowing, &cfg.feature_spec())?;
    if table.rows.is_empty() {
        return Err(PipelineError::Data("no complete window fits the data".into()));
    }
    table.write_csv_file(&out.features())?;
    Ok(table)
}

fn read_features(out: &Outputs) -> Result<FeatureTable> {
    let path = out.features();
    if !path.exists() {
        return Err(PipelineError::Data(format!("{} not found (run the features stage first)", path.display())));
    }
    Ok(FeatureTable::read_csv_file(&path)?)
}

/// Standardized design matrix for clustering.
pub fn standardize(cfg: &PipelineConfig, table: &FeatureTable) -> Result<(Standardizer, Array2<f64>)> {
    let rows = table.vectors();
    let st = if cfg.features.standardize {
        Standardizer::fit(&rows, cfg.features.log_transform)?
    } else {
        Standardizer::identity(table.layout.dim())
    };
    let z: Vec<f64> = rows
        .iter()
        .map(|r| st.apply(r))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .concat();
    let x = Array2::from_shape_vec((rows.len(), table.layout.dim()), z).map_err(|e| PipelineError::Internal(e.to_string()))?;
    Ok((st, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationArtifact {
    pub scores: ValidationReport,
    pub rank_by: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external_scores: BTreeMap<usize, Option<f64>>,
    pub ranking: Vec<usize>,
    pub chosen_k: usize,
}

fn unlabeled_timeline(assignments: &[usize], bounds: &[(i64, i64)]) -> Result<StateTimeline> {
    let labels: BTreeMap<usize, StateLabel> = assignments
        .iter()
        .map(|&c| (c, StateLabel { cluster_id: c, tags: Default::default() }))
        .collect();
    Ok(build_timeline(assignments, &labels, bounds)?)
}

/// Stage: grid search over `k_range`, written to `validation.json`.
pub fn stage_select_k(cfg: &PipelineConfig, out: &Outputs, table: &FeatureTable) -> Result<(ValidationArtifact, BTreeMap<usize, crate::clustering::LloydFit>)> {
    let (lo, hi) = cfg
        .clustering
        .k_range
        .ok_or_else(|| PipelineError::Config("select-k needs clustering.k_range".into()))?;
    let (_, x) = standardize(cfg, table)?;
    let sel = select_k(x.view(), lo..=hi, &cfg.clustering.params(), cfg.cluster_seed())?;
    let mut external_scores = BTreeMap::new();
    let ranking = match cfg.clustering.external_catalog() {
        None => sel.ranking.clone(),
        Some(name) => {
            let cat = cfg.catalogs.iter().find(|c| c.name() == name).expect("validated");
            PipelineConfig::require(&cat.path, "catalog")?;
            let events = load_catalog(&cat.path, cat.kind, cat.snr_min)?;
            let bounds = table.bounds();
            for (&k, fit) in &sel.fits {
                let tl = unlabeled_timeline(&fit.assignments, &bounds)?;
                let report = correlate_with(&tl, &events, CorrelateOptions::default())?;
                external_scores.insert(k, report.max_z());
            }
            rank_by_score(&external_scores)
        }
    };
    let artifact = ValidationArtifact {
        scores: sel.report,
        rank_by: cfg.clustering.rank_by.clone(),
        external_scores,
        chosen_k: ranking[0],
        ranking,
    };
    write_json(&out.validation(), &artifact)?;
    Ok((artifact, sel.fits))
}

fn config_echo(cfg: &PipelineConfig) -> Value {
    json!({
        "windowing": cfg.windowing,
        "features": cfg.features,
        "clustering": cfg.clustering,
        "dsp": cfg.dsp,
    })
}

/// Stage: fits the model (choosing k by grid search when a range is
/// configured), written to `model.json`.
pub fn stage_cluster(cfg: &PipelineConfig, out: &Outputs, table: &FeatureTable) -> Result<ClusterModel> {
    let (st, x) = standardize(cfg, table)?;
    let seed = cfg.cluster_seed();
    let (k, fit) = match cfg.clustering.k {
        Some(k) => {
            if k > x.nrows() {
                return Err(ClusterError::KTooLarge { k, n: x.nrows() }.into());
            }
            (k, kmeans(x.view(), k, &cfg.clustering.params().kmeans, seed_for_k(seed, k))?)
        }
        None => {
            let (artifact, mut fits) = stage_select_k(cfg, out, table)?;
            let k = artifact.chosen_k;
            (k, fits.remove(&k).expect("fit for every k in range"))
        }
    };
    let model = ClusterModel::from_fit(&fit, seed_for_k(seed, k), table.layout.column_names(), st, config_echo(cfg));
    write_json(&out.model(), &model)?;
    Ok(model)
}

fn read_model(out: &Outputs, table: &FeatureTable) -> Result<ClusterModel> {
    let model: ClusterModel = read_json(&out.model(), "model")?;
    if model.feature_layout != table.layout.column_names() {
        return Err(PipelineError::Data("model feature layout does not match features.csv".into()));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelArtifact {
    pub states: Vec<StateSummary>,
    /// Mean per-window tag Jaccard similarity against the threshold baseline.
    pub baseline_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub cluster_id: usize,
    pub tags: String,
    pub quiet: bool,
    pub windows: usize,
    pub duration_s: i64,
    pub centroid_raw: Vec<f64>,
}

/// Stage: labels clusters and writes the timeline, per-state flags and the
/// threshold baseline.
pub fn stage_label(cfg: &PipelineConfig, out: &Outputs, table: &FeatureTable, model: &ClusterModel) -> Result<(StateTimeline, LabelArtifact)> {
    let rules = load_rules(cfg.rules_path()?)?;
    let layout = &table.layout;
    let raw = model.raw_centroids()?;
    let labels: BTreeMap<usize, StateLabel> = raw
        .iter()
        .enumerate()
        .map(|(c, centroid)| Ok((c, label_cluster(c, centroid, &rules, layout)?)))
        .collect::<Result<_>>()?;
    let assignments: Vec<usize> = table
        .rows
        .par_iter()
        .map(|r| model.predict(&r.vector))
        .collect::<std::result::Result<_, _>>()?;
    let bounds = table.bounds();
    let timeline = build_timeline(&assignments, &labels, &bounds)?;
    timeline.write_csv_file(&out.timeline())?;
    let states_dir = out.states();
    if states_dir.exists() {
        std::fs::remove_dir_all(&states_dir).map_err(write_err(&states_dir))?;
    }
    timeline.write_state_flags(&states_dir)?;

    let baseline = threshold_baseline(&bounds, &table.vectors(), &rules, layout)?;
    baseline.write_csv_file(&out.baseline())?;

    let segments = timeline.state_segments();
    let artifact = LabelArtifact {
        states: labels
            .iter()
            .map(|(&c, l)| StateSummary {
                cluster_id: c,
                tags: crate::labeling::format_tags(&l.tags),
                quiet: l.quiet(),
                windows: assignments.iter().filter(|&&a| a == c).count(),
                duration_s: segments.get(&c).map_or(0, |s| s.total_duration()),
                centroid_raw: raw[c].clone(),
            })
            .collect(),
        baseline_agreement: tag_agreement(&timeline, &baseline)?,
    };
    write_json(&out.labels(), &artifact)?;
    Ok((timeline, artifact))
}

fn read_timeline(out: &Outputs) -> Result<StateTimeline> {
    let path = out.timeline();
    if !path.exists() {
        return Err(PipelineError::Data(format!("{} not found (run the label stage first)", path.display())));
    }
    Ok(StateTimeline::read_csv_file(&path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub name: String,
    pub in_span_events: u64,
    pub out_of_span_events: u64,
    pub max_z: Option<f64>,
}

/// Stage: rate reports per configured catalog.
pub fn stage_evaluate(cfg: &PipelineConfig, out: &Outputs, timeline: &StateTimeline) -> Result<Vec<CatalogSummary>> {
    let opts = CorrelateOptions { poisson_p: cfg.poisson_p };
    let mut summaries = Vec::new();
    for cat in &cfg.catalogs {
        PipelineConfig::require(&cat.path, "catalog")?;
        let events = load_catalog(&cat.path, cat.kind, cat.snr_min)?;
        let report = correlate_with(timeline, &events, opts)?;
        let name = cat.name();
        let (j, c) = out.rates(&name);
        report.write_files(&j, &c)?;
        if cfg.group_by_label {
            write_json(&out.rates_by_label(&name), &correlate_by_class(timeline, &events, opts)?)?;
        }
        summaries.push(CatalogSummary {
            name,
            in_span_events: report.in_span_events,
            out_of_span_events: report.out_of_span_events,
            max_z: report.max_z(),
        });
    }
    Ok(summaries)
}

/// Adjusted Rand Index of the timeline against a ground-truth file, over
/// windows present in both.
pub fn score_against_truth(timeline: &StateTimeline, truth_path: &Path) -> Result<(f64, usize)> {
    PipelineConfig::require(truth_path, "ground truth")?;
    let truth = GroundTruth::read_csv_file(truth_path)?;
    let by_window: BTreeMap<(i64, i64), usize> = truth.windows.iter().copied().zip(truth_labels(&truth.tags)).collect();
    let (pred, actual): (Vec<usize>, Vec<usize>) = timeline
        .windows
        .iter()
        .filter_map(|w| by_window.get(&(w.start_gps, w.end_gps)).map(|&t| (w.cluster_id, t)))
        .unzip();
    if pred.is_empty() {
        return Err(PipelineError::Data("ground truth shares no windows with the timeline".into()));
    }
    Ok((adjusted_rand_index(&pred, &actual)?, pred.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub windows: usize,
    pub windowed_span_s: i64,
    pub k: usize,
    pub inertia: f64,
    pub baseline_agreement: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    pub catalogs: Vec<CatalogSummary>,
}

/// Every stage in sequence plus the run manifest.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.rules_path()?;
    if let Some(t) = &cfg.ground_truth {
        PipelineConfig::require(t, "ground truth")?;
    }
    let out = Outputs::new(&cfg.output)?;
    stage_features(cfg, &out)?;
    // later stages read the exported features, as the stage subcommands do
    let table = read_features(&out)?;
    let model = stage_cluster(cfg, &out, &table)?;
    let (timeline, labels) = stage_label(cfg, &out, &table, &model)?;
    let catalogs = stage_evaluate(cfg, &out, &timeline)?;
    let ari = match &cfg.ground_truth {
        Some(p) => Some(score_against_truth(&timeline, p)?.0),
        None => None,
    };
    let summary = RunSummary {
        windows: timeline.windows.len(),
        windowed_span_s: timeline.windowed_span(),
        k: model.k,
        inertia: model.inertia,
        baseline_agreement: labels.baseline_agreement,
        ari,
        catalogs,
    };
    write_run_manifest(cfg, &out, "run", Some(&summary))?;
    Ok(summary)
}

pub fn write_run_manifest(cfg: &PipelineConfig, out: &Outputs, command: &str, summary: Option<&RunSummary>) -> Result<()> {
    let mut artifacts: Vec<String> = std::fs::read_dir(&out.dir)
        .map_err(write_err(&out.dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "run_manifest.json")
        .collect();
    artifacts.sort();
    write_json(
        &out.manifest(),
        &json!({
            "tool": "envstate",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": cfg,
            "derived_seeds": {"cluster": cfg.cluster_seed()},
            "artifacts": artifacts,
            "summary": summary,
        }),
    )
}

/// Subcommand entry points: each loads what earlier stages wrote.
pub fn cmd_features(cfg: &PipelineConfig) -> Result<Value> {
    let out = Outputs::new(&cfg.output)?;
    let t = stage_features(cfg, &out)?;
    Ok(json!({"windows": t.rows.len(), "dim": t.layout.dim(), "features": out.features()}))
}

pub fn cmd_select_k(cfg: &PipelineConfig) -> Result<Value> {
    let out = Outputs::new(&cfg.output)?;
    let table = read_features(&out)?;
    let (a, _) = stage_select_k(cfg, &out, &table)?;
    Ok(json!({"chosen_k": a.chosen_k, "ranking": a.ranking, "validation": out.validation()}))
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<Value> {
    let out = Outputs::new(&cfg.output)?;
    let table = read_features(&out)?;
    let m = stage_cluster(cfg, &out, &table)?;
    Ok(json!({"k": m.k, "inertia": m.inertia, "model": out.model()}))
}

pub fn cmd_label(cfg: &PipelineConfig) -> Result<Value> {
    let out = Outputs::new(&cfg.output)?;
    let table = read_features(&out)?;
    let model = read_model(&out, &table)?;
    let (tl, a) = stage_label(cfg, &out, &table, &model)?;
    Ok(json!({"windows": tl.windows.len(), "states": a.states.len(), "baseline_agreement": a.baseline_agreement, "timeline": out.timeline()}))
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Value> {
    let out = Outputs::new(&cfg.output)?;
    let tl = read_timeline(&out)?;
    let s = stage_evaluate(cfg, &out, &tl)?;
    Ok(json!({"catalogs": s}))
}

pub fn cmd_run(cfg: &PipelineConfig) -> Result<Value> {
    let s = run(cfg)?;
    serde_json::to_value(s).map_err(|e| PipelineError::Internal(e.to_string()))
}

/// Generates a scenario into `dir` and writes a ready-to-run `pipeline.json`
/// next to it.
pub fn cmd_simulate(spec: &ScenarioSpec, dir: &Path, k_range: (usize, usize)) -> Result<Value> {
    let scenario = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(write_err(dir))?;
    let files = write_scenario(&scenario, dir)?;
    let catalogs: Vec<CatalogConfig> = files
        .catalogs
        .iter()
        .map(|(name, kind, path)| CatalogConfig {
            path: path.clone(),
            kind: *kind,
            snr_min: None,
            name: Some(name.clone()),
        })
        .collect();
    let cfg = PipelineConfig {
        manifest: files.manifest.clone(),
        flags: Some(files.flags.clone()),
        split_on_gap: false,
        dsp: DspConfig::default(),
        windowing: WindowingConfig {
            window_s: spec.window_s,
            drop_partial: true,
        },
        features: FeaturesConfig::default(),
        clustering: ClusteringConfig {
            k: None,
            k_range: Some(k_range),
            restarts: default_restarts(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            seed: spec.rng_seed,
            rank_by: default_rank_by(),
            silhouette_sample: default_silhouette_sample(),
        },
        rules: Some(files.rules.clone()),
        catalogs,
        poisson_p: false,
        group_by_label: false,
        ground_truth: Some(files.truth.clone()),
        output: PathBuf::from("out"),
    };
    write_json(&dir.join("pipeline.json"), &cfg)?;
    Ok(json!({
        "channels": scenario.batch.channels().len(),
        "samples_per_channel": scenario.batch.len(),
        "windows": scenario.truth.windows.len(),
        "events": scenario.catalogs.iter().map(|c| (c.name.clone(), c.events.len())).collect::<BTreeMap<_, _>>(),
        "config": dir.join("pipeline.json"),
    }))
}
