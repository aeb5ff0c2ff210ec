//! Synthetic multi-sensor BLRMS scenarios with injected phenomena, known
//! per-window truth and rate-modulated event catalogs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::evaluation::{write_catalog, Event, EventKind};
use crate::labeling::{format_tags, parse_tags, Phenomenon, Tag, ThresholdRule};
use crate::timeseries::{
    validate_sensor, write_segments, write_trend_file, Axis, Band, ChannelBatch, ChannelId, ChannelSeries,
    ManifestEntry, SampleInterval, TimeSegmentSet, TimeSeriesError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
}

type Result<T> = std::result::Result<T, SimError>;

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidSpec(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Time shape of an injection within its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Profile {
    /// Linear rise over the first 10%, plateau, linear decay over the last 30%.
    Transient,
    /// Edge ramps with a slow cosine modulation of the given period and depth.
    Modulation {
        #[serde(default = "default_modulation_period")]
        period_s: u64,
        #[serde(default = "default_depth")]
        depth: f64,
    },
    /// On for `duty × period_s` at the start of every period.
    Square {
        #[serde(default = "default_day")]
        period_s: u64,
        #[serde(default = "default_duty")]
        duty: f64,
    },
}

fn default_day() -> u64 {
    86_400
}
fn default_modulation_period() -> u64 {
    2 * 86_400
}
fn default_depth() -> f64 {
    0.3
}
fn default_duty() -> f64 {
    0.5
}

/// Lowest shape value inside an active interval, so that edge samples stay
/// clearly elevated.
const SHAPE_FLOOR: f64 = 0.25;

impl Profile {
    fn default_for(p: &Phenomenon) -> Profile {
        match p {
            Phenomenon::HighMicroseism => Profile::Modulation {
                period_s: default_modulation_period(),
                depth: default_depth(),
            },
            Phenomenon::HighAnthropogenic => Profile::Square {
                period_s: default_day(),
                duty: default_duty(),
            },
            _ => Profile::Transient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub phenomenon: Phenomenon,
    /// Defaults to the band the phenomenon lives in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Band>,
    /// Seconds from the scenario start.
    pub start_s: u64,
    pub duration_s: u64,
    /// Peak multiplier over the baseline.
    pub amplitude: f64,
    /// Affected sensors; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
}

impl Injection {
    pub fn band(&self) -> Result<Band> {
        match (&self.band, &self.phenomenon) {
            (Some(b), _) => Ok(*b),
            (None, Phenomenon::Earthquake) => Ok(Band::Earthquake),
            (None, Phenomenon::HighMicroseism) => Ok(Band::Microseism),
            (None, Phenomenon::HighAnthropogenic) => Ok(Band::Anthropogenic),
            (None, Phenomenon::Other(name)) => Err(invalid(format!("injection {name:?} needs an explicit band"))),
        }
    }

    pub fn profile(&self) -> Profile {
        self.profile.unwrap_or_else(|| Profile::default_for(&self.phenomenon))
    }

    fn end_s(&self) -> u64 {
        self.start_s + self.duration_s
    }

    fn affects(&self, sensor: &str) -> bool {
        self.sensors.as_ref().is_none_or(|s| s.iter().any(|x| x == sensor))
    }

    /// Active intervals in seconds from the scenario start.
    pub fn active_intervals(&self) -> Vec<(u64, u64)> {
        match self.profile() {
            Profile::Square { period_s, duty } => {
                let on = (period_s as f64 * duty).round() as u64;
                (self.start_s..self.end_s())
                    .step_by(period_s as usize)
                    .map(|s| (s, (s + on).min(self.end_s())))
                    .filter(|(s, e)| s < e)
                    .collect()
            }
            _ => vec![(self.start_s, self.end_s())],
        }
    }

    fn is_active(&self, t: f64) -> bool {
        self.active_intervals().iter().any(|&(s, e)| s as f64 <= t && t < e as f64)
    }

    /// Shape in `[0, 1]` at `t` seconds from the scenario start.
    pub fn shape(&self, t: f64) -> f64 {
        let (s, e) = (self.start_s as f64, self.end_s() as f64);
        if t < s || t >= e {
            return 0.0;
        }
        let dur = e - s;
        let u = t - s;
        let lift = |r: f64| SHAPE_FLOOR + (1.0 - SHAPE_FLOOR) * r.clamp(0.0, 1.0);
        match self.profile() {
            Profile::Transient => {
                let (rise, decay) = (0.1 * dur, 0.3 * dur);
                if u < rise {
                    lift(u / rise)
                } else if u >= dur - decay {
                    lift((dur - u) / decay)
                } else {
                    1.0
                }
            }
            Profile::Modulation { period_s, depth } => {
                let ramp = (0.1 * dur).min(3600.0);
                let edge = lift((u / ramp).min((dur - u) / ramp));
                let phase = std::f64::consts::TAU * u / period_s as f64;
                edge * (1.0 - depth * (1.0 - phase.cos()) / 2.0)
            }
            Profile::Square { period_s, duty } => {
                if u % (period_s as f64) < (period_s as f64 * duty).round() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Multiplicative factor applied to an affected channel.
    pub fn factor(&self, t: f64) -> f64 {
        1.0 + (self.amplitude - 1.0) * self.shape(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineNoise {
    pub median: f64,
    pub sigma_log10: f64,
}

impl Default for BaselineNoise {
    fn default() -> Self {
        BaselineNoise {
            median: 1.0,
            sigma_log10: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventModel {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: EventKind,
    pub background_rate_hz: f64,
    /// Rate multiplier while a phenomenon is active; several active
    /// phenomena multiply.
    #[serde(default)]
    pub multipliers: BTreeMap<Phenomenon, f64>,
}

fn default_kind() -> EventKind {
    EventKind::Glitch
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub duration_s: u64,
    #[serde(default = "one_second")]
    pub dt_s: SampleInterval,
    #[serde(default = "default_start")]
    pub start_gps: i64,
    pub sensors: Vec<String>,
    #[serde(default = "default_axes")]
    pub axes: Vec<Axis>,
    #[serde(default = "default_bands")]
    pub bands: Vec<Band>,
    pub rng_seed: u64,
    #[serde(default = "default_window")]
    pub window_s: u64,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Per-band noise keyed by band name; unlisted bands use the default.
    #[serde(default)]
    pub baseline: BTreeMap<String, BaselineNoise>,
    #[serde(default)]
    pub events: Vec<EventModel>,
    /// Observing segments in seconds from the start; the whole span when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<(u64, u64)>>,
}

fn one_second() -> SampleInterval {
    SampleInterval::ONE_SECOND
}
fn default_start() -> i64 {
    1_000_000_000
}
fn default_axes() -> Vec<Axis> {
    vec![Axis::Z]
}
fn default_bands() -> Vec<Band> {
    Band::DEFAULTS.to_vec()
}
fn default_window() -> u64 {
    60
}

impl ScenarioSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| SimError::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn noise(&self, band: &Band) -> BaselineNoise {
        self.baseline.get(&band.to_string()).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_s == 0 {
            return Err(invalid("duration_s must be positive"));
        }
        let n = self
            .dt_s
            .samples_in(self.duration_s)
            .ok_or_else(|| invalid("duration_s must be a whole number of samples"))?;
        if n == 0 {
            return Err(invalid("scenario holds no samples"));
        }
        if self.sensors.is_empty() || self.axes.is_empty() || self.bands.is_empty() {
            return Err(invalid("sensors, axes and bands must be non-empty"));
        }
        for s in &self.sensors {
            validate_sensor(s).map_err(|e| invalid(e.to_string()))?;
        }
        let unique = |v: Vec<String>| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !unique(self.sensors.clone())
            || !unique(self.axes.iter().map(|a| a.to_string()).collect())
            || !unique(self.bands.iter().map(|b| b.to_string()).collect())
        {
            return Err(invalid("sensors, axes and bands must not repeat"));
        }
        if self.window_s == 0 {
            return Err(invalid("window_s must be positive"));
        }
        for (band, noise) in &self.baseline {
            if !(noise.median.is_finite() && noise.median > 0.0 && noise.sigma_log10.is_finite() && noise.sigma_log10 >= 0.0) {
                return Err(invalid(format!("baseline for {band} needs median > 0 and sigma_log10 >= 0")));
            }
        }
        for inj in &self.injections {
            let band = inj.band()?;
            if !self.bands.contains(&band) {
                return Err(invalid(format!("injection band {band} is not simulated")));
            }
            if inj.duration_s == 0 || inj.start_s >= self.duration_s || inj.end_s() > self.duration_s {
                return Err(invalid(format!(
                    "injection [{}, {}) must lie within [0, {})",
                    inj.start_s,
                    inj.end_s(),
                    self.duration_s
                )));
            }
            if !(inj.amplitude.is_finite() && inj.amplitude > 0.0) {
                return Err(invalid("injection amplitude must be positive"));
            }
            if let Some(list) = &inj.sensors {
                if let Some(s) = list.iter().find(|s| !self.sensors.contains(s)) {
                    return Err(invalid(format!("injection names unknown sensor {s:?}")));
                }
            }
            match inj.profile() {
                Profile::Modulation { period_s, depth } if period_s < 86_400 || !(0.0..=1.0).contains(&depth) => {
                    return Err(invalid("modulation needs period_s >= 86400 and depth in [0, 1]"))
                }
                Profile::Square { period_s, duty } if period_s == 0 || !(duty > 0.0 && duty <= 1.0) => {
                    return Err(invalid("square profile needs period_s > 0 and duty in (0, 1]"))
                }
                _ => {}
            }
        }
        let mut names = BTreeSet::new();
        for ev in &self.events {
            if !names.insert(&ev.name) || ev.name.is_empty() || ev.name.contains(['/', '\\']) {
                return Err(invalid(format!("event model name {:?} must be unique and path-safe", ev.name)));
            }
            let bad_rate = |r: f64| !(r.is_finite() && r >= 0.0);
            if bad_rate(ev.background_rate_hz) || ev.multipliers.values().any(|&m| bad_rate(m)) {
                return Err(invalid("event rates and multipliers must be non-negative"));
            }
        }
        if let Some(flags) = &self.flags {
            for &(s, e) in flags {
                if s >= e || e > self.duration_s {
                    return Err(invalid(format!("flag [{s}, {e}) must be non-empty and within the span")));
                }
            }
        }
        Ok(())
    }

    fn flag_set(&self) -> Result<TimeSegmentSet> {
        let rel = self.flags.clone().unwrap_or_else(|| vec![(0, self.duration_s)]);
        let abs = rel
            .into_iter()
            .map(|(s, e)| (self.start_gps + s as i64, self.start_gps + e as i64))
            .collect();
        Ok(TimeSegmentSet::from_unsorted(abs)?)
    }

    /// Window bounds the pipeline produces with this scenario's flags and
    /// `window_s`, partial windows dropped.
    pub fn windows(&self) -> Result<Vec<(i64, i64)>> {
        let w = self.window_s as i64;
        Ok(self
            .flag_set()?
            .segments()
            .iter()
            .flat_map(|&(s, e)| (0..(e - s) / w).map(move |i| (s + i * w, s + (i + 1) * w)))
            .collect())
    }

    /// True tags of a window: every injection whose active time covers at
    /// least half of the window, at each affected sensor.
    pub fn truth_tags(&self, window: (i64, i64)) -> BTreeSet<Tag> {
        let (ws, we) = (window.0 - self.start_gps, window.1 - self.start_gps);
        let mut tags = BTreeSet::new();
        for inj in &self.injections {
            let covered: i64 = inj
                .active_intervals()
                .iter()
                .map(|&(s, e)| ((e as i64).min(we) - (s as i64).max(ws)).max(0))
                .sum();
            if 2 * covered >= we - ws {
                for sensor in self.sensors.iter().filter(|s| inj.affects(s)) {
                    tags.insert((inj.phenomenon.clone(), sensor.clone()));
                }
            }
        }
        tags
    }

    /// Phenomena active at `t` seconds from the scenario start.
    fn active_at(&self, t: f64) -> BTreeSet<&Phenomenon> {
        self.injections.iter().filter(|i| i.is_active(t)).map(|i| &i.phenomenon).collect()
    }

    /// Threshold rules at three times the baseline median of each simulated
    /// band that has a matching phenomenon.
    pub fn rules(&self) -> Vec<ThresholdRule> {
        let phen = |b: &Band| match b {
            Band::Earthquake => Some(Phenomenon::Earthquake),
            Band::Microseism => Some(Phenomenon::HighMicroseism),
            Band::Anthropogenic => Some(Phenomenon::HighAnthropogenic),
            Band::Other { .. } => None,
        };
        let mut rules: Vec<ThresholdRule> = self
            .bands
            .iter()
            .filter_map(|b| {
                let p = phen(b)?;
                ThresholdRule::new(p, *b, None, None, "mean", 3.0 * self.noise(b).median).ok()
            })
            .collect();
        for inj in &self.injections {
            if let (Phenomenon::Other(_), Ok(b)) = (&inj.phenomenon, inj.band()) {
                if !rules.iter().any(|r| r.phenomenon == inj.phenomenon) {
                    rules.extend(ThresholdRule::new(inj.phenomenon.clone(), b, None, None, "mean", 3.0 * self.noise(&b).median));
                }
            }
        }
        rules
    }
}

/// Event with the phenomena active when it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEvent {
    pub event: Event,
    pub active: BTreeSet<Phenomenon>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub windows: Vec<(i64, i64)>,
    pub tags: Vec<BTreeSet<Tag>>,
}

impl GroundTruth {
    /// Distinct tag sets numbered by first appearance.
    pub fn labels(&self) -> Vec<usize> {
        truth_labels(&self.tags)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "window_start,window_end,tags")?;
        for (&(s, e), t) in self.windows.iter().zip(&self.tags) {
            writeln!(out, "{s},{e},{}", format_tags(t))?;
        }
        Ok(())
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |line: usize, reason: String| SimError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, h)| h.trim()) != Some("window_start,window_end,tags") {
            return Err(bad(1, "expected header window_start,window_end,tags".into()));
        }
        let mut truth = GroundTruth {
            windows: Vec::new(),
            tags: Vec::new(),
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(3, ',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected 3 fields".into()));
            }
            let int = |s: &str| s.trim().parse::<i64>().map_err(|e| bad(i + 1, e.to_string()));
            truth.windows.push((int(f[0])?, int(f[1])?));
            truth.tags.push(parse_tags(f[2].trim()).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        Ok(truth)
    }
}

pub fn truth_labels(tags: &[BTreeSet<Tag>]) -> Vec<usize> {
    let mut seen: Vec<&BTreeSet<Tag>> = Vec::new();
    tags.iter()
        .map(|t| match seen.iter().position(|s| *s == t) {
            Some(i) => i,
            None => {
                seen.push(t);
                seen.len() - 1
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub name: String,
    pub kind: EventKind,
    pub events: Vec<TruthEvent>,
}

impl Catalog {
    pub fn events(&self) -> Vec<Event> {
        self.events.iter().map(|e| e.event.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub batch: ChannelBatch,
    pub flags: TimeSegmentSet,
    pub truth: GroundTruth,
    pub catalogs: Vec<Catalog>,
}

const CATALOG_STREAM: u64 = 1 << 32;

/// Generates the scenario. Each channel and each catalog draws from its own
/// seed derived from `rng_seed`, so the output does not depend on the
/// thread count.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let n = spec.dt_s.samples_in(spec.duration_s).expect("validated");
    let dt = spec.dt_s.as_secs_f64();
    let mut ids = Vec::new();
    for sensor in &spec.sensors {
        for &axis in &spec.axes {
            for &band in &spec.bands {
                ids.push(ChannelId::new(sensor.clone(), axis, band)?);
            }
        }
    }
    let channels = ids
        .into_par_iter()
        .enumerate()
        .map(|(ci, id)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, ci as u64));
            let noise = spec.noise(&id.band);
            let hits: Vec<&Injection> = spec
                .injections
                .iter()
                .filter(|inj| inj.band().ok() == Some(id.band) && inj.affects(&id.sensor))
                .collect();
            let values = (0..n)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let t = i as f64 * dt;
                    let m: f64 = hits.iter().map(|inj| inj.factor(t)).product();
                    noise.median * 10f64.powf(noise.sigma_log10 * z) * m
                })
                .collect();
            ChannelSeries::new(id, spec.start_gps, spec.dt_s, values)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let batch = ChannelBatch::new(channels)?;

    let windows = spec.windows()?;
    let tags = windows.iter().map(|&w| spec.truth_tags(w)).collect();
    let catalogs = spec
        .events
        .iter()
        .enumerate()
        .map(|(i, model)| draw_events(spec, model, derive_seed(spec.rng_seed, CATALOG_STREAM + i as u64)))
        .collect();
    Ok(Scenario {
        spec: spec.clone(),
        batch,
        flags: spec.flag_set()?,
        truth: GroundTruth { windows, tags },
        catalogs,
    })
}

/// Inhomogeneous Poisson draw by thinning a homogeneous process at the peak
/// rate.
fn draw_events(spec: &ScenarioSpec, model: &EventModel, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate_at = |active: &BTreeSet<&Phenomenon>| -> f64 {
        model.background_rate_hz * active.iter().map(|p| model.multipliers.get(*p).copied().unwrap_or(1.0)).product::<f64>()
    };
    let peak = model.background_rate_hz * model.multipliers.values().map(|m| m.max(1.0)).product::<f64>();
    let mut events = Vec::new();
    if peak > 0.0 {
        let gap = Exp::new(peak).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= spec.duration_s as f64 {
                break;
            }
            let accept: f64 = rng.random();
            let active = spec.active_at(t);
            if accept * peak < rate_at(&active) {
                // Pareto-tailed SNR with minimum 5
                let u: f64 = rng.random();
                let snr = 5.0 / (1.0 - u).sqrt();
                let label = if active.is_empty() {
                    "background".to_string()
                } else {
                    active.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
                };
                events.push(TruthEvent {
                    event: Event {
                        time: spec.start_gps as f64 + t,
                        kind: model.kind,
                        snr: Some(snr),
                        class_name: Some(label),
                    },
                    active: active.into_iter().cloned().collect(),
                });
            }
        }
    }
    Catalog {
        name: model.name.clone(),
        kind: model.kind,
        events,
    }
}

/// Paths of the files written for a scenario, relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFiles {
    pub manifest: PathBuf,
    pub flags: PathBuf,
    pub truth: PathBuf,
    pub rules: PathBuf,
    pub catalogs: Vec<(String, EventKind, PathBuf)>,
}

/// Writes trend CSVs, the channel manifest, flags, truth, rules and one
/// catalog per event model under `dir`.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<ScenarioFiles> {
    let trends = dir.join("trends");
    std::fs::create_dir_all(&trends).map_err(io_err(&trends))?;
    let entries: Vec<ManifestEntry> = scenario
        .batch
        .channels()
        .par_iter()
        .map(|c| {
            let name = format!("{}_{}_{}.csv", c.id.sensor, c.id.axis, c.id.band);
            write_trend_file(c, &trends.join(&name))?;
            Ok(ManifestEntry {
                file: PathBuf::from("trends").join(name),
                sensor: c.id.sensor.clone(),
                axis: c.id.axis,
                band: c.id.band.into(),
                dt_s: (c.dt != SampleInterval::ONE_SECOND).then_some(c.dt),
            })
        })
        .collect::<Result<_>>()?;

    let files = ScenarioFiles {
        manifest: "manifest.json".into(),
        flags: "flags.csv".into(),
        truth: "truth.csv".into(),
        rules: "rules.json".into(),
        catalogs: scenario
            .catalogs
            .iter()
            .map(|c| (c.name.clone(), c.kind, PathBuf::from(format!("catalog_{}.csv", c.name))))
            .collect(),
    };
    let write_with = |rel: &Path, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(rel);
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        f(&mut out).and_then(|_| out.flush()).map_err(io_err(&path))
    };
    let manifest = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    let rules = serde_json::to_string_pretty(&scenario.spec.rules()).expect("rules serialize");
    write_with(&files.manifest, &|out| writeln!(out, "{manifest}"))?;
    write_with(&files.rules, &|out| writeln!(out, "{rules}"))?;
    write_with(&files.flags, &|out| write_segments(&scenario.flags, out))?;
    write_with(&files.truth, &|out| scenario.truth.write_csv(out))?;
    for (cat, (_, _, rel)) in scenario.catalogs.iter().zip(&files.catalogs) {
        write_with(rel, &|out| write_catalog(&cat.events(), out))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(duration_s: u64, injections: Vec<Injection>) -> ScenarioSpec {
        ScenarioSpec {
            duration_s,
            dt_s: SampleInterval::ONE_SECOND,
            start_gps: 1_000_000_000,
            sensors: vec!["ETMX".into(), "ETMY".into()],
            axes: vec![Axis::Z],
            bands: Band::DEFAULTS.to_vec(),
            rng_seed: 7,
            window_s: 60,
            injections,
            baseline: BTreeMap::new(),
            events: vec![],
            flags: None,
        }
    }

    fn quake(start_s: u64, duration_s: u64, amplitude: f64) -> Injection {
        Injection {
            phenomenon: Phenomenon::Earthquake,
            band: None,
            start_s,
            duration_s,
            amplitude,
            sensors: None,
            profile: None,
        }
    }

    #[test]
    fn no_injections_all_quiet() {
        let sc = generate(&spec(3600, vec![])).unwrap();
        assert_eq!(sc.truth.windows.len(), 60);
        assert!(sc.truth.tags.iter().all(BTreeSet::is_empty));
        assert_eq!(sc.batch.channels().len(), 6);
        assert!(sc.batch.channels().iter().flat_map(|c| c.values()).all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn earthquake_window_tags() {
        let sc = generate(&spec(1200, vec![quake(100, 300, 10.0)])).unwrap();
        for (&(s, e), tags) in sc.truth.windows.iter().zip(&sc.truth.tags) {
            let (s, e) = (s - 1_000_000_000, e - 1_000_000_000);
            let overlap = (e.min(400) - s.max(100)).max(0);
            assert_eq!(!tags.is_empty(), 2 * overlap >= 60, "window [{s},{e})");
            if !tags.is_empty() {
                assert_eq!(tags.len(), 2);
            }
        }
        // [60,120) overlaps 20 s, [120,180) fully, [360,420) overlaps 40 s
        let tagged: Vec<i64> = sc
            .truth
            .windows
            .iter()
            .zip(&sc.truth.tags)
            .filter(|(_, t)| !t.is_empty())
            .map(|(w, _)| w.0 - 1_000_000_000)
            .collect();
        assert_eq!(tagged, vec![120, 180, 240, 300, 360]);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let mut s = spec(900, vec![quake(100, 300, 10.0)]);
        s.events.push(EventModel {
            name: "glitch".into(),
            kind: EventKind::Glitch,
            background_rate_hz: 0.05,
            multipliers: BTreeMap::from([(Phenomenon::Earthquake, 5.0)]),
        });
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.catalogs[0].events, b.catalogs[0].events);
        s.rng_seed += 1;
        assert_ne!(generate(&s).unwrap().batch, a.batch);
    }

    #[test]
    fn profiles() {
        let q = quake(1000, 1000, 10.0);
        assert_eq!(q.shape(999.0), 0.0);
        assert_eq!(q.shape(1000.0), SHAPE_FLOOR);
        assert_eq!(q.shape(1500.0), 1.0);
        assert_eq!(q.shape(2000.0), 0.0);
        assert!((q.factor(1500.0) - 10.0).abs() < 1e-12);

        let sq = Injection {
            phenomenon: Phenomenon::HighAnthropogenic,
            duration_s: 3 * 86_400,
            start_s: 0,
            ..quake(0, 1, 10.0)
        };
        assert_eq!(sq.active_intervals(), vec![(0, 43_200), (86_400, 129_600), (172_800, 216_000)]);
        assert_eq!(sq.shape(43_199.0), 1.0);
        assert_eq!(sq.shape(43_200.0), 0.0);

        let ms = Injection {
            phenomenon: Phenomenon::HighMicroseism,
            duration_s: 4 * 86_400,
            ..quake(0, 1, 10.0)
        };
        for t in (0..4 * 86_400).step_by(977) {
            let v = ms.shape(t as f64);
            assert!((SHAPE_FLOOR * 0.7 - 1e-12..=1.0).contains(&v));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec(0, vec![])).is_err());
        assert!(generate(&spec(600, vec![quake(500, 200, 10.0)])).is_err());
        assert!(generate(&spec(600, vec![quake(0, 100, 0.0)])).is_err());
        let mut s = spec(600, vec![]);
        s.sensors.push("ETMX".into());
        assert!(generate(&s).is_err());
        let mut s = spec(600, vec![]);
        s.flags = Some(vec![(100, 50)]);
        assert!(generate(&s).is_err());
    }

    #[test]
    fn flags_shape_truth_windows() {
        let mut s = spec(3600, vec![]);
        s.flags = Some(vec![(0, 1000), (2000, 3000)]);
        let sc = generate(&s).unwrap();
        assert_eq!(sc.truth.windows.len(), 16 + 16);
        assert_eq!(sc.truth.windows[16], (1_000_002_000, 1_000_002_060));
    }

    #[test]
    fn write_and_read_back() {
        let mut s = spec(600, vec![quake(100, 300, 10.0)]);
        s.events.push(EventModel {
            name: "glitch".into(),
            kind: EventKind::Glitch,
            background_rate_hz: 0.05,
            multipliers: BTreeMap::new(),
        });
        let sc = generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_scenario(&sc, dir.path()).unwrap();
        let entries = crate::timeseries::load_manifest(&dir.path().join(&files.manifest)).unwrap();
        assert_eq!(entries.len(), 6);
        for (e, c) in entries.iter().zip(sc.batch.channels()) {
            let back = crate::timeseries::load_trend_file(&e.file, e.channel_id().unwrap(), e.sample_interval()).unwrap();
            assert_eq!(&back, c);
        }
        let truth = GroundTruth::read_csv_file(&dir.path().join(&files.truth)).unwrap();
        assert_eq!(truth, sc.truth);
        let rules = crate::labeling::load_rules(&dir.path().join(&files.rules)).unwrap();
        assert_eq!(rules.len(), 3);
        assert!(rules.iter().all(|r| r.threshold == 3.0));
        let cat = crate::evaluation::load_catalog(&dir.path().join(&files.catalogs[0].2), EventKind::Glitch, None).unwrap();
        assert_eq!(cat, sc.catalogs[0].events());
    }
}
