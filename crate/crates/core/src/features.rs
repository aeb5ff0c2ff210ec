//! Non-overlapping windows over an aligned batch, per-window statistics and
//! feature standardization.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{ChannelBatch, ChannelId};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("window of {window_s} s exceeds batch span of {span_s} s")]
    WindowTooLong { window_s: u64, span_s: f64 },
    #[error("invalid windowing: {0}")]
    InvalidWindowing(String),
    #[error("window has an empty channel slice")]
    EmptyWindow,
    #[error("feature {0:?} produced a non-finite value")]
    NonFinite(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 2 rows to fit a standardizer, got {0}")]
    DegenerateInput(usize),
    #[error("log transform needs positive entries, found {0}")]
    NonPositiveForLog(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batches do not share a channel layout")]
    LayoutMismatch,
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingConfig {
    /// Window length in seconds.
    pub window_s: u64,
    #[serde(default = "default_true")]
    pub drop_partial: bool,
}

fn default_true() -> bool {
    true
}

impl Default for WindowingConfig {
    fn default() -> Self {
        WindowingConfig {
            window_s: 60,
            drop_partial: true,
        }
    }
}

/// One window: bounds plus a sample slice per channel.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub start_gps: i64,
    pub end_gps: i64,
    pub slices: Vec<&'a [f64]>,
}

/// Tiles the batch with `window_s` windows from its start.
pub fn segment_windows<'a>(batch: &'a ChannelBatch, cfg: &WindowingConfig) -> Result<Vec<Window<'a>>> {
    let dt = batch.dt();
    let per = dt.samples_in(cfg.window_s).ok_or_else(|| {
        FeatureError::InvalidWindowing(format!("{} s is not a whole number of {dt} s samples", cfg.window_s))
    })?;
    if per < 2 {
        return Err(FeatureError::InvalidWindowing(format!(
            "window of {} s holds fewer than 2 samples",
            cfg.window_s
        )));
    }
    if per > batch.len() {
        return Err(FeatureError::WindowTooLong {
            window_s: cfg.window_s,
            span_s: batch.span_secs(),
        });
    }
    let start = batch.start_gps();
    let full = batch.len() / per;
    let mut windows: Vec<Window<'a>> = (0..full)
        .map(|w| Window {
            start_gps: start + (w as u64 * cfg.window_s) as i64,
            end_gps: start + ((w as u64 + 1) * cfg.window_s) as i64,
            slices: batch
                .channels()
                .iter()
                .map(|c| &c.values()[w * per..(w + 1) * per])
                .collect(),
        })
        .collect();
    let rest = batch.len() - full * per;
    if !cfg.drop_partial && rest > 0 {
        let ticks = rest as u128 * dt.num() as u128;
        let secs = ticks.div_ceil(dt.den() as u128) as i64;
        let wstart = start + (full as u64 * cfg.window_s) as i64;
        windows.push(Window {
            start_gps: wstart,
            end_gps: wstart + secs,
            slices: batch.channels().iter().map(|c| &c.values()[full * per..]).collect(),
        });
    }
    Ok(windows)
}

/// A named per-window statistic.
#[derive(Clone, Copy)]
pub struct Feature {
    name: &'static str,
    compute: fn(&[f64]) -> f64,
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Feature").field(&self.name).finish()
    }
}

impl PartialEq for Feature {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn mean(x: &[f64]) -> f64 {
    if is_constant(x) {
        return x[0];
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
fn std_dev(x: &[f64]) -> f64 {
    if is_constant(x) {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

impl Feature {
    pub const MEAN: Feature = Feature {
        name: "mean",
        compute: mean,
    };
    pub const STD: Feature = Feature {
        name: "std",
        compute: std_dev,
    };

    /// Features that ship with the crate.
    pub const BUILTIN: &'static [Feature] = &[Feature::MEAN, Feature::STD];

    /// A user-defined statistic. Names must not contain `__` or `,`.
    pub fn custom(name: &'static str, compute: fn(&[f64]) -> f64) -> Result<Feature> {
        if name.is_empty() || name.contains("__") || name.contains(',') {
            return Err(FeatureError::InvalidSpec(format!("bad feature name {name:?}")));
        }
        Ok(Feature { name, compute })
    }

    pub fn by_name(name: &str) -> Result<Feature> {
        Feature::BUILTIN
            .iter()
            .find(|f| f.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| FeatureError::UnknownFeature(name.to_string()))
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn compute(&self, x: &[f64]) -> f64 {
        (self.compute)(x)
    }
}

/// Ordered, duplicate-free list of per-channel features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    features: Vec<Feature>,
}

impl FeatureSpec {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        if features.is_empty() {
            return Err(FeatureError::InvalidSpec("no features".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if features[..i].contains(f) {
                return Err(FeatureError::InvalidSpec(format!("duplicate feature {:?}", f.name)));
            }
        }
        Ok(FeatureSpec { features })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        FeatureSpec::new(names.iter().map(|n| Feature::by_name(n.as_ref())).collect::<Result<_>>()?)
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.to_string()).collect()
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            features: vec![Feature::MEAN, Feature::STD],
        }
    }
}

/// Column layout of a feature vector: channel-major, features in spec order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub channels: Vec<ChannelId>,
    pub features: Vec<String>,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.channels.len() * self.features.len()
    }

    pub fn index(&self, channel: usize, feature: usize) -> usize {
        channel * self.features.len() + feature
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.eq_ignore_ascii_case(name))
    }

    /// Column names `<channel>__<feature>`.
    pub fn column_names(&self) -> Vec<String> {
        self.channels
            .iter()
            .flat_map(|c| self.features.iter().map(move |f| format!("{c}__{f}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    pub window_start: i64,
    pub window_end: i64,
    pub vector: Vec<f64>,
}

pub fn extract_features(window: &Window<'_>, spec: &FeatureSpec) -> Result<WindowFeatures> {
    let mut vector = Vec::with_capacity(window.slices.len() * spec.features.len());
    for slice in &window.slices {
        if slice.is_empty() {
            return Err(FeatureError::EmptyWindow);
        }
        for f in &spec.features {
            let v = f.compute(slice);
            if !v.is_finite() {
                return Err(FeatureError::NonFinite(f.name.to_string()));
            }
            vector.push(v);
        }
    }
    Ok(WindowFeatures {
        window_start: window.start_gps,
        window_end: window.end_gps,
        vector,
    })
}

/// Feature rows for every window of every batch, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub layout: FeatureLayout,
    pub rows: Vec<WindowFeatures>,
}

impl FeatureTable {
    /// Windows each batch and extracts features. Batches must share channel
    /// ids in the same order.
    pub fn extract(batches: &[ChannelBatch], cfg: &WindowingConfig, spec: &FeatureSpec) -> Result<Self> {
        let first = batches.first().ok_or(FeatureError::LayoutMismatch)?;
        let channels = first.ids();
        let mut rows = Vec::new();
        for b in batches {
            if b.ids() != channels {
                return Err(FeatureError::LayoutMismatch);
            }
            let windows = match segment_windows(b, cfg) {
                Ok(w) => w,
                // sub-batches shorter than a window contribute nothing
                Err(FeatureError::WindowTooLong { .. }) if batches.len() > 1 => continue,
                Err(e) => return Err(e),
            };
            let mut part: Vec<WindowFeatures> = windows
                .par_iter()
                .map(|w| extract_features(w, spec))
                .collect::<Result<_>>()?;
            rows.append(&mut part);
        }
        rows.sort_by_key(|r| r.window_start);
        Ok(FeatureTable {
            layout: FeatureLayout {
                channels,
                features: spec.names(),
            },
            rows,
        })
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.vector.as_slice()).collect()
    }

    pub fn bounds(&self) -> Vec<(i64, i64)> {
        self.rows.iter().map(|r| (r.window_start, r.window_end)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["window_start".to_string(), "window_end".to_string()];
        header.extend(self.layout.column_names());
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            write!(out, "{},{}", r.window_start, r.window_end)?;
            for v in &r.vector {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let io = |source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_csv(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let io = |source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let malformed = |line: usize, reason: String| FeatureError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| malformed(1, "empty file".into()))?
            .map_err(io)?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "window_start" || cols[1] != "window_end" {
            return Err(malformed(1, "expected `window_start,window_end,...` header".into()));
        }
        let layout = parse_layout(&cols[2..]).map_err(|r| malformed(1, r))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(malformed(i + 2, format!("expected {} fields", cols.len())));
            }
            let bad = |f: &str| malformed(i + 2, format!("bad number {f:?}"));
            let window_start = fields[0].parse().map_err(|_| bad(fields[0]))?;
            let window_end = fields[1].parse().map_err(|_| bad(fields[1]))?;
            let vector = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(f)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(WindowFeatures {
                window_start,
                window_end,
                vector,
            });
        }
        Ok(FeatureTable { layout, rows })
    }
}

fn parse_layout(cols: &[&str]) -> std::result::Result<FeatureLayout, String> {
    let mut channels: Vec<ChannelId> = Vec::new();
    let mut features: Vec<String> = Vec::new();
    for col in cols {
        let (ch, feat) = col
            .rsplit_once("__")
            .ok_or_else(|| format!("column {col:?} is not <channel>__<feature>"))?;
        let ch: ChannelId = ch.parse().map_err(|e| format!("{e}"))?;
        if channels.last() != Some(&ch) {
            channels.push(ch);
        }
        if channels.len() == 1 {
            features.push(feat.to_string());
        }
    }
    let layout = FeatureLayout { channels, features };
    if layout.column_names() != cols {
        return Err("columns are not in channel-major order with a common feature list".into());
    }
    Ok(layout)
}

/// Per-dimension affine standardization, optionally after `log10`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub log_transform: bool,
}

/// Dimensions with a spread below this keep unit scale.
pub const MIN_SCALE: f64 = 1e-12;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            log_transform: false,
        }
    }

    pub fn fit<R: AsRef<[f64]>>(rows: &[R], log_transform: bool) -> Result<Self> {
        if rows.len() < 2 {
            return Err(FeatureError::DegenerateInput(rows.len()));
        }
        let dim = rows[0].as_ref().len();
        let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(FeatureError::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.push(if log_transform { log10_all(r)? } else { r.to_vec() });
        }
        let n = data.len() as f64;
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for d in 0..dim {
            let column: Vec<f64> = data.iter().map(|r| r[d]).collect();
            shift[d] = mean(&column);
            let var = column.iter().map(|v| (v - shift[d]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            scale[d] = if sd < MIN_SCALE { 1.0 } else { sd };
        }
        Ok(Standardizer {
            shift,
            scale,
            log_transform,
        })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            })
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let x = if self.log_transform { log10_all(x)? } else { x.to_vec() };
        Ok(x
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, k))| (v - s) / k)
            .collect())
    }

    /// Maps a standardized vector back to raw units.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, k))| {
                let y = v * k + s;
                if self.log_transform {
                    10f64.powf(y)
                } else {
                    y
                }
            })
            .collect())
    }
}

fn log10_all(x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .map(|&v| if v > 0.0 { Ok(v.log10()) } else { Err(FeatureError::NonPositiveForLog(v)) })
        .collect()
}
