//! Trend channel data: identifiers, uniformly sampled series, time segment
//! sets, batch alignment and observing-mode masking.
//!
//! Sample `i` of a series sits at `start_gps + i * dt`. Times are handled in
//! integer "ticks" of `1 / dt.den` seconds so month-long spans never drift.
//! Every interval is half-open, `[start, end)`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty file")]
    EmptyFile { path: PathBuf },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: non-uniform sampling (expected offset {expected} s, found {found} s)")]
    NonUniformSampling {
        path: PathBuf,
        line: usize,
        expected: f64,
        found: f64,
    },
    #[error("series spans do not overlap")]
    NoOverlap,
    #[error("mixed sample intervals: {0} vs {1}")]
    MixedSampleRate(SampleInterval, SampleInterval),
    #[error("series start times are not on a common sample grid")]
    GridMismatch,
    #[error("invalid time segment [{0}, {1})")]
    InvalidSegment(i64, i64),
    #[error("invalid channel id: {0}")]
    InvalidChannelId(String),
    #[error("invalid sample interval: {0}")]
    InvalidSampleInterval(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, TimeSeriesError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TimeSeriesError + '_ {
    move |source| TimeSeriesError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        })
    }
}

impl FromStr for Axis {
    type Err = TimeSeriesError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Axis::X),
            "Y" | "y" => Ok(Axis::Y),
            "Z" | "z" => Ok(Axis::Z),
            _ => Err(TimeSeriesError::InvalidChannelId(format!("unknown axis {s:?}"))),
        }
    }
}

/// Frequency band a BLRMS channel was band-limited to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Band {
    /// 0.03-0.1 Hz.
    Earthquake,
    /// 0.1-0.3 Hz.
    Microseism,
    /// 1-3 Hz.
    Anthropogenic,
    Other { low_hz: f64, high_hz: f64 },
}

impl Band {
    pub const DEFAULTS: [Band; 3] = [Band::Earthquake, Band::Microseism, Band::Anthropogenic];

    pub fn other(low_hz: f64, high_hz: f64) -> Result<Band> {
        if low_hz.is_finite() && high_hz.is_finite() && 0.0 < low_hz && low_hz < high_hz {
            Ok(Band::Other { low_hz, high_hz })
        } else {
            Err(TimeSeriesError::InvalidChannelId(format!(
                "band edges must satisfy 0 < low < high, got {low_hz}-{high_hz}"
            )))
        }
    }

    /// `(low_hz, high_hz)` edges.
    pub fn edges(&self) -> (f64, f64) {
        match *self {
            Band::Earthquake => (0.03, 0.1),
            Band::Microseism => (0.1, 0.3),
            Band::Anthropogenic => (1.0, 3.0),
            Band::Other { low_hz, high_hz } => (low_hz, high_hz),
        }
    }
}

impl Eq for Band {}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::Earthquake => f.write_str("earthquake"),
            Band::Microseism => f.write_str("microseism"),
            Band::Anthropogenic => f.write_str("anthropogenic"),
            Band::Other { low_hz, high_hz } => write!(f, "{low_hz}-{high_hz}"),
        }
    }
}

impl FromStr for Band {
    type Err = TimeSeriesError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "earthquake" => return Ok(Band::Earthquake),
            "microseism" => return Ok(Band::Microseism),
            "anthropogenic" => return Ok(Band::Anthropogenic),
            _ => {}
        }
        let bad = || TimeSeriesError::InvalidChannelId(format!("unknown band {s:?}"));
        let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        Band::other(lo, hi)
    }
}

impl TryFrom<String> for Band {
    type Error = TimeSeriesError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Band> for String {
    fn from(b: Band) -> String {
        b.to_string()
    }
}

/// Channel identity: sensor location, axis and band.
///
/// The canonical string form is `SENSOR:AXIS:BAND`, e.g. `ETMX:Z:microseism`
/// or `HAM5:X:0.3-1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelId {
    pub sensor: String,
    pub axis: Axis,
    pub band: Band,
}

impl ChannelId {
    pub fn new(sensor: impl Into<String>, axis: Axis, band: Band) -> Result<Self> {
        let sensor = sensor.into();
        validate_sensor(&sensor)?;
        Ok(ChannelId { sensor, axis, band })
    }
}

pub(crate) fn validate_sensor(sensor: &str) -> Result<()> {
    let ok = !sensor.is_empty()
        && !sensor.contains("__")
        && !sensor
            .chars()
            .any(|c| c == ':' || c == ',' || c == ';' || c == '@' || c.is_whitespace());
    if ok {
        Ok(())
    } else {
        Err(TimeSeriesError::InvalidChannelId(format!(
            "sensor name {sensor:?} must be non-empty without whitespace, ':', ',', ';', '@' or '__'"
        )))
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.sensor, self.axis, self.band)
    }
}

impl FromStr for ChannelId {
    type Err = TimeSeriesError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [sensor, axis, band] => ChannelId::new(*sensor, axis.parse()?, band.parse()?),
            _ => Err(TimeSeriesError::InvalidChannelId(s.to_string())),
        }
    }
}

impl TryFrom<String> for ChannelId {
    type Error = TimeSeriesError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ChannelId> for String {
    fn from(c: ChannelId) -> String {
        c.to_string()
    }
}

/// Positive rational sample interval `num / den` seconds, kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SampleInterval {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl SampleInterval {
    pub const ONE_SECOND: SampleInterval = SampleInterval { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(TimeSeriesError::InvalidSampleInterval(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(SampleInterval {
            num: num / g,
            den: den / g,
        })
    }

    pub fn seconds(num: u64) -> Result<Self> {
        Self::new(num, 1)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_whole_seconds(&self) -> bool {
        self.den == 1
    }

    /// Number of samples covering `seconds`, if that is an exact integer.
    pub fn samples_in(&self, seconds: u64) -> Option<usize> {
        let ticks = seconds as u128 * self.den as u128;
        (ticks % self.num as u128 == 0).then(|| (ticks / self.num as u128) as usize)
    }
}

impl fmt::Display for SampleInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for SampleInterval {
    type Err = TimeSeriesError;

    /// Accepts `"1"`, `"1/16"` or a finite decimal such as `"0.0625"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || TimeSeriesError::InvalidSampleInterval(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return SampleInterval::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac)).ok_or_else(bad)?;
        SampleInterval::new(num, den)
    }
}

impl TryFrom<String> for SampleInterval {
    type Error = TimeSeriesError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SampleInterval> for String {
    fn from(s: SampleInterval) -> String {
        s.to_string()
    }
}

/// Uniformly sampled series for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub id: ChannelId,
    pub start_gps: i64,
    pub dt: SampleInterval,
    values: Vec<f64>,
}

impl ChannelSeries {
    pub fn new(id: ChannelId, start_gps: i64, dt: SampleInterval, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(TimeSeriesError::InvalidSeries(format!("{id}: empty series")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TimeSeriesError::InvalidSeries(format!(
                "{id}: non-finite value at sample {i}"
            )));
        }
        Ok(ChannelSeries {
            id,
            start_gps,
            dt,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Duration covered by the samples, in seconds.
    pub fn span_secs(&self) -> f64 {
        self.values.len() as f64 * self.dt.as_secs_f64()
    }

    fn start_ticks(&self) -> i128 {
        self.start_gps as i128 * self.dt.den as i128
    }

    fn end_ticks(&self) -> i128 {
        self.start_ticks() + self.values.len() as i128 * self.dt.num as i128
    }

    /// Samples `[from, to)` as a new series. Panics if the range is empty,
    /// out of bounds, or would start off the integer-second grid.
    pub(crate) fn slice(&self, from: usize, to: usize) -> ChannelSeries {
        assert!(from < to && to <= self.values.len());
        let ticks = self.start_ticks() + from as i128 * self.dt.num as i128;
        assert_eq!(ticks % self.dt.den as i128, 0, "slice start off the second grid");
        ChannelSeries {
            id: self.id.clone(),
            start_gps: (ticks / self.dt.den as i128) as i64,
            dt: self.dt,
            values: self.values[from..to].to_vec(),
        }
    }
}

/// Sorted, non-overlapping half-open GPS second intervals.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<(i64, i64)>", into = "Vec<(i64, i64)>")]
pub struct TimeSegmentSet {
    segments: Vec<(i64, i64)>,
}

impl TimeSegmentSet {
    pub fn new(segments: Vec<(i64, i64)>) -> Result<Self> {
        for &(s, e) in &segments {
            if s >= e {
                return Err(TimeSeriesError::InvalidSegment(s, e));
            }
        }
        for w in segments.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(TimeSeriesError::InvalidSegment(w[1].0, w[1].1));
            }
        }
        Ok(TimeSegmentSet { segments })
    }

    /// Builds a set from arbitrary intervals, sorting and merging any that
    /// overlap or touch.
    pub fn from_unsorted(mut segments: Vec<(i64, i64)>) -> Result<Self> {
        for &(s, e) in &segments {
            if s >= e {
                return Err(TimeSeriesError::InvalidSegment(s, e));
            }
        }
        segments.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(segments.len());
        for (s, e) in segments {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Ok(TimeSegmentSet { segments: merged })
    }

    pub fn segments(&self) -> &[(i64, i64)] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> i64 {
        self.segments.iter().map(|(s, e)| e - s).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        let idx = self.segments.partition_point(|&(_, e)| (e as f64) <= t);
        self.segments
            .get(idx)
            .is_some_and(|&(s, e)| s as f64 <= t && t < e as f64)
    }

    pub fn intersect(&self, other: &TimeSegmentSet) -> TimeSegmentSet {
        let (a, b) = (&self.segments, &other.segments);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if lo < hi {
                out.push((lo, hi));
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        TimeSegmentSet { segments: out }
    }
}

impl TryFrom<Vec<(i64, i64)>> for TimeSegmentSet {
    type Error = TimeSeriesError;
    fn try_from(v: Vec<(i64, i64)>) -> Result<Self> {
        TimeSegmentSet::new(v)
    }
}

impl From<TimeSegmentSet> for Vec<(i64, i64)> {
    fn from(s: TimeSegmentSet) -> Self {
        s.segments
    }
}

/// Channels sharing identical start time, sample interval and length.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBatch {
    channels: Vec<ChannelSeries>,
}

impl ChannelBatch {
    /// Wraps already aligned series; fails unless all share start, dt and length.
    pub fn new(channels: Vec<ChannelSeries>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| TimeSeriesError::InvalidSeries("batch needs at least one channel".into()))?;
        for c in &channels[1..] {
            if c.dt != first.dt {
                return Err(TimeSeriesError::MixedSampleRate(first.dt, c.dt));
            }
            if c.start_gps != first.start_gps || c.len() != first.len() {
                return Err(TimeSeriesError::InvalidSeries(format!(
                    "{} is not aligned with {}",
                    c.id, first.id
                )));
            }
        }
        Ok(ChannelBatch { channels })
    }

    pub fn channels(&self) -> &[ChannelSeries] {
        &self.channels
    }

    pub fn ids(&self) -> Vec<ChannelId> {
        self.channels.iter().map(|c| c.id.clone()).collect()
    }

    pub fn start_gps(&self) -> i64 {
        self.channels[0].start_gps
    }

    pub fn dt(&self) -> SampleInterval {
        self.channels[0].dt
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span_secs(&self) -> f64 {
        self.channels[0].span_secs()
    }

    fn slice(&self, from: usize, to: usize) -> ChannelBatch {
        ChannelBatch {
            channels: self.channels.iter().map(|c| c.slice(from, to)).collect(),
        }
    }
}

/// Crops every series to the maximal common time span.
pub fn align_batch(series: Vec<ChannelSeries>) -> Result<ChannelBatch> {
    let first = series
        .first()
        .ok_or_else(|| TimeSeriesError::InvalidSeries("nothing to align".into()))?;
    let dt = first.dt;
    let origin = first.start_ticks();
    for s in &series {
        if s.dt != dt {
            return Err(TimeSeriesError::MixedSampleRate(dt, s.dt));
        }
        if (s.start_ticks() - origin).rem_euclid(dt.num as i128) != 0 {
            return Err(TimeSeriesError::GridMismatch);
        }
    }
    let lo = series.iter().map(ChannelSeries::start_ticks).max().unwrap();
    let hi = series.iter().map(ChannelSeries::end_ticks).min().unwrap();
    if lo >= hi {
        return Err(TimeSeriesError::NoOverlap);
    }
    let len = ((hi - lo) / dt.num as i128) as usize;
    let channels = series
        .iter()
        .map(|s| {
            let from = ((lo - s.start_ticks()) / dt.num as i128) as usize;
            s.slice(from, from + len)
        })
        .collect();
    Ok(ChannelBatch { channels })
}

/// Restricts a batch to the flagged segments, one sub-batch per intersection.
/// Samples outside the flags are dropped.
pub fn mask_to_segments(batch: &ChannelBatch, flags: &TimeSegmentSet) -> Vec<ChannelBatch> {
    let dt = batch.dt();
    let (num, den) = (dt.num as i128, dt.den as i128);
    let b0 = batch.channels[0].start_ticks();
    let b1 = batch.channels[0].end_ticks();
    let mut out = Vec::new();
    for &(s, e) in flags.segments() {
        let lo = (s as i128 * den).max(b0);
        let hi = (e as i128 * den).min(b1);
        if lo >= hi {
            continue;
        }
        // first/last sample indices with time in [lo, hi)
        let mut from = (lo - b0 + num - 1).div_euclid(num);
        let to = (hi - b0 + num - 1).div_euclid(num);
        // sub-batches must start on a whole GPS second
        while from < to && (b0 + from * num) % den != 0 {
            from += 1;
        }
        if from < to {
            out.push(batch.slice(from as usize, to as usize));
        }
    }
    out
}

struct TimeStamp {
    int: i64,
    frac: f64,
}

fn parse_gps(field: &str) -> Option<TimeStamp> {
    let field = field.trim();
    let (int, frac) = field.split_once('.').unwrap_or((field, ""));
    let int: i64 = int.parse().ok()?;
    if int < 0 && !frac.is_empty() {
        return None;
    }
    let frac = if frac.is_empty() {
        0.0
    } else {
        if !frac.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        format!("0.{frac}").parse().ok()?
    };
    Some(TimeStamp { int, frac })
}

struct TrendRow {
    line: usize,
    time: TimeStamp,
    value: f64,
}

fn read_trend_rows(path: &Path) -> Result<Vec<TrendRow>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        None => return Err(TimeSeriesError::EmptyFile { path: path.into() }),
        Some(h) => h.map_err(io_err(path))?,
    };
    if header.trim().trim_start_matches('\u{feff}') != "gps_time,value" {
        return Err(TimeSeriesError::MalformedRow {
            path: path.into(),
            line: 1,
            reason: format!("expected header `gps_time,value`, found {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TimeSeriesError::MalformedRow {
            path: path.into(),
            line: line_no,
            reason,
        };
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| malformed("expected two fields".into()))?;
        let time = parse_gps(t).ok_or_else(|| malformed(format!("bad gps_time {t:?}")))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad value {v:?}")))?;
        if !value.is_finite() {
            return Err(malformed(format!("non-finite value {v:?}")));
        }
        rows.push(TrendRow {
            line: line_no,
            time,
            value,
        });
    }
    if rows.is_empty() {
        return Err(TimeSeriesError::EmptyFile { path: path.into() });
    }
    rows.sort_by(|a, b| {
        a.time
            .int
            .cmp(&b.time.int)
            .then(a.time.frac.total_cmp(&b.time.frac))
    });
    Ok(rows)
}

fn offset_secs(a: &TimeStamp, b: &TimeStamp) -> f64 {
    (b.int - a.int) as f64 + (b.frac - a.frac)
}

fn series_from_rows(path: &Path, id: &ChannelId, dt: SampleInterval, rows: &[TrendRow]) -> Result<ChannelSeries> {
    let first = &rows[0];
    if first.time.frac != 0.0 {
        return Err(TimeSeriesError::MalformedRow {
            path: path.into(),
            line: first.line,
            reason: "series must start on a whole GPS second".into(),
        });
    }
    ChannelSeries::new(
        id.clone(),
        first.time.int,
        dt,
        rows.iter().map(|r| r.value).collect(),
    )
}

fn sampling_tolerance(dt: SampleInterval) -> f64 {
    1e-6 * dt.as_secs_f64()
}

/// Loads a trend CSV (`gps_time,value`) as one contiguous series. Rows are
/// sorted by time; any gap other than `dt` is rejected.
pub fn load_trend_file(path: &Path, id: ChannelId, dt: SampleInterval) -> Result<ChannelSeries> {
    let rows = read_trend_rows(path)?;
    let step = dt.as_secs_f64();
    let tol = sampling_tolerance(dt);
    for (i, row) in rows.iter().enumerate() {
        let found = offset_secs(&rows[0].time, &row.time);
        let expected = i as f64 * step;
        if (found - expected).abs() > tol {
            return Err(TimeSeriesError::NonUniformSampling {
                path: path.into(),
                line: row.line,
                expected,
                found,
            });
        }
    }
    series_from_rows(path, &id, dt, &rows)
}

/// Like [`load_trend_file`] but splits the file at gaps into contiguous
/// series instead of failing. Duplicate timestamps are still rejected.
pub fn load_trend_file_split(path: &Path, id: ChannelId, dt: SampleInterval) -> Result<Vec<ChannelSeries>> {
    let rows = read_trend_rows(path)?;
    let step = dt.as_secs_f64();
    let tol = sampling_tolerance(dt);
    let mut pieces = Vec::new();
    let mut begin = 0;
    for i in 1..=rows.len() {
        let split = i == rows.len() || {
            let gap = offset_secs(&rows[i - 1].time, &rows[i].time);
            if gap < step - tol {
                return Err(TimeSeriesError::NonUniformSampling {
                    path: path.into(),
                    line: rows[i].line,
                    expected: step,
                    found: gap,
                });
            }
            gap > step + tol
        };
        if split {
            pieces.push(series_from_rows(path, &id, dt, &rows[begin..i])?);
            begin = i;
        }
    }
    Ok(pieces)
}

fn format_gps(start: i64, offset_ticks: u128, dt: SampleInterval) -> String {
    let den = dt.den as u128;
    let whole = start as i128 + (offset_ticks / den) as i128;
    let rem = offset_ticks % den;
    if rem == 0 {
        return whole.to_string();
    }
    // nanosecond resolution is well inside the loader's tolerance
    let nanos = (rem * 1_000_000_000 + den / 2) / den;
    let frac = format!("{nanos:09}");
    format!("{whole}.{}", frac.trim_end_matches('0'))
}

/// Writes a series in the trend CSV format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_trend<W: Write>(series: &ChannelSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "gps_time,value")?;
    let num = series.dt.num as u128;
    for (i, v) in series.values.iter().enumerate() {
        writeln!(out, "{},{}", format_gps(series.start_gps, i as u128 * num, series.dt), v)?;
    }
    Ok(())
}

pub fn write_trend_file(series: &ChannelSeries, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_trend(series, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Loads a flags CSV (`start_gps,end_gps`).
pub fn load_flags(path: &Path) -> Result<TimeSegmentSet> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim().trim_start_matches('\u{feff}') == "start_gps,end_gps" => {}
        _ => {
            return Err(TimeSeriesError::MalformedRow {
                path: path.into(),
                line: 1,
                reason: "expected header `start_gps,end_gps`".into(),
            })
        }
    }
    let mut segs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(s, e)| Some((s.trim().parse().ok()?, e.trim().parse().ok()?)));
        match parsed {
            Some(seg) => segs.push(seg),
            None => {
                return Err(TimeSeriesError::MalformedRow {
                    path: path.into(),
                    line: i + 2,
                    reason: format!("bad segment {line:?}"),
                })
            }
        }
    }
    TimeSegmentSet::new(segs)
}

pub fn write_segments<W: Write>(set: &TimeSegmentSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "start_gps,end_gps")?;
    for (s, e) in set.segments() {
        writeln!(out, "{s},{e}")?;
    }
    Ok(())
}

/// Band field of a manifest entry: a named band or explicit edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestBand {
    Named(String),
    Edges { low_hz: f64, high_hz: f64 },
}

impl ManifestBand {
    pub fn to_band(&self) -> Result<Band> {
        match self {
            ManifestBand::Named(name) => match name.as_str() {
                "earthquake" | "microseism" | "anthropogenic" => name.parse(),
                _ => Err(TimeSeriesError::InvalidChannelId(format!("unknown band {name:?}"))),
            },
            ManifestBand::Edges { low_hz, high_hz } => Band::other(*low_hz, *high_hz),
        }
    }
}

impl From<Band> for ManifestBand {
    fn from(b: Band) -> Self {
        match b {
            Band::Other { low_hz, high_hz } => ManifestBand::Edges { low_hz, high_hz },
            named => ManifestBand::Named(named.to_string()),
        }
    }
}

/// One entry of the channel manifest JSON.
///
/// `dt_s` marks a raw (unfiltered) trace sampled at that interval; entries
/// without it are 1 s trend data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub sensor: String,
    pub axis: Axis,
    pub band: ManifestBand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_s: Option<SampleInterval>,
}

impl ManifestEntry {
    pub fn channel_id(&self) -> Result<ChannelId> {
        ChannelId::new(self.sensor.clone(), self.axis, self.band.to_band()?)
    }

    pub fn is_raw(&self) -> bool {
        self.dt_s.is_some()
    }

    pub fn sample_interval(&self) -> SampleInterval {
        self.dt_s.unwrap_or(SampleInterval::ONE_SECOND)
    }
}

/// Reads a manifest, resolving relative file paths against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| TimeSeriesError::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?;
    if entries.is_empty() {
        return Err(TimeSeriesError::Manifest {
            path: path.into(),
            reason: "no channels".into(),
        });
    }
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        e.channel_id().map_err(|err| TimeSeriesError::Manifest {
            path: path.into(),
            reason: err.to_string(),
        })?;
        if e.file.is_relative() {
            e.file = base.join(&e.file);
        }
    }
    Ok(entries)
}
