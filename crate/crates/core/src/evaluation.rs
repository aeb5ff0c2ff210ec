//! Observed versus expected event counts per state under a homogeneous
//! Poisson null over the analyzed windows.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};
use thiserror::Error;

use crate::labeling::{format_tags, StateTimeline};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {reason}")]
    MalformedRow { path: PathBuf, line: usize, reason: String },
    #[error("timeline has no windows")]
    EmptyTimeline,
    #[error("unknown event kind {0:?}")]
    UnknownKind(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EventKind {
    Glitch,
    LockLoss,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Glitch => "glitch",
            EventKind::LockLoss => "lockloss",
        })
    }
}

impl FromStr for EventKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "glitch" => Ok(EventKind::Glitch),
            "lockloss" => Ok(EventKind::LockLoss),
            _ => Err(EvalError::UnknownKind(s.to_string())),
        }
    }
}

impl TryFrom<String> for EventKind {
    type Error = EvalError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EventKind> for String {
    fn from(k: EventKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub snr: Option<f64>,
    pub class_name: Option<String>,
}

/// Reads a catalog CSV with columns `gps_time,snr,label`. Gravity Spy exports
/// (`GPStime`, `snr`, `ml_label`) are accepted as-is; extra columns are
/// ignored. With `snr_min`, only events with `snr > snr_min` are kept and
/// rows without an SNR are dropped.
pub fn load_catalog(path: &Path, kind: EventKind, snr_min: Option<f64>) -> Result<Vec<Event>> {
    let bad = |line: usize, reason: String| EvalError::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => EvalError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => bad(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let time_col = col(&["gps_time", "GPStime"]).ok_or_else(|| bad(1, "no gps_time column".into()))?;
    let snr_col = col(&["snr"]);
    let label_col = col(&["label", "ml_label"]);

    let mut events = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty());
        let time: f64 = field(Some(time_col))
            .ok_or_else(|| bad(line, "missing gps_time".into()))?
            .parse()
            .map_err(|_| bad(line, "gps_time is not a number".into()))?;
        if !time.is_finite() {
            return Err(bad(line, "gps_time is not finite".into()));
        }
        let snr = match field(snr_col) {
            None => None,
            Some(s) => {
                let v: f64 = s.parse().map_err(|_| bad(line, format!("snr {s:?} is not a number")))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad(line, format!("snr must be finite and non-negative, got {s}")));
                }
                Some(v)
            }
        };
        if let Some(min) = snr_min {
            if snr.is_none_or(|v| v <= min) {
                continue;
            }
        }
        events.push(Event {
            time,
            kind,
            snr,
            class_name: field(label_col).map(str::to_string),
        });
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(events)
}

pub fn write_catalog<W: Write>(events: &[Event], mut out: W) -> std::io::Result<()> {
    writeln!(out, "gps_time,snr,label")?;
    for e in events {
        let snr = e.snr.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", e.time, snr, e.class_name.as_deref().unwrap_or(""))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRate {
    pub state: usize,
    pub tags: String,
    pub duration_s: i64,
    pub observed: u64,
    pub expected: f64,
    pub observed_rate_hz: f64,
    pub expected_rate_hz: f64,
    pub excess: Option<f64>,
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub total_duration_s: i64,
    pub in_span_events: u64,
    pub out_of_span_events: u64,
    pub rows: Vec<StateRate>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelateOptions {
    /// Adds the upper-tail Poisson p-value `P(X >= observed)` to each row.
    pub poisson_p: bool,
}

/// Counts events per state and compares against `in_span × duration / span`.
pub fn correlate(timeline: &StateTimeline, events: &[Event]) -> Result<RateReport> {
    correlate_with(timeline, events, CorrelateOptions::default())
}

pub fn correlate_with(timeline: &StateTimeline, events: &[Event], opts: CorrelateOptions) -> Result<RateReport> {
    if timeline.is_empty() {
        return Err(EvalError::EmptyTimeline);
    }
    let windows = &timeline.windows;
    let mut times: Vec<f64> = events.iter().map(|e| e.time).collect();
    times.sort_by(f64::total_cmp);

    let mut observed: BTreeMap<usize, u64> = BTreeMap::new();
    let mut in_span = 0u64;
    let mut w = 0;
    for t in times {
        while w < windows.len() && (windows[w].end_gps as f64) <= t {
            w += 1;
        }
        if w < windows.len() && (windows[w].start_gps as f64) <= t {
            *observed.entry(windows[w].cluster_id).or_default() += 1;
            in_span += 1;
        }
    }

    let total = timeline.windowed_span();
    let base_rate = in_span as f64 / total as f64;
    let rows = timeline
        .state_segments()
        .into_iter()
        .map(|(state, segs)| {
            let duration_s = segs.total_duration();
            let obs = observed.get(&state).copied().unwrap_or(0);
            let expected = in_span as f64 * duration_s as f64 / total as f64;
            let positive = expected > 0.0;
            StateRate {
                state,
                tags: format_tags(&timeline.labels[&state].tags),
                duration_s,
                observed: obs,
                expected,
                observed_rate_hz: obs as f64 / duration_s as f64,
                expected_rate_hz: base_rate,
                excess: positive.then(|| obs as f64 / expected),
                z: positive.then(|| (obs as f64 - expected) / expected.sqrt()),
                p_value: (opts.poisson_p && positive).then(|| poisson_upper_tail(obs, expected)),
            }
        })
        .collect();
    Ok(RateReport {
        total_duration_s: total,
        in_span_events: in_span,
        out_of_span_events: events.len() as u64 - in_span,
        rows,
    })
}

fn poisson_upper_tail(observed: u64, mean: f64) -> f64 {
    if observed == 0 {
        return 1.0;
    }
    let dist = Poisson::new(mean).expect("mean is positive");
    dist.sf(observed - 1)
}

/// One report per event class label; unlabeled events are grouped under `""`.
pub fn correlate_by_class(timeline: &StateTimeline, events: &[Event], opts: CorrelateOptions) -> Result<BTreeMap<String, RateReport>> {
    let mut groups: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for e in events {
        groups.entry(e.class_name.clone().unwrap_or_default()).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(k, evs)| Ok((k, correlate_with(timeline, &evs, opts)?)))
        .collect()
}

impl RateReport {
    /// Largest per-state z-score, if any state has a defined one.
    pub fn max_z(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.z).reduce(f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "state,duration_s,observed,expected,excess,z")?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.state,
                r.duration_s,
                r.observed,
                r.expected,
                opt(r.excess),
                opt(r.z)
            )?;
        }
        Ok(())
    }

    pub fn write_files(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let io = |p: &Path| {
            let path = p.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(json_path, json + "\n").map_err(io(json_path))?;
        let mut out = BufWriter::new(File::create(csv_path).map_err(io(csv_path))?);
        self.write_csv(&mut out).map_err(io(csv_path))?;
        out.flush().map_err(io(csv_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{build_timeline, StateLabel};
    use std::collections::BTreeSet;

    fn timeline(assign: &[usize], window: i64) -> StateTimeline {
        let labels: BTreeMap<usize, StateLabel> = assign
            .iter()
            .map(|&c| (c, StateLabel { cluster_id: c, tags: BTreeSet::new() }))
            .collect();
        let bounds: Vec<(i64, i64)> = (0..assign.len() as i64).map(|i| (i * window, (i + 1) * window)).collect();
        build_timeline(assign, &labels, &bounds).unwrap()
    }

    fn glitch(t: f64) -> Event {
        Event {
            time: t,
            kind: EventKind::Glitch,
            snr: None,
            class_name: None,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn snr_cut_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "gps_time,snr,label\n30,7.6,Blip\n10,7.5,Blip\n20,,\n");
        let ev = load_catalog(&p, EventKind::Glitch, Some(7.5)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].snr, Some(7.6));
        let all = load_catalog(&p, EventKind::Glitch, None).unwrap();
        assert_eq!(all.iter().map(|e| e.time).collect::<Vec<_>>(), vec![10.0, 20.0, 30.0]);
        assert_eq!(all[0].class_name.as_deref(), Some("Blip"));
        assert_eq!(all[1].class_name, None);
    }

    #[test]
    fn gravity_spy_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "gs.csv", "ifo,GPStime,peakFreq,snr,ml_label\nL1,1126400000.5,80,12.1,Scattered_Light\n");
        let ev = load_catalog(&p, EventKind::Glitch, Some(7.5)).unwrap();
        assert_eq!(ev[0].time, 1126400000.5);
        assert_eq!(ev[0].class_name.as_deref(), Some("Scattered_Light"));
    }

    #[test]
    fn malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["gps_time,snr,label\nabc,1,\n", "gps_time,snr,label\n1,-2,\n", "gps_time,snr,label\n1,x,\n", "time\n1\n"] {
            let p = write(&dir, "m.csv", text);
            assert!(matches!(load_catalog(&p, EventKind::Glitch, None), Err(EvalError::MalformedRow { .. })), "{text}");
        }
    }

    #[test]
    fn single_state_identity() {
        let t = timeline(&[0, 0, 0, 0], 60);
        let ev: Vec<Event> = [1.0, 50.0, 130.0, 239.9].map(glitch).to_vec();
        let r = correlate(&t, &ev).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].excess, Some(1.0));
        assert_eq!(r.rows[0].z, Some(0.0));
    }

    #[test]
    fn two_state_example() {
        let t = timeline(&[0, 1], 100);
        let ev: Vec<Event> = (0..10).map(|i| glitch(i as f64 * 10.0)).collect();
        let r = correlate(&t, &ev).unwrap();
        let a = &r.rows[0];
        assert_eq!((a.observed, a.expected, a.excess), (10, 5.0, Some(2.0)));
        assert!((a.z.unwrap() - 5.0 / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.rows[1].observed, 0);
        assert_eq!(r.rows[1].excess, Some(0.0));
    }

    #[test]
    fn boundaries_and_footer() {
        let t = timeline(&[0, 1], 100);
        let ev: Vec<Event> = [-1.0, 0.0, 100.0, 200.0, 250.0].map(glitch).to_vec();
        let r = correlate(&t, &ev).unwrap();
        assert_eq!(r.in_span_events, 2);
        assert_eq!(r.out_of_span_events, 3);
        assert_eq!(r.rows[0].observed, 1);
        assert_eq!(r.rows[1].observed, 1);
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(correlate(&StateTimeline::default(), &[]), Err(EvalError::EmptyTimeline)));
        let r = correlate(&timeline(&[0, 1], 60), &[]).unwrap();
        assert!(r.rows.iter().all(|row| row.observed == 0 && row.excess.is_none() && row.z.is_none()));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "state,duration_s,observed,expected,excess,z\n0,60,0,0,,\n1,60,0,0,,\n");
    }

    #[test]
    fn poisson_tail() {
        let t = timeline(&[0, 1], 100);
        let ev: Vec<Event> = (0..10).map(|i| glitch(i as f64 * 10.0)).collect();
        let r = correlate_with(&t, &ev, CorrelateOptions { poisson_p: true }).unwrap();
        // P(X >= 10 | mean 5), summed directly
        let mut cdf = 0.0;
        let mut term = (-5.0f64).exp();
        for k in 0..10 {
            cdf += term;
            term *= 5.0 / (k + 1) as f64;
        }
        assert!((r.rows[0].p_value.unwrap() - (1.0 - cdf)).abs() < 1e-12);
        assert_eq!(r.rows[1].p_value, Some(1.0));
    }

    #[test]
    fn by_class() {
        let t = timeline(&[0, 1], 100);
        let mut ev: Vec<Event> = (0..4).map(|i| glitch(i as f64 * 50.0)).collect();
        ev[0].class_name = Some("Blip".into());
        let groups = correlate_by_class(&t, &ev, CorrelateOptions::default()).unwrap();
        assert_eq!(groups["Blip"].in_span_events, 1);
        assert_eq!(groups[""].in_span_events, 3);
    }
}
