use std::collections::BTreeMap;

use envstate::evaluation::EventKind;
use envstate::labeling::Phenomenon;
use envstate::simulate::{generate, EventModel, Injection, ScenarioSpec};
use envstate::timeseries::{Axis, Band, SampleInterval};
use proptest::prelude::*;

fn scenario(duration_s: u64, seed: u64, injections: Vec<Injection>) -> ScenarioSpec {
    ScenarioSpec {
        duration_s,
        dt_s: SampleInterval::ONE_SECOND,
        start_gps: 1_200_000_000,
        sensors: vec!["ETMX".into(), "ETMY".into(), "LVEA".into()],
        axes: vec![Axis::Z],
        bands: Band::DEFAULTS.to_vec(),
        rng_seed: seed,
        window_s: 60,
        injections,
        baseline: BTreeMap::new(),
        events: vec![],
        flags: None,
    }
}

fn injection(phenomenon: Phenomenon, start_s: u64, duration_s: u64, amplitude: f64) -> Injection {
    Injection {
        phenomenon,
        band: None,
        start_s,
        duration_s,
        amplitude,
        sensors: None,
        profile: None,
    }
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn values_positive_finite_and_reproducible(
        seed in any::<u64>(),
        start in 0u64..3000,
        len in 60u64..1000,
        amp in 0.5f64..50.0,
    ) {
        let spec = scenario(4000, seed, vec![injection(Phenomenon::Earthquake, start, len.min(4000 - start), amp)]);
        let a = generate(&spec).unwrap();
        for c in a.batch.channels() {
            prop_assert!(c.values().iter().all(|v| v.is_finite() && *v > 0.0));
        }
        let b = generate(&spec).unwrap();
        for (x, y) in a.batch.channels().iter().zip(b.batch.channels()) {
            let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(x.values()), bits(y.values()));
        }
    }
}

#[test]
fn generation_independent_of_thread_count() {
    let spec = scenario(20_000, 3, vec![injection(Phenomenon::HighAnthropogenic, 0, 20_000, 10.0)]);
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| generate(&spec).unwrap().batch)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn injected_windows_exceed_quiet_p99() {
    let spec = scenario(
        86_400,
        11,
        vec![
            injection(Phenomenon::Earthquake, 10_000, 3_600, 10.0),
            injection(Phenomenon::HighMicroseism, 30_000, 40_000, 10.0),
            injection(Phenomenon::HighAnthropogenic, 0, 86_400, 10.0),
        ],
    );
    let sc = generate(&spec).unwrap();
    for (ci, ch) in sc.batch.channels().iter().enumerate() {
        let phen = match ch.id.band {
            Band::Earthquake => Phenomenon::Earthquake,
            Band::Microseism => Phenomenon::HighMicroseism,
            _ => Phenomenon::HighAnthropogenic,
        };
        let mut quiet = Vec::new();
        let mut active = Vec::new();
        for (w, tags) in sc.truth.windows.iter().zip(&sc.truth.tags) {
            let from = (w.0 - spec.start_gps) as usize;
            let mean = ch.values()[from..from + 60].iter().sum::<f64>() / 60.0;
            if tags.contains(&(phen.clone(), ch.id.sensor.clone())) {
                active.push(mean);
            } else if tags.is_empty() {
                quiet.push(mean);
            }
        }
        let p99 = quantile(quiet, 0.99);
        let lowest = active.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(lowest > p99, "channel {ci}: {lowest} <= {p99}");
    }
}

#[test]
fn event_multiplier_realized() {
    let mut spec = scenario(400_000, 5, vec![injection(Phenomenon::Earthquake, 100_000, 100_000, 10.0)]);
    spec.sensors.truncate(1);
    spec.bands = vec![Band::Earthquake];
    spec.events.push(EventModel {
        name: "glitch".into(),
        kind: EventKind::Glitch,
        background_rate_hz: 0.0125,
        multipliers: BTreeMap::from([(Phenomenon::Earthquake, 5.0)]),
    });
    let sc = generate(&spec).unwrap();
    let events = &sc.catalogs[0].events;
    assert!(events.len() > 7_000, "{} events", events.len());
    let inside = events.iter().filter(|e| !e.active.is_empty()).count() as f64;
    let outside = events.len() as f64 - inside;
    let ratio = (inside / 100_000.0) / (outside / 300_000.0);
    // ~5000 in-state events: relative standard error of the ratio is about 2%
    assert!((ratio - 5.0).abs() < 0.5, "ratio {ratio}");
}
