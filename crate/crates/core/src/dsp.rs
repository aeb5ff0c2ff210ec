//! Band-limited RMS trends from raw sensor traces.
//!
//! Raw traces are bandpass filtered with a Butterworth design in
//! second-order sections, run forward and backward for zero phase, then
//! reduced to RMS over fixed strides.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{ChannelSeries, SampleInterval};

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid bandpass spec: {0}")]
    InvalidSpec(String),
    #[error("series of {len} samples is too short (need at least {min})")]
    SeriesTooShort { len: usize, min: usize },
    #[error("stride of {stride_s} s is not a whole number of {dt} s samples")]
    StrideMismatch { stride_s: u64, dt: SampleInterval },
}

type Result<T> = std::result::Result<T, DspError>;

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_STRIDE_S: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of the lowpass prototype; the bandpass has twice as many poles.
    pub order: usize,
    pub fs_hz: f64,
}

impl BandpassSpec {
    pub fn validate(&self) -> Result<()> {
        let Self {
            low_hz,
            high_hz,
            order,
            fs_hz,
        } = *self;
        if !(low_hz.is_finite() && high_hz.is_finite() && fs_hz.is_finite()) {
            return Err(DspError::InvalidSpec("non-finite frequency".into()));
        }
        if !(0.0 < low_hz && low_hz < high_hz) {
            return Err(DspError::InvalidSpec(format!(
                "edges must satisfy 0 < low < high, got {low_hz}..{high_hz}"
            )));
        }
        if high_hz >= fs_hz / 2.0 {
            return Err(DspError::InvalidSpec(format!(
                "high edge {high_hz} Hz is not below Nyquist {} Hz",
                fs_hz / 2.0
            )));
        }
        if !(2..=8).contains(&order) {
            return Err(DspError::InvalidSpec(format!("order {order} outside 2..=8")));
        }
        Ok(())
    }
}

/// One biquad, `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Delay-line state reached after a long run of unit input.
    fn unit_step_state(&self) -> [f64; 2] {
        let gain = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * gain;
        let z1 = self.b1 - self.a1 * gain + z2;
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    fn run(&self, data: &mut [f64], mut state: [f64; 2]) {
        let Biquad { b0, b1, b2, a1, a2 } = *self;
        for x in data.iter_mut() {
            let input = *x;
            let y = b0 * input + state[0];
            state[0] = b1 * input - a1 * y + state[1];
            state[1] = b2 * input - a2 * y;
            *x = y;
        }
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    sections: Vec<Biquad>,
}

impl FilterCoefficients {
    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Total filter order (poles across all sections).
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    /// Complex single-pass response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs_hz);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        self.response(freq_hz, fs_hz).norm()
    }

    /// Applies the cascade once, causally, from a zero state.
    pub fn filter(&self, data: &mut [f64]) {
        for s in &self.sections {
            s.run(data, [0.0; 2]);
        }
    }

    fn filter_from_steady_state(&self, data: &mut [f64]) {
        let Some(&level) = data.first() else { return };
        let mut scale = level;
        for s in &self.sections {
            let [z1, z2] = s.unit_step_state();
            s.run(data, [z1 * scale, z2 * scale]);
            scale *= s.dc_gain();
        }
    }
}

/// Designs a digital Butterworth bandpass as second-order sections.
///
/// The analog lowpass prototype is shifted to a bandpass around the
/// prewarped geometric center and mapped with the bilinear transform. Each
/// section carries one conjugate pole pair and zeros at `z = +1, -1`; the
/// cascade is scaled to unit gain at the center frequency.
pub fn design_bandpass(spec: &BandpassSpec) -> Result<FilterCoefficients> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.fs_hz;
    let warp = |f: f64| fs2 * (PI * f / spec.fs_hz).tan();
    let (w1, w2) = (warp(spec.low_hz), warp(spec.high_hz));
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    let mut digital = Vec::with_capacity(2 * n);
    for k in 0..n {
        let m = 2.0 * k as f64 - (n as f64 - 1.0);
        let proto = -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64));
        let shifted = proto * (bw / 2.0);
        let root = (shifted * shifted - w0 * w0).sqrt();
        for s in [shifted + root, shifted - root] {
            digital.push((fs2 + s) / (fs2 - s));
        }
    }

    let scale = digital.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let is_real = |z: &Complex64| z.im.abs() <= 1e-12 * scale;
    let mut sections: Vec<Biquad> = digital
        .iter()
        .filter(|z| !is_real(z) && z.im > 0.0)
        .map(|z| Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -2.0 * z.re,
            a2: z.norm_sqr(),
        })
        .collect();
    let mut reals: Vec<f64> = digital.iter().filter(|z| is_real(z)).map(|z| z.re).collect();
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        let [r1, r2] = [pair[0], *pair.get(1).unwrap_or(&0.0)];
        sections.push(Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -(r1 + r2),
            a2: r1 * r2,
        });
    }
    if sections.len() != n {
        return Err(DspError::InvalidSpec(format!(
            "pole pairing produced {} sections for order {n}",
            sections.len()
        )));
    }

    let mut coeffs = FilterCoefficients { sections };
    let center_hz = spec.fs_hz / PI * (w0 / fs2).atan();
    let per_section = coeffs.magnitude(center_hz, spec.fs_hz).recip().powf(1.0 / n as f64);
    for s in &mut coeffs.sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
    if !coeffs.sections.iter().all(Biquad::is_stable) {
        return Err(DspError::InvalidSpec("design produced an unstable section".into()));
    }
    Ok(coeffs)
}

/// Zero-phase filtering: forward pass, then backward pass, with odd
/// reflection padding of `3 * order` samples at each end.
pub fn filtfilt(coeffs: &FilterCoefficients, series: &ChannelSeries) -> Result<ChannelSeries> {
    let out = filtfilt_values(coeffs, series.values())?;
    Ok(ChannelSeries::new(series.id.clone(), series.start_gps, series.dt, out)
        .expect("stable filter keeps finite input finite"))
}

pub fn filtfilt_values(coeffs: &FilterCoefficients, x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let min = 3 * coeffs.order();
    if n < min.max(2) {
        return Err(DspError::SeriesTooShort { len: n, min: min.max(2) });
    }
    let pad = min.min(n - 1);
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    coeffs.filter_from_steady_state(&mut ext);
    ext.reverse();
    coeffs.filter_from_steady_state(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Root-mean-square over consecutive `stride_s` segments; a trailing
/// partial segment is dropped.
pub fn blrms_trend(series: &ChannelSeries, stride_s: u64) -> Result<ChannelSeries> {
    let mismatch = DspError::StrideMismatch {
        stride_s,
        dt: series.dt,
    };
    if stride_s == 0 {
        return Err(mismatch);
    }
    let per = series.dt.samples_in(stride_s).ok_or(mismatch)?;
    if series.len() < per {
        return Err(DspError::SeriesTooShort {
            len: series.len(),
            min: per,
        });
    }
    let values = series.values().chunks_exact(per).map(rms).collect();
    let dt = SampleInterval::seconds(stride_s).expect("stride is positive");
    Ok(ChannelSeries::new(series.id.clone(), series.start_gps, dt, values).expect("rms of finite data is finite"))
}

/// RMS scaled by the largest magnitude, so constant-magnitude input maps
/// back to that magnitude exactly and large inputs do not overflow.
fn rms(segment: &[f64]) -> f64 {
    let peak = segment.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let sum: f64 = segment.iter().map(|v| (v / peak) * (v / peak)).sum();
    peak * (sum / segment.len() as f64).sqrt()
}

/// Filters a raw trace into its channel's band and reduces it to a BLRMS trend.
pub fn blrms_channel(raw: &ChannelSeries, order: usize, stride_s: u64) -> Result<ChannelSeries> {
    let (low_hz, high_hz) = raw.id.band.edges();
    let spec = BandpassSpec {
        low_hz,
        high_hz,
        order,
        fs_hz: raw.dt.as_secs_f64().recip(),
    };
    let coeffs = design_bandpass(&spec)?;
    blrms_trend(&filtfilt(&coeffs, raw)?, stride_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{Axis, Band, ChannelId};

    /// Squared magnitude of the bilinear-transformed analog Butterworth
    /// bandpass, evaluated in closed form.
    fn analytic_power(spec: &BandpassSpec, f: f64) -> f64 {
        let warp = |f: f64| 2.0 * spec.fs_hz * (PI * f / spec.fs_hz).tan();
        let (w1, w2, w) = (warp(spec.low_hz), warp(spec.high_hz), warp(f));
        let omega = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + omega.powi(2 * spec.order as i32))
    }

    fn micro_spec() -> BandpassSpec {
        BandpassSpec {
            low_hz: 0.1,
            high_hz: 0.3,
            order: 4,
            fs_hz: 16.0,
        }
    }

    fn raw_series(values: Vec<f64>, fs: u64) -> ChannelSeries {
        let id = ChannelId::new("ETMX", Axis::Z, Band::Microseism).unwrap();
        ChannelSeries::new(id, 0, SampleInterval::new(1, fs).unwrap(), values).unwrap()
    }

    fn sine(amp: f64, freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    /// Least-squares amplitude of a sinusoid at `freq` over the central 80%.
    fn fitted_amplitude(x: &[f64], freq: f64, fs: f64) -> f64 {
        let cut = x.len() / 10;
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, y) in x.iter().enumerate().take(x.len() - cut).skip(cut) {
            let ph = 2.0 * PI * freq * i as f64 / fs;
            let (s, c) = ph.sin_cos();
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += y * s;
            yc += y * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        a.hypot(b)
    }

    fn trimmed_rms(x: &[f64]) -> f64 {
        let cut = x.len() / 10;
        let core = &x[cut..x.len() - cut];
        (core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64).sqrt()
    }

    #[test]
    fn design_matches_closed_form() {
        for spec in [
            micro_spec(),
            BandpassSpec { low_hz: 0.03, high_hz: 0.1, order: 4, fs_hz: 16.0 },
            BandpassSpec { low_hz: 1.0, high_hz: 3.0, order: 2, fs_hz: 16.0 },
            BandpassSpec { low_hz: 10.0, high_hz: 30.0, order: 6, fs_hz: 256.0 },
            BandpassSpec { low_hz: 0.01, high_hz: 2.0, order: 3, fs_hz: 8.0 },
            BandpassSpec { low_hz: 0.5, high_hz: 3.5, order: 8, fs_hz: 8.0 },
        ] {
            let c = design_bandpass(&spec).unwrap();
            assert_eq!(c.sections().len(), spec.order);
            assert!(c.sections().iter().all(Biquad::is_stable));
            for k in 1..200 {
                let f = spec.fs_hz / 2.0 * k as f64 / 200.0;
                let got = c.magnitude(f, spec.fs_hz).powi(2);
                let want = analytic_power(&spec, f);
                assert!((got - want).abs() < 1e-8, "{spec:?} f={f}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn unity_at_geometric_center() {
        let spec = micro_spec();
        let c = design_bandpass(&spec).unwrap();
        let center = (spec.low_hz * spec.high_hz).sqrt();
        let m = c.magnitude(center, spec.fs_hz);
        assert!((0.99..=1.0 + 1e-12).contains(&m), "|H| = {m}");
        assert!((m - analytic_power(&spec, center).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn rolloff_is_monotonic_outside_passband() {
        let spec = micro_spec();
        let c = design_bandpass(&spec).unwrap();
        let below: Vec<f64> = (1..100).map(|k| c.magnitude(spec.low_hz * k as f64 / 100.0, spec.fs_hz)).collect();
        assert!(below.windows(2).all(|w| w[0] <= w[1]));
        let above: Vec<f64> = (0..100)
            .map(|k| c.magnitude(spec.high_hz + (7.9 - spec.high_hz) * k as f64 / 100.0, spec.fs_hz))
            .collect();
        assert!(above.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn invalid_specs() {
        let bad_order = BandpassSpec { low_hz: 0.3, high_hz: 0.1, ..micro_spec() };
        assert!(matches!(design_bandpass(&bad_order), Err(DspError::InvalidSpec(_))));
        let nyquist = BandpassSpec { low_hz: 1.0, high_hz: 3.0, order: 4, fs_hz: 4.0 };
        assert!(matches!(design_bandpass(&nyquist), Err(DspError::InvalidSpec(_))));
        let order = BandpassSpec { order: 9, ..micro_spec() };
        assert!(design_bandpass(&order).is_err());
        let order = BandpassSpec { order: 1, ..micro_spec() };
        assert!(design_bandpass(&order).is_err());
    }

    #[test]
    fn filtfilt_zeros() {
        let c = design_bandpass(&micro_spec()).unwrap();
        let out = filtfilt(&c, &raw_series(vec![0.0; 100], 16)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn filtfilt_too_short() {
        let c = design_bandpass(&micro_spec()).unwrap();
        assert_eq!(
            filtfilt(&c, &raw_series(vec![1.0; 23], 16)).unwrap_err(),
            DspError::SeriesTooShort { len: 23, min: 24 }
        );
        assert!(filtfilt(&c, &raw_series(vec![1.0; 24], 16)).is_ok());
    }

    #[test]
    fn filtfilt_passes_center_with_zero_lag() {
        let spec = micro_spec();
        let c = design_bandpass(&spec).unwrap();
        let f = (spec.low_hz * spec.high_hz).sqrt();
        // 200 cycles; the slowest pole decays with a ~8 s time constant, so
        // the 10% trim leaves transients far below the tolerance
        let n = (200.0 / f * spec.fs_hz) as usize;
        let x = sine(1.0, f, spec.fs_hz, n);
        let y = filtfilt_values(&c, &x).unwrap();
        let ratio = fitted_amplitude(&y, f, spec.fs_hz) / fitted_amplitude(&x, f, spec.fs_hz);
        let expected = analytic_power(&spec, f);
        // upper bound allows for rounding in the amplitude fit
        assert!((0.95..=1.0 + 1e-6).contains(&ratio), "ratio {ratio}");
        assert!((ratio - expected).abs() < 0.01, "ratio {ratio} vs |H|^2 {expected}");

        let cut = n / 10;
        let xcorr = |lag: i64| -> f64 {
            (cut..n - cut)
                .map(|i| y[i] * x[(i as i64 + lag) as usize])
                .sum()
        };
        let best = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert!(best.abs() <= 1, "lag {best}");
    }

    #[test]
    fn filtfilt_rejects_out_of_band() {
        let spec = micro_spec();
        let c = design_bandpass(&spec).unwrap();
        let f = 3.0 * spec.high_hz;
        let x = sine(1.0, f, spec.fs_hz, 4000);
        let y = filtfilt_values(&c, &x).unwrap();
        let ratio = trimmed_rms(&y) / trimmed_rms(&x);
        let bound = analytic_power(&spec, f);
        assert!(bound <= 0.1);
        assert!(ratio <= 0.1, "ratio {ratio}");
        assert!(ratio <= bound + 1e-3, "ratio {ratio} exceeds |H|^2 {bound}");
    }

    #[test]
    fn blrms_constant_is_exact() {
        for c in [0.1, -3.7, 1e-300, 12345.678, 0.0] {
            let s = raw_series(vec![c; 16 * 5], 16);
            let out = blrms_trend(&s, 1).unwrap();
            assert_eq!(out.len(), 5);
            assert_eq!(out.dt, SampleInterval::ONE_SECOND);
            assert!(out.values().iter().all(|&v| v == c.abs()));
        }
    }

    #[test]
    fn blrms_sine_over_whole_periods() {
        // 2 Hz sine sampled at 64 Hz: two full periods per second
        let amp = 3.0;
        let s = raw_series(sine(amp, 2.0, 64.0, 64 * 10), 64);
        for v in blrms_trend(&s, 1).unwrap().values() {
            assert!((v - amp / 2f64.sqrt()).abs() / (amp / 2f64.sqrt()) < 1e-3, "{v}");
        }
    }

    #[test]
    fn blrms_drops_partial_segment() {
        let s = raw_series(vec![1.0; 168], 16);
        assert_eq!(blrms_trend(&s, 1).unwrap().len(), 10);
        let s = raw_series(vec![1.0; 168], 16);
        assert_eq!(blrms_trend(&s, 2).unwrap().len(), 5);
    }

    #[test]
    fn blrms_stride_errors() {
        let id = ChannelId::new("ETMX", Axis::Z, Band::Microseism).unwrap();
        let s = ChannelSeries::new(id, 0, SampleInterval::seconds(2).unwrap(), vec![1.0; 10]).unwrap();
        assert!(matches!(blrms_trend(&s, 3), Err(DspError::StrideMismatch { .. })));
        assert!(matches!(blrms_trend(&s, 0), Err(DspError::StrideMismatch { .. })));
        assert!(matches!(blrms_trend(&s, 40), Err(DspError::SeriesTooShort { .. })));
    }

    #[test]
    fn blrms_channel_uses_band_edges() {
        let fs = 16.0;
        let x = sine(2.0, 0.17, fs, 16 * 600);
        let trend = blrms_channel(&raw_series(x, 16), 4, 1).unwrap();
        assert_eq!(trend.len(), 600);
        // a 1 s segment is a fraction of a 0.17 Hz cycle, so compare the
        // power averaged across many segments
        let core = &trend.values()[60..540];
        let power = core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64;
        assert!((power.sqrt() - 2.0 / 2f64.sqrt()).abs() < 0.02, "{power}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filtfilt_is_linear(
                xs in prop::collection::vec(-10.0f64..10.0, 64..200),
                seed in prop::collection::vec(-10.0f64..10.0, 200),
            ) {
                let c = design_bandpass(&BandpassSpec { low_hz: 0.5, high_hz: 2.0, order: 4, fs_hz: 16.0 }).unwrap();
                let ys: Vec<f64> = seed[..xs.len()].to_vec();
                let sum: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a + b).collect();
                let fx = filtfilt_values(&c, &xs).unwrap();
                let fy = filtfilt_values(&c, &ys).unwrap();
                let fs = filtfilt_values(&c, &sum).unwrap();
                let scale = fs.iter().chain(&fx).fold(1.0f64, |m, v| m.max(v.abs()));
                for i in 0..xs.len() {
                    prop_assert!((fs[i] - fx[i] - fy[i]).abs() <= 1e-9 * scale);
                }
            }

            #[test]
            fn designed_sections_are_stable(low in 0.01f64..3.0, width in 1.1f64..5.0, order in 2usize..=8) {
                let spec = BandpassSpec { low_hz: low, high_hz: low * width, order, fs_hz: 40.0 };
                if let Ok(c) = design_bandpass(&spec) {
                    prop_assert!(c.sections().iter().all(|s| s.poles().iter().all(|p| p.norm() < 1.0)));
                }
            }

            #[test]
            fn blrms_scales_and_is_nonnegative(
                xs in prop::collection::vec(-100.0f64..100.0, 16..160),
                alpha in -50.0f64..50.0,
            ) {
                let base = blrms_trend(&raw_series(xs.clone(), 16), 1).unwrap();
                let scaled = blrms_trend(&raw_series(xs.iter().map(|v| v * alpha).collect(), 16), 1).unwrap();
                for (b, s) in base.values().iter().zip(scaled.values()) {
                    prop_assert!(*b >= 0.0);
                    prop_assert!((s - alpha.abs() * b).abs() <= 1e-12 * (1.0 + s.abs()));
                }
            }

            #[test]
            fn blrms_energy_bound_on_unfiltered(xs in prop::collection::vec(-100.0f64..100.0, 16..160)) {
                let out = blrms_trend(&raw_series(xs.clone(), 16), 1).unwrap();
                let trend_energy: f64 = out.values().iter().map(|v| v * v * 16.0).sum();
                let input_energy: f64 = xs.iter().map(|v| v * v).sum();
                prop_assert!(trend_energy <= input_energy * (1.0 + 1e-12) + 1e-9);
            }
        }
    }
}
