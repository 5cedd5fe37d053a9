//! IIR filter design and zero-phase filtering.
//!
//! Filters are cascades of biquads in transposed direct form II, designed and
//! run in `f64`. Zero-phase filtering follows the usual forward-backward scheme
//! with odd-reflection padding and steady-state initial conditions, so a
//! constant input settles to its DC response from the first sample.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emgio::EmgRecording;

/// High-pass cutoff applied to every recording.
pub const HIGHPASS_CUTOFF_HZ: f64 = 20.0;
/// Butterworth order of the high-pass stage.
pub const HIGHPASS_ORDER: usize = 4;
/// Mains frequency removed by the notch stage.
pub const NOTCH_CENTER_HZ: f64 = 50.0;
/// Notch quality factor (about 1.67 Hz bandwidth at 50 Hz).
pub const NOTCH_Q: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("InvalidCutoff: cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("InvalidCenter: notch center {center_hz} Hz must lie in (0, {nyquist_hz}) Hz with q > 0 (q = {q})")]
    InvalidCenter { center_hz: f64, nyquist_hz: f64, q: f64 },
    #[error("InvalidOrder: Butterworth order must be a positive even integer, got {0}")]
    InvalidOrder(usize),
    #[error("SignalTooShort: {len} samples, zero-phase filtering needs more than {pad}")]
    SignalTooShort { len: usize, pad: usize },
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex frequency response at normalized angular frequency `w` (rad/sample).
    fn response(&self, w: f64) -> (f64, f64) {
        // z^-1 = cos w - j sin w
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b0 + self.b1 * c1 + self.b2 * c2, self.b1 * s1 + self.b2 * s2);
        let den = (1.0 + self.a1 * c1 + self.a2 * c2, self.a1 * s1 + self.a2 * s2);
        complex_div(num, den)
    }

    /// Poles as (re, im) pairs.
    pub fn poles(&self) -> [(f64, f64); 2] {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let r = disc.sqrt();
            [((-self.a1 + r) / 2.0, 0.0), ((-self.a1 - r) / 2.0, 0.0)]
        } else {
            let im = (-disc).sqrt() / 2.0;
            [(-self.a1 / 2.0, im), (-self.a1 / 2.0, -im)]
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Filter state reached after an infinitely long unit step.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b2 - self.a2 * g;
        let z1 = self.b1 - self.a1 * g + z2;
        [z1, z2]
    }
}

fn complex_div(n: (f64, f64), d: (f64, f64)) -> (f64, f64) {
    let den = d.0 * d.0 + d.1 * d.1;
    ((n.0 * d.0 + n.1 * d.1) / den, (n.1 * d.0 - n.0 * d.1) / den)
}

fn complex_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    ButterworthHighpass { order: usize, cutoff_hz: f64 },
    ButterworthLowpass { order: usize, cutoff_hz: f64 },
    Notch { center_hz: f64, q: f64 },
}

/// A designed filter: biquad cascade plus its design descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub sections: Vec<Biquad>,
    pub fs_hz: f64,
    pub kind: FilterKind,
}

impl FilterSpec {
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    /// Padding used on each side by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.order() + 1)
    }

    /// Complex single-pass response at `f_hz`.
    pub fn response(&self, f_hz: f64) -> (f64, f64) {
        let w = 2.0 * PI * f_hz / self.fs_hz;
        self.sections.iter().fold((1.0, 0.0), |acc, s| complex_mul(acc, s.response(w)))
    }

    /// Single-pass magnitude response at `f_hz`.
    pub fn magnitude(&self, f_hz: f64) -> f64 {
        let (re, im) = self.response(f_hz);
        re.hypot(im)
    }

    /// Largest pole radius over all sections.
    pub fn max_pole_radius(&self) -> f64 {
        self.sections.iter().flat_map(|s| s.poles()).map(|(re, im)| re.hypot(im)).fold(0.0, f64::max)
    }

    /// Runs the cascade in place starting from the given per-section states.
    fn run(&self, x: &mut [f64], states: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(states.iter_mut()) {
            let [mut z1, mut z2] = *z;
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b0 * input + z1;
                z1 = s.b1 * input - s.a1 * y + z2;
                z2 = s.b2 * input - s.a2 * y;
                *v = y;
            }
            *z = [z1, z2];
        }
    }

    /// Steady-state states for a constant input of level `x0`.
    fn steady_states(&self, x0: f64) -> Vec<[f64; 2]> {
        let mut level = x0;
        self.sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.steady_state();
                let z = [z1 * level, z2 * level];
                level *= s.dc_gain();
                z
            })
            .collect()
    }
}

fn check_cutoff(fc_hz: f64, fs_hz: f64) -> Result<(), DspError> {
    let nyquist_hz = fs_hz / 2.0;
    if !(fc_hz > 0.0 && fc_hz < nyquist_hz && fs_hz.is_finite()) {
        return Err(DspError::InvalidCutoff { cutoff_hz: fc_hz, nyquist_hz });
    }
    Ok(())
}

/// Butterworth design via the analog prototype and the bilinear transform
/// with a prewarped cutoff. `highpass` selects the s -> wc/s mapping.
fn butterworth(order: usize, fc_hz: f64, fs_hz: f64, highpass: bool) -> Result<Vec<Biquad>, DspError> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(DspError::InvalidOrder(order));
    }
    check_cutoff(fc_hz, fs_hz)?;
    let k = 2.0 * fs_hz;
    let wc = k * (PI * fc_hz / fs_hz).tan();
    let sections = (0..order / 2)
        .map(|i| {
            // Prototype pole pair at angle theta; its damping term is 2 cos(phi).
            let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let damping = -2.0 * theta.cos() * wc;
            let d0 = k * k + damping * k + wc * wc;
            let d1 = 2.0 * (wc * wc - k * k);
            let d2 = k * k - damping * k + wc * wc;
            let (b0, b1, b2) = if highpass { (k * k, -2.0 * k * k, k * k) } else { (wc * wc, 2.0 * wc * wc, wc * wc) };
            Biquad { b0: b0 / d0, b1: b1 / d0, b2: b2 / d0, a1: d1 / d0, a2: d2 / d0 }
        })
        .collect();
    Ok(sections)
}

/// Butterworth high-pass of even `order` with -3 dB point at `fc_hz`.
pub fn design_butterworth_highpass(order: usize, fc_hz: f64, fs_hz: f64) -> Result<FilterSpec, DspError> {
    Ok(FilterSpec {
        sections: butterworth(order, fc_hz, fs_hz, true)?,
        fs_hz,
        kind: FilterKind::ButterworthHighpass { order, cutoff_hz: fc_hz },
    })
}

/// Butterworth low-pass of even `order` with -3 dB point at `fc_hz`.
pub fn design_butterworth_lowpass(order: usize, fc_hz: f64, fs_hz: f64) -> Result<FilterSpec, DspError> {
    Ok(FilterSpec {
        sections: butterworth(order, fc_hz, fs_hz, false)?,
        fs_hz,
        kind: FilterKind::ButterworthLowpass { order, cutoff_hz: fc_hz },
    })
}

/// Second-order notch with zeros on the unit circle at `f0_hz`.
pub fn design_notch(f0_hz: f64, q: f64, fs_hz: f64) -> Result<FilterSpec, DspError> {
    let nyquist_hz = fs_hz / 2.0;
    if !(f0_hz > 0.0 && f0_hz < nyquist_hz && q > 0.0 && q.is_finite()) {
        return Err(DspError::InvalidCenter { center_hz: f0_hz, nyquist_hz, q });
    }
    let w0 = 2.0 * PI * f0_hz / fs_hz;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(FilterSpec {
        sections: vec![Biquad { b0: gain, b1: -2.0 * gain * c, b2: gain, a1: -2.0 * gain * c, a2: 2.0 * gain - 1.0 }],
        fs_hz,
        kind: FilterKind::Notch { center_hz: f0_hz, q },
    })
}

/// Causal single-pass filtering from zero initial state.
pub fn sosfilt(spec: &FilterSpec, signal: &[f64]) -> Vec<f64> {
    let mut out = signal.to_vec();
    let mut states = vec![[0.0; 2]; spec.sections.len()];
    spec.run(&mut out, &mut states);
    out
}

/// Zero-phase forward-backward filtering.
///
/// The signal is extended on both sides by odd reflection of
/// [`FilterSpec::pad_len`] samples; each pass starts from the steady state of
/// its first sample. The padding is cropped after the backward pass.
pub fn filtfilt(spec: &FilterSpec, signal: &[f64]) -> Result<Vec<f64>, DspError> {
    let n = signal.len();
    let pad = spec.pad_len();
    if n <= pad {
        return Err(DspError::SignalTooShort { len: n, pad });
    }
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let mut states = spec.steady_states(ext[0]);
    spec.run(&mut ext, &mut states);
    ext.reverse();
    let mut states = spec.steady_states(ext[0]);
    spec.run(&mut ext, &mut states);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// The two-stage cleaning chain applied to every channel: high-pass then notch,
/// each as its own zero-phase pass.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub highpass: FilterSpec,
    pub notch: FilterSpec,
}

impl Preprocessor {
    pub fn new(fs_hz: f64) -> Result<Self, DspError> {
        Ok(Self {
            highpass: design_butterworth_highpass(HIGHPASS_ORDER, HIGHPASS_CUTOFF_HZ, fs_hz)?,
            notch: design_notch(NOTCH_CENTER_HZ, NOTCH_Q, fs_hz)?,
        })
    }

    /// Minimum channel length the chain accepts.
    pub fn min_len(&self) -> usize {
        self.highpass.pad_len().max(self.notch.pad_len()) + 1
    }

    pub fn apply(&self, channel: &[f32]) -> Result<Vec<f32>, DspError> {
        let x: Vec<f64> = channel.iter().map(|&v| f64::from(v)).collect();
        let hp = filtfilt(&self.highpass, &x)?;
        let out = filtfilt(&self.notch, &hp)?;
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    /// Filters a channel-major block of `n_channels` rows in place.
    pub fn apply_block(&self, data: &mut [f32], n_channels: usize) -> Result<(), DspError> {
        let len = data.len() / n_channels.max(1);
        data.par_chunks_mut(len.max(1)).try_for_each(|row| {
            let filtered = self.apply(row)?;
            row.copy_from_slice(&filtered);
            Ok(())
        })
    }
}

/// Filters every channel of a recording; events and metadata are unchanged.
pub fn preprocess_recording(rec: &EmgRecording) -> Result<EmgRecording, DspError> {
    let pre = Preprocessor::new(f64::from(rec.fs_hz))?;
    let mut out = rec.clone();
    pre.apply_block(&mut out.samples, rec.n_channels as usize)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(f: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs + phase).sin()).collect()
    }

    /// Least-squares amplitude and phase of a sinusoid at `f` over `x[range]`.
    fn fit(x: &[f64], f: f64, fs: f64, range: std::ops::Range<usize>) -> (f64, f64) {
        let (mut s, mut c) = (0.0, 0.0);
        let n = range.len() as f64;
        for i in range {
            let w = 2.0 * PI * f * i as f64 / fs;
            s += x[i] * w.sin();
            c += x[i] * w.cos();
        }
        let (s, c) = (2.0 * s / n, 2.0 * c / n);
        (s.hypot(c), c.atan2(s))
    }

    #[test]
    fn highpass_cutoff_is_minus_3db() {
        let hp = design_butterworth_highpass(4, 20.0, 500.0).unwrap();
        assert_eq!(hp.sections.len(), 2);
        assert!((hp.magnitude(20.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(hp.magnitude(0.0), 0.0);
        assert!((hp.magnitude(249.999) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lowpass_cutoff_is_minus_3db() {
        let lp = design_butterworth_lowpass(4, 100.0, 500.0).unwrap();
        assert!((lp.magnitude(100.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((lp.magnitude(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_designs() {
        assert!(matches!(design_butterworth_highpass(4, 300.0, 500.0), Err(DspError::InvalidCutoff { .. })));
        assert!(matches!(design_butterworth_highpass(3, 20.0, 500.0), Err(DspError::InvalidOrder(3))));
        assert!(matches!(design_notch(260.0, 30.0, 500.0), Err(DspError::InvalidCenter { .. })));
        assert!(matches!(design_notch(50.0, 0.0, 500.0), Err(DspError::InvalidCenter { .. })));
    }

    #[test]
    fn notch_response() {
        let notch = design_notch(50.0, 30.0, 500.0).unwrap();
        assert!(notch.magnitude(50.0) < 1e-3);
        assert!((notch.magnitude(0.0) - 1.0).abs() < 1e-6);
        assert!(notch.magnitude(20.0) >= 0.99);
    }

    #[test]
    fn filtfilt_passband_and_stopband() {
        let fs = 500.0;
        let hp = design_butterworth_highpass(4, 20.0, fs).unwrap();
        let n = 5000;
        let mid = 1000..4000;

        let x = sine(100.0, fs, n, 0.0);
        let y = filtfilt(&hp, &x).unwrap();
        let (amp, phase) = fit(&y, 100.0, fs, mid.clone());
        assert!(amp >= 0.99, "amp {amp}");
        assert!(phase.to_degrees().abs() < 1.0, "phase {phase}");

        let x = sine(10.0, fs, n, 0.3);
        let y = filtfilt(&hp, &x).unwrap();
        let (amp, _) = fit(&y, 10.0, fs, mid);
        // forward-backward 4th order Butterworth: (1 + (20/10)^8)^-1 = 1/257
        assert!(amp <= 0.006, "amp {amp}");
        assert!(amp > 1.0 / 257.0 * 0.9);
    }

    #[test]
    fn filtfilt_dc_goes_to_zero() {
        let hp = design_butterworth_highpass(4, 20.0, 500.0).unwrap();
        let y = filtfilt(&hp, &[3.5; 200]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn filtfilt_too_short() {
        let hp = design_butterworth_highpass(4, 20.0, 500.0).unwrap();
        assert_eq!(hp.pad_len(), 27);
        assert!(matches!(filtfilt(&hp, &[0.0; 27]), Err(DspError::SignalTooShort { len: 27, pad: 27 })));
        assert_eq!(filtfilt(&hp, &[0.0; 28]).unwrap().len(), 28);
    }

    #[test]
    fn zero_phase_cross_correlation_peaks_at_zero() {
        let fs = 500.0;
        let hp = design_butterworth_highpass(4, 20.0, fs).unwrap();
        for f in [27.0, 60.0, 110.0, 190.0] {
            let x = sine(f, fs, 2000, 0.7);
            let y = filtfilt(&hp, &x).unwrap();
            let xcorr = |lag: i64| -> f64 { (200..1800).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum() };
            let best = (-5..=5).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
            assert_eq!(best, 0, "f = {f}");
        }
    }

    #[test]
    fn preprocess_keeps_zero_recording_zero() {
        let rec = EmgRecording::new(500, 2, 0.0, vec![0.0; 2 * 600], vec![]).unwrap();
        let out = preprocess_recording(&rec).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn designs_are_stable(fs in 100.0f64..4000.0, rel in 0.005f64..0.45, order in 1usize..5) {
            let fc = rel * fs;
            let hp = design_butterworth_highpass(2 * order, fc, fs).unwrap();
            prop_assert!(hp.max_pole_radius() < 1.0);
            let lp = design_butterworth_lowpass(2 * order, fc, fs).unwrap();
            prop_assert!(lp.max_pole_radius() < 1.0);
            let notch = design_notch(fc, 1.0 + rel * 60.0, fs).unwrap();
            prop_assert!(notch.max_pole_radius() < 1.0);
        }

        #[test]
        fn filtfilt_is_linear_and_length_preserving(
            x in proptest::collection::vec(-10.0f64..10.0, 60..200),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let hp = design_butterworth_highpass(4, 20.0, 500.0).unwrap();
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (i as f64 * 0.37).sin() * v.abs()).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let fx = filtfilt(&hp, &x).unwrap();
            let fy = filtfilt(&hp, &y).unwrap();
            let fmix = filtfilt(&hp, &mix).unwrap();
            prop_assert_eq!(fmix.len(), x.len());
            let scale = fmix.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for i in 0..x.len() {
                prop_assert!((fmix[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9 * scale);
            }
        }
    }
}
