//! Seeded synthetic neck-EMG generator.
//!
//! Each batch recording follows the acquisition timeline: every command is
//! repeated `reps_per_command` times in shuffled order, each repetition being
//! a 2 s production interval followed by a 1.5 s rest interval.
//!
//! The signal model per channel `k` is
//!
//! ```text
//! x_k(t) = g_k * (bg_k(t) + sum_e A_e env_e(t) u_{c(e),k} src(t)) + mains_k(t) + drift_k(t)
//! ```
//!
//! with `bg_k` and `src` independent 20-250 Hz band-limited Gaussian noise,
//! `env_e` a Hann bump after a random reaction delay, and `u_c` the class's
//! spatial mixing vector. The nine mixing vectors of a subject are
//! orthonormal, which keeps the classes separable. A session perturbation
//! (channel permutation blended in by `session_shift_strength`, plus channel
//! gains) emulates repositioning of the electrodes between sessions.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    write_recording, BatchEntry, BatchKey, CommandLabel, Condition, DatasetManifest, EmgIoError, EmgRecording, Event,
    RecordingSource, SessionEntry, SubjectEntry,
};
use crate::dsp;
use crate::seed;

pub const LEAD_IN_S: f64 = 0.5;
pub const PRODUCTION_S: f64 = 2.0;
pub const REST_S: f64 = 1.5;
pub const TAIL_S: f64 = 0.5;

const VOCALIZED_GAIN: f64 = 8.0;
const SILENT_GAIN: f64 = 5.0;
const REST_GAIN_FACTOR: f64 = 0.35;
const BATCH_GAIN_JITTER: f64 = 0.02;
const SESSION_GAIN_SPREAD: f64 = 0.25;

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: u32,
    pub n_sessions: u32,
    pub n_batches: u32,
    pub reps_per_command: u32,
    pub fs_hz: u32,
    pub n_channels: u16,
    /// 0 keeps every session identical in distribution; 1 fully permutes the
    /// spatial patterns between sessions.
    pub session_shift_strength: f64,
    pub conditions: Vec<Condition>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_sessions: 3,
            n_batches: 5,
            reps_per_command: 20,
            fs_hz: crate::DEFAULT_FS_HZ,
            n_channels: crate::NUM_CHANNELS as u16,
            session_shift_strength: 0.0,
            conditions: vec![Condition::Vocalized, Condition::Silent],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), EmgIoError> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("n_sessions", self.n_sessions),
            ("n_batches", self.n_batches),
            ("reps_per_command", self.reps_per_command),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(EmgIoError::InvalidSpec(format!("{name} must be positive")));
        }
        if self.fs_hz <= 100 {
            return Err(EmgIoError::InvalidSpec(format!("fs_hz {} must exceed 100 Hz", self.fs_hz)));
        }
        if (self.n_channels as usize) < CommandLabel::ALL.len() {
            return Err(EmgIoError::InvalidSpec(format!(
                "n_channels {} cannot hold 9 orthogonal patterns",
                self.n_channels
            )));
        }
        if !(self.session_shift_strength >= 0.0 && self.session_shift_strength.is_finite()) {
            return Err(EmgIoError::InvalidSpec("session_shift_strength must be >= 0".into()));
        }
        if self.conditions.is_empty() {
            return Err(EmgIoError::InvalidSpec("at least one condition required".into()));
        }
        Ok(())
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * f64::from(self.fs_hz)).round() as usize
    }

    /// Samples in one batch recording.
    pub fn batch_len(&self) -> usize {
        let n_utt = self.reps_per_command as usize * CommandLabel::COMMANDS.len();
        self.samples(LEAD_IN_S) + n_utt * (self.samples(PRODUCTION_S) + self.samples(REST_S)) + self.samples(TAIL_S)
    }

    pub fn batch_path(key: &BatchKey) -> String {
        format!("subject{:02}/session{}/{}_batch{}.swr1", key.subject, key.session, key.condition, key.batch)
    }
}

/// A synthetic dataset addressed by batch key; recordings are generated on
/// demand and are a pure function of `(spec, seed, key)`.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    spec: SynthSpec,
    seed: u64,
    manifest: DatasetManifest,
}

impl SynthDataset {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self, EmgIoError> {
        spec.validate()?;
        let subjects = (1..=spec.n_subjects)
            .map(|subject| SubjectEntry {
                id: subject,
                sessions: (1..=spec.n_sessions)
                    .map(|session| SessionEntry {
                        id: session,
                        batches: spec
                            .conditions
                            .iter()
                            .flat_map(|&condition| {
                                (1..=spec.n_batches).map(move |batch| {
                                    let key = BatchKey { subject, session, batch, condition };
                                    BatchEntry { id: batch, condition, path: SynthSpec::batch_path(&key) }
                                })
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let manifest = DatasetManifest { version: 1, fs_hz: spec.fs_hz, subjects };
        Ok(Self { spec, seed, manifest })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    fn check_key(&self, key: &BatchKey) -> Result<(), EmgIoError> {
        let s = &self.spec;
        let ok = (1..=s.n_subjects).contains(&key.subject)
            && (1..=s.n_sessions).contains(&key.session)
            && (1..=s.n_batches).contains(&key.batch)
            && s.conditions.contains(&key.condition);
        if ok {
            Ok(())
        } else {
            Err(EmgIoError::InvalidManifest(format!("({key}) is not part of this dataset")))
        }
    }

    fn recording_rng(&self, key: &BatchKey) -> ChaCha8Rng {
        seed::rng(
            self.seed,
            &format!("synth/subject{}/session{}/batch{}/{}", key.subject, key.session, key.batch, key.condition),
        )
    }

    /// Orthonormal spatial patterns of a subject, one row per class.
    fn patterns(&self, subject: u32) -> Vec<Vec<f64>> {
        let n_ch = self.spec.n_channels as usize;
        let mut rng = seed::rng(self.seed, &format!("synth/subject{subject}/patterns"));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(9);
        while basis.len() < CommandLabel::ALL.len() {
            let mut v: Vec<f64> = (0..n_ch).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        basis
    }

    /// Patterns after the session's placement perturbation, plus channel gains.
    fn session_layout(&self, subject: u32, session: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n_ch = self.spec.n_channels as usize;
        let mut rng = seed::rng(self.seed, &format!("synth/subject{subject}/session{session}/placement"));
        let mut perm: Vec<usize> = (0..n_ch).collect();
        perm.shuffle(&mut rng);
        let z: Vec<f64> = (0..n_ch).map(|_| rng.sample(StandardNormal)).collect();

        let strength = self.spec.session_shift_strength;
        let blend = strength.min(1.0);
        let gains = z.iter().map(|z| (strength * SESSION_GAIN_SPREAD * z).exp()).collect();
        let patterns = self
            .patterns(subject)
            .into_iter()
            .map(|v| {
                let mixed: Vec<f64> = (0..n_ch).map(|k| (1.0 - blend) * v[k] + blend * v[perm[k]]).collect();
                let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                mixed.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        (patterns, gains)
    }

    /// Subject-level interference amplitudes: (mains, [(drift freq, drift amp); 2]) per channel.
    fn interference(&self, subject: u32) -> Vec<(f64, [(f64, f64); 2])> {
        let mut rng = seed::rng(self.seed, &format!("synth/subject{subject}/interference"));
        (0..self.spec.n_channels)
            .map(|_| {
                let mains = rng.random_range(1.0..3.0);
                let drift = [
                    (rng.random_range(0.1..2.0), rng.random_range(2.0..6.0)),
                    (rng.random_range(0.1..2.0), rng.random_range(2.0..6.0)),
                ];
                (mains, drift)
            })
            .collect()
    }

    /// Trigger events of one batch, without generating samples.
    pub fn events(&self, key: &BatchKey) -> Result<Vec<Event>, EmgIoError> {
        self.check_key(key)?;
        let mut rng = self.recording_rng(key);
        Ok(self.timeline(&mut rng, key.condition))
    }

    fn timeline(&self, rng: &mut ChaCha8Rng, condition: Condition) -> Vec<Event> {
        let mut order: Vec<CommandLabel> = CommandLabel::COMMANDS
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, self.spec.reps_per_command as usize))
            .collect();
        order.shuffle(rng);
        let prod = self.spec.samples(PRODUCTION_S);
        let rest = self.spec.samples(REST_S);
        let mut t = self.spec.samples(LEAD_IN_S);
        let mut events = Vec::with_capacity(order.len() * 2);
        for label in order {
            events.push(Event { onset_sample: t, end_sample: t + prod, label, condition });
            t += prod;
            events.push(Event { onset_sample: t, end_sample: t + rest, label: CommandLabel::Rest, condition });
            t += rest;
        }
        events
    }

    fn band_noise(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let fs = f64::from(self.spec.fs_hz);
        let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let hp = dsp::design_butterworth_highpass(4, 20.0, fs).expect("fs validated above 100 Hz");
        let mut x = dsp::sosfilt(&hp, &white);
        if fs > 2.0 * 250.0 + 1.0 {
            let lp = dsp::design_butterworth_lowpass(4, 250.0, fs).expect("250 Hz below Nyquist");
            x = dsp::sosfilt(&lp, &x);
        }
        x
    }

    /// Generates one batch recording.
    pub fn generate(&self, key: &BatchKey) -> Result<EmgRecording, EmgIoError> {
        self.check_key(key)?;
        let spec = &self.spec;
        let n_ch = spec.n_channels as usize;
        let n = spec.batch_len();
        let fs = f64::from(spec.fs_hz);
        let (patterns, session_gains) = self.session_layout(key.subject, key.session);
        let interference = self.interference(key.subject);

        let mut rng = self.recording_rng(key);
        let events = self.timeline(&mut rng, key.condition);
        let base_gain = match key.condition {
            Condition::Vocalized => VOCALIZED_GAIN,
            Condition::Silent => SILENT_GAIN,
        };

        // activation drive per channel, accumulated event by event
        let src = self.band_noise(&mut rng, n);
        let mut drive = vec![0.0f64; n_ch * n];
        for ev in &events {
            let delay = rng.random_range(0.10..0.30);
            let dur = rng.random_range(0.45..0.75);
            let mut amp = base_gain * rng.random_range(0.8..1.2);
            if ev.label.is_rest() {
                amp *= REST_GAIN_FACTOR;
            }
            let start = ev.onset_sample + (delay * fs) as usize;
            let len = ((dur * fs) as usize).min(ev.end_sample.saturating_sub(start));
            let pattern = &patterns[ev.label.id()];
            for i in 0..len {
                let env = 0.5 * (1.0 - (2.0 * PI * i as f64 / len as f64).cos());
                let s = amp * env * src[start + i];
                for k in 0..n_ch {
                    drive[k * n + start + i] += s * pattern[k];
                }
            }
        }

        let mut samples = Vec::with_capacity(n_ch * n);
        for (k, (mains, drift)) in interference.iter().enumerate() {
            let jitter: f64 = rng.sample(StandardNormal);
            let gain = session_gains[k] * (BATCH_GAIN_JITTER * jitter).exp();
            let mains_phase = rng.random_range(0.0..2.0 * PI);
            let drift_phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
            let bg = self.band_noise(&mut rng, n);
            for i in 0..n {
                let t = i as f64 / fs;
                let mut v = gain * (bg[i] + drive[k * n + i]);
                v += mains * (2.0 * PI * 50.0 * t + mains_phase).sin();
                for (d, phase) in drift.iter().zip(drift_phase) {
                    v += d.1 * (2.0 * PI * d.0 * t + phase).sin();
                }
                samples.push(v as f32);
            }
        }
        EmgRecording::new(spec.fs_hz, spec.n_channels, 0.0, samples, events)
    }

    /// Writes every recording plus `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<DatasetManifest, EmgIoError> {
        for (key, entry) in self.manifest.keys() {
            let rec = self.generate(&key)?;
            write_recording(&out_dir.join(&entry.path), &rec)?;
        }
        self.manifest.save(&out_dir.join("manifest.json"))?;
        Ok(self.manifest.clone())
    }
}

impl RecordingSource for SynthDataset {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn recording(&self, key: &BatchKey) -> Result<EmgRecording, EmgIoError> {
        self.generate(key)
    }
}

/// Generates a dataset and writes it to `out_dir`.
pub fn synth_dataset(spec: SynthSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest, EmgIoError> {
    SynthDataset::new(spec, seed)?.write(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: f64) -> SynthSpec {
        SynthSpec {
            n_subjects: 1,
            n_sessions: 2,
            n_batches: 1,
            reps_per_command: 4,
            session_shift_strength: shift,
            conditions: vec![Condition::Vocalized],
            ..SynthSpec::default()
        }
    }

    #[test]
    fn canonical_utterance_counts() {
        let ds = SynthDataset::new(SynthSpec::default(), 3).unwrap();
        let mut words = 0;
        let mut rest = 0;
        for (key, _) in ds.manifest().keys().filter(|(k, _)| k.subject == 2 && k.condition == Condition::Silent) {
            for ev in ds.events(&key).unwrap() {
                if ev.label.is_rest() {
                    rest += 1;
                } else {
                    words += 1;
                }
            }
        }
        assert_eq!(words, 2400);
        assert_eq!(rest, 2400);
        assert_eq!(ds.manifest().keys().count(), 4 * 3 * 5 * 2);
    }

    #[test]
    fn timing_matches_protocol() {
        let ds = SynthDataset::new(small(0.0), 1).unwrap();
        let key = BatchKey { subject: 1, session: 1, batch: 1, condition: Condition::Vocalized };
        let rec = ds.generate(&key).unwrap();
        assert_eq!(rec.n_samples, 250 + 32 * 1750 + 250);
        assert_eq!(rec.events[0].onset_sample, 250);
        assert!(rec.events.iter().all(|e| e.len() == if e.label.is_rest() { 750 } else { 1000 }));
        assert_eq!(rec.events, ds.events(&key).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let key = BatchKey { subject: 1, session: 2, batch: 1, condition: Condition::Vocalized };
        let a = SynthDataset::new(small(0.5), 9).unwrap().generate(&key).unwrap();
        let b = SynthDataset::new(small(0.5), 9).unwrap().generate(&key).unwrap();
        assert_eq!(crate::emgio::serialize_recording(&a), crate::emgio::serialize_recording(&b));
        let c = SynthDataset::new(small(0.5), 10).unwrap().generate(&key).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn zero_shift_keeps_session_statistics() {
        let ds = SynthDataset::new(small(0.0), 4).unwrap();
        let rms = |session| {
            let key = BatchKey { subject: 1, session, batch: 1, condition: Condition::Vocalized };
            let rec = dsp::preprocess_recording(&ds.generate(&key).unwrap()).unwrap();
            (0..14)
                .map(|k| {
                    let ch = rec.channel(k);
                    (ch.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / ch.len() as f64).sqrt()
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (rms(1), rms(2));
        for k in 0..14 {
            let ratio = a[k] / b[k];
            assert!((ratio - 1.0).abs() < 0.15, "channel {k}: ratio {ratio}");
        }
    }

    #[test]
    fn patterns_are_orthonormal() {
        let ds = SynthDataset::new(small(0.0), 5).unwrap();
        let p = ds.patterns(1);
        for i in 0..9 {
            for j in 0..9 {
                let dot: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_spec() {
        let spec = SynthSpec { n_batches: 0, ..SynthSpec::default() };
        assert!(matches!(SynthDataset::new(spec, 0), Err(EmgIoError::InvalidSpec(_))));
    }
}
