//! Sliding-window streaming classification on the integer model.
//!
//! Samples arrive one frame (all channels) at a time into a ring buffer.
//! Once a full window is buffered, and then every `step` samples, the window
//! is copied out, filtered zero-phase on its own, z-scored per channel and
//! run through [`QuantizedSpeechNet::qforward`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsp::{DspError, Preprocessor};
use crate::emgio::{window_samples, EmgRecording};
use crate::nnkernels::softmax;
use crate::quantize::{QuantError, QuantizedSpeechNet};
use crate::speechnet::{argmax, normalize_window, MIN_WINDOW};
use crate::{seed, CommandLabel};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("SourceUnderrun: feed ended {pending} samples into a {needed}-sample wait; partial window dropped")]
    SourceUnderrun { pending: usize, needed: usize },
    #[error("ChannelMismatch: source has {found} channels, model expects {expected}")]
    ChannelMismatch { found: usize, expected: usize },
    #[error("RateMismatch: source sampled at {found} Hz, stream configured for {expected} Hz")]
    RateMismatch { found: u32, expected: u32 },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub window_ms: u32,
    pub step_ms: u32,
    pub fs_hz: u32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { window_ms: 800, step_ms: 100, fs_hz: crate::DEFAULT_FS_HZ }
    }
}

impl StreamConfig {
    pub fn window_len(&self) -> usize {
        window_samples(self.window_ms, self.fs_hz)
    }

    pub fn step_len(&self) -> usize {
        window_samples(self.step_ms, self.fs_hz)
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if self.step_ms == 0 || self.step_ms > self.window_ms {
            return Err(StreamError::InvalidConfig(format!(
                "step {} ms must be positive and at most the {} ms window",
                self.step_ms, self.window_ms
            )));
        }
        if self.window_len() < MIN_WINDOW || self.step_len() == 0 {
            return Err(StreamError::InvalidConfig(format!(
                "window of {} samples, need at least {MIN_WINDOW}",
                self.window_len()
            )));
        }
        Ok(())
    }

    /// Predictions produced by a source of `n` samples.
    pub fn expected_predictions(&self, n: usize) -> usize {
        let (w, s) = (self.window_len(), self.step_len());
        if n < w {
            0
        } else {
            (n - w) / s + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPrediction {
    /// One past the last sample of the window.
    pub end_sample: usize,
    pub label: CommandLabel,
    pub probabilities: Vec<f32>,
    pub logits: Vec<f32>,
    pub latency_ms: f64,
}

/// Filters, normalizes and classifies one channel-major window.
fn classify_window(
    model: &QuantizedSpeechNet,
    pre: &Preprocessor,
    window: &mut [f32],
    t: usize,
) -> Result<Vec<f32>, StreamError> {
    let n_ch = window.len() / t;
    for row in window.chunks_exact_mut(t) {
        let filtered = pre.apply(row)?;
        row.copy_from_slice(&filtered);
    }
    normalize_window(window, n_ch);
    Ok(model.qforward(window, t)?)
}

fn prediction(end_sample: usize, logits: Vec<f32>, started: Instant) -> TimedPrediction {
    let label = CommandLabel::from_id(argmax(&logits)).unwrap_or(CommandLabel::Rest);
    TimedPrediction {
        end_sample,
        label,
        probabilities: softmax(&logits),
        logits,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Incremental classifier over a frame-by-frame feed.
pub struct StreamClassifier<'m> {
    cfg: StreamConfig,
    model: &'m QuantizedSpeechNet,
    pre: Preprocessor,
    n_channels: usize,
    window: usize,
    step: usize,
    /// Channel-major ring, `window` slots per channel.
    ring: Vec<f32>,
    head: usize,
    received: usize,
    scratch: Vec<f32>,
}

impl<'m> StreamClassifier<'m> {
    pub fn new(cfg: StreamConfig, model: &'m QuantizedSpeechNet) -> Result<Self, StreamError> {
        cfg.validate()?;
        let n_channels = model.n_channels();
        let window = cfg.window_len();
        let pre = Preprocessor::new(f64::from(cfg.fs_hz))?;
        if window < pre.min_len() {
            return Err(StreamError::InvalidConfig(format!(
                "window of {window} samples is shorter than the filter padding"
            )));
        }
        Ok(Self {
            cfg,
            model,
            pre,
            n_channels,
            window,
            step: cfg.step_len(),
            ring: vec![0.0; n_channels * window],
            head: 0,
            received: 0,
            scratch: vec![0.0; n_channels * window],
        })
    }

    pub fn config(&self) -> StreamConfig {
        self.cfg
    }

    pub fn received(&self) -> usize {
        self.received
    }

    /// Adds one frame (one value per channel); returns a prediction when one is due.
    pub fn push(&mut self, frame: &[f32]) -> Result<Option<TimedPrediction>, StreamError> {
        if frame.len() != self.n_channels {
            return Err(StreamError::ChannelMismatch { found: frame.len(), expected: self.n_channels });
        }
        for (k, &v) in frame.iter().enumerate() {
            self.ring[k * self.window + self.head] = v;
        }
        self.head = (self.head + 1) % self.window;
        self.received += 1;
        if self.received < self.window || !(self.received - self.window).is_multiple_of(self.step) {
            return Ok(None);
        }
        let started = Instant::now();
        // Oldest sample sits at `head` once the ring is full.
        let w = self.window;
        for k in 0..self.n_channels {
            let src = &self.ring[k * w..(k + 1) * w];
            let dst = &mut self.scratch[k * w..(k + 1) * w];
            dst[..w - self.head].copy_from_slice(&src[self.head..]);
            dst[w - self.head..].copy_from_slice(&src[..self.head]);
        }
        let logits = classify_window(self.model, &self.pre, &mut self.scratch, w)?;
        Ok(Some(prediction(self.received, logits, started)))
    }

    /// Ends the feed; an incomplete window or step is reported as an underrun.
    pub fn finish(&self) -> Result<(), StreamError> {
        let (pending, needed) = if self.received < self.window {
            (self.received, self.window)
        } else {
            ((self.received - self.window) % self.step, self.step)
        };
        if pending > 0 {
            Err(StreamError::SourceUnderrun { pending, needed })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutput {
    pub predictions: Vec<TimedPrediction>,
    /// Set when the recording ends inside a window or step.
    pub underrun: Option<String>,
}

fn check_source(cfg: &StreamConfig, model: &QuantizedSpeechNet, rec: &EmgRecording) -> Result<(), StreamError> {
    if rec.n_channels as usize != model.n_channels() {
        return Err(StreamError::ChannelMismatch { found: rec.n_channels as usize, expected: model.n_channels() });
    }
    if rec.fs_hz != cfg.fs_hz {
        return Err(StreamError::RateMismatch { found: rec.fs_hz, expected: cfg.fs_hz });
    }
    Ok(())
}

/// Replays a recording frame by frame through a [`StreamClassifier`].
pub fn stream_classify(
    cfg: &StreamConfig,
    model: &QuantizedSpeechNet,
    rec: &EmgRecording,
) -> Result<StreamOutput, StreamError> {
    check_source(cfg, model, rec)?;
    let mut sc = StreamClassifier::new(*cfg, model)?;
    let n_ch = rec.n_channels as usize;
    let mut frame = vec![0.0f32; n_ch];
    let mut predictions = Vec::with_capacity(cfg.expected_predictions(rec.n_samples));
    for i in 0..rec.n_samples {
        for (k, f) in frame.iter_mut().enumerate() {
            *f = rec.samples[k * rec.n_samples + i];
        }
        if let Some(p) = sc.push(&frame)? {
            predictions.push(p);
        }
    }
    let underrun = sc.finish().err().map(|e| e.to_string());
    Ok(StreamOutput { predictions, underrun })
}

/// The same window grid as [`stream_classify`], sliced straight from the recording.
pub fn batch_classify(
    cfg: &StreamConfig,
    model: &QuantizedSpeechNet,
    rec: &EmgRecording,
) -> Result<Vec<TimedPrediction>, StreamError> {
    check_source(cfg, model, rec)?;
    cfg.validate()?;
    let pre = Preprocessor::new(f64::from(cfg.fs_hz))?;
    let (w, s) = (cfg.window_len(), cfg.step_len());
    let n_ch = rec.n_channels as usize;
    let mut out = Vec::new();
    let mut end = w;
    while end <= rec.n_samples {
        let started = Instant::now();
        let mut window: Vec<f32> = (0..n_ch).flat_map(|k| rec.channel(k)[end - w..end].iter().copied()).collect();
        let logits = classify_window(model, &pre, &mut window, w)?;
        out.push(prediction(end, logits, started));
        end += s;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_timed: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub inferences_per_s: f64,
    /// `std / mean < 0.5`.
    pub valid: bool,
}

/// Times the per-window path (filter, normalize, integer forward) on seeded
/// noise windows, single-threaded. Warm-up runs are excluded.
pub fn bench_throughput(
    cfg: &StreamConfig,
    model: &QuantizedSpeechNet,
    n_windows: usize,
    warmup: usize,
) -> Result<BenchReport, StreamError> {
    cfg.validate()?;
    if n_windows < 100 {
        return Err(StreamError::InvalidConfig(format!("{n_windows} timed windows, need at least 100")));
    }
    use rand::Rng;
    let pre = Preprocessor::new(f64::from(cfg.fs_hz))?;
    let t = cfg.window_len();
    let mut rng = seed::rng(0, "bench_throughput");
    let base: Vec<f32> = (0..model.n_channels() * t).map(|_| rng.random_range(-50.0..50.0)).collect();
    let mut times = Vec::with_capacity(n_windows);
    for i in 0..warmup + n_windows {
        let mut w = base.clone();
        let started = Instant::now();
        let logits = classify_window(model, &pre, &mut w, t)?;
        let dt = started.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(logits);
        if i >= warmup {
            times.push(dt);
        }
    }
    let (mean_ms, std_ms) = crate::evalharness::mean_std(&times);
    Ok(BenchReport {
        n_timed: times.len(),
        warmup,
        mean_ms,
        std_ms,
        inferences_per_s: 1e3 / mean_ms,
        valid: std_ms / mean_ms < 0.5,
    })
}
