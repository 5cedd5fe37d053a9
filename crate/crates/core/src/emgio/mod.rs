//! Recording container, dataset manifest, segmentation and windowing.

mod format;
mod manifest;
pub mod synth;
mod window;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use format::{
    attach_events, events_path, parse_recording, read_events, read_recording, serialize_recording, write_recording,
    RECORDING_MAGIC, RECORDING_VERSION,
};
pub use manifest::{BatchEntry, DatasetManifest, ManifestSource, RecordingSource, SessionEntry, SubjectEntry};
pub use synth::{synth_dataset, SynthDataset, SynthSpec};
pub use window::{balance_rest, extract_window, segment, window_samples, HasLabel, Segment};

#[derive(Debug, thiserror::Error)]
pub enum EmgIoError {
    #[error("BadMagic: expected \"SWR1\" at byte offset {offset}")]
    BadMagic { offset: usize },
    #[error("UnsupportedVersion: recording version {0}")]
    UnsupportedVersion(u16),
    #[error("BadHeader: {0}")]
    BadHeader(String),
    #[error("TruncatedPayload: needed {expected} bytes, found {actual} (payload starts at byte offset {offset})")]
    TruncatedPayload { offset: usize, expected: usize, actual: usize },
    #[error("EventOutOfRange: event {index} spans [{onset}, {end}) but recording has {n_samples} samples")]
    EventOutOfRange { index: usize, onset: usize, end: usize, n_samples: usize },
    #[error("EventOverlap: event {index} starts before the previous event ends")]
    EventOverlap { index: usize },
    #[error("SegmentTooShort: segment has {len} samples, window needs {needed}")]
    SegmentTooShort { len: usize, needed: usize },
    #[error("InsufficientRest: {available} rest windows, balancing needs {needed}")]
    InsufficientRest { available: usize, needed: usize },
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("InvalidManifest: {0}")]
    InvalidManifest(String),
    #[error("UnknownLabel: {0}")]
    UnknownLabel(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The nine classes. Integer ids are stable and `Rest` is always 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandLabel {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Forward = 4,
    Backward = 5,
    Start = 6,
    Stop = 7,
    Rest = 8,
}

impl CommandLabel {
    pub const ALL: [CommandLabel; 9] = [
        Self::Up,
        Self::Down,
        Self::Left,
        Self::Right,
        Self::Forward,
        Self::Backward,
        Self::Start,
        Self::Stop,
        Self::Rest,
    ];

    /// The eight spoken commands, excluding rest.
    pub const COMMANDS: [CommandLabel; 8] =
        [Self::Up, Self::Down, Self::Left, Self::Right, Self::Forward, Self::Backward, Self::Start, Self::Stop];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Up => "up",
            Self::Down => "down",
            Self::Left => "left",
            Self::Right => "right",
            Self::Forward => "forward",
            Self::Backward => "backward",
            Self::Start => "start",
            Self::Stop => "stop",
            Self::Rest => "rest",
        }
    }

    pub fn is_rest(self) -> bool {
        self == Self::Rest
    }
}

impl fmt::Display for CommandLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CommandLabel {
    type Err = EmgIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|l| l.name() == s).ok_or_else(|| EmgIoError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Vocalized,
    Silent,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vocalized => "vocalized",
            Self::Silent => "silent",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = EmgIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vocalized" => Ok(Self::Vocalized),
            "silent" => Ok(Self::Silent),
            other => Err(EmgIoError::UnknownLabel(other.to_string())),
        }
    }
}

/// A labeled trigger interval `[onset_sample, end_sample)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub onset_sample: usize,
    pub end_sample: usize,
    pub label: CommandLabel,
    pub condition: Condition,
}

impl Event {
    pub fn len(&self) -> usize {
        self.end_sample - self.onset_sample
    }

    pub fn is_empty(&self) -> bool {
        self.end_sample == self.onset_sample
    }
}

/// Identifies one batch recording: `(subject, session, batch, condition)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchKey {
    pub subject: u32,
    pub session: u32,
    pub batch: u32,
    pub condition: Condition,
}

impl fmt::Display for BatchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subject {} session {} batch {} {}", self.subject, self.session, self.batch, self.condition)
    }
}

/// One continuous multichannel acquisition. Samples are channel-major:
/// channel `k` occupies `samples[k * n_samples..(k + 1) * n_samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecording {
    pub fs_hz: u32,
    pub n_channels: u16,
    /// ADC scale; 0 means raw counts. Carried through but never applied.
    pub volts_per_count: f64,
    pub n_samples: usize,
    pub samples: Vec<f32>,
    pub events: Vec<Event>,
}

impl EmgRecording {
    pub fn new(
        fs_hz: u32,
        n_channels: u16,
        volts_per_count: f64,
        samples: Vec<f32>,
        events: Vec<Event>,
    ) -> Result<Self, EmgIoError> {
        if fs_hz == 0 || n_channels == 0 {
            return Err(EmgIoError::BadHeader(format!(
                "fs_hz ({fs_hz}) and n_channels ({n_channels}) must be positive"
            )));
        }
        if !samples.len().is_multiple_of(n_channels as usize) {
            return Err(EmgIoError::BadHeader(format!(
                "{} samples do not divide into {n_channels} channels",
                samples.len()
            )));
        }
        let n_samples = samples.len() / n_channels as usize;
        let rec = Self { fs_hz, n_channels, volts_per_count, n_samples, samples, events: Vec::new() };
        attach_events(rec, events)
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        &self.samples[k * self.n_samples..(k + 1) * self.n_samples]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / f64::from(self.fs_hz)
    }
}

/// A fixed-length `n_channels x len` window with its class and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub data: Vec<f32>,
    pub n_channels: usize,
    pub len: usize,
    pub label: CommandLabel,
    pub meta: BatchKey,
}

impl LabeledWindow {
    pub fn channel(&self, k: usize) -> &[f32] {
        &self.data[k * self.len..(k + 1) * self.len]
    }
}

impl HasLabel for LabeledWindow {
    fn label(&self) -> CommandLabel {
        self.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_ids_are_a_bijection() {
        for (i, l) in CommandLabel::ALL.iter().enumerate() {
            assert_eq!(l.id(), i);
            assert_eq!(CommandLabel::from_id(i), Some(*l));
            assert_eq!(l.name().parse::<CommandLabel>().unwrap(), *l);
            let json = serde_json::to_string(l).unwrap();
            assert_eq!(serde_json::from_str::<CommandLabel>(&json).unwrap(), *l);
        }
        assert_eq!(CommandLabel::Rest.id(), 8);
        assert_eq!(CommandLabel::from_id(9), None);
    }
}
