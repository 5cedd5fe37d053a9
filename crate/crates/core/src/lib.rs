//! Speech-command recognition from neck surface EMG.
//!
//! The crate covers the full software path from a raw 14-channel recording to
//! a per-window command label:
//!
//! ```text
//! SWR1 recording ── dsp::preprocess_recording (HP 20 Hz + notch 50 Hz, zero phase)
//!   └─ emgio::segment / extract_window / balance_rest
//!        └─ speechnet::normalize_window (per-channel z-score)
//!             ├─ training::train / fine_tune          (float CNN, Adam)
//!             ├─ quantize::calibrate_and_quantize    (int8 PTQ, BN folded)
//!             ├─ evalharness::run_setting ...        (fold protocols, ITR)
//!             └─ streamrt::stream_classify           (sliding window, 100 ms hop)
//! ```
//!
//! A seeded synthetic generator ([`emgio::synth`]) provides learnable data for
//! desk-scale verification of every stage.

pub mod dsp;
pub mod emgio;
pub mod evalharness;
pub mod nnkernels;
pub mod quantize;
pub mod seed;
pub mod speechnet;
pub mod streamrt;
pub mod training;

pub use emgio::{CommandLabel, Condition, EmgRecording, Event, LabeledWindow};
pub use speechnet::SpeechNet;

/// Number of output classes: eight commands plus rest.
pub const NUM_CLASSES: usize = 9;
/// Channel count of the acquisition front end.
pub const NUM_CHANNELS: usize = 14;
/// Canonical sampling rate in Hz.
pub const DEFAULT_FS_HZ: u32 = 500;

/// Crate-wide error, wrapping the per-module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] emgio::EmgIoError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Kernel(#[from] nnkernels::KernelError),
    #[error(transparent)]
    Model(#[from] speechnet::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Quant(#[from] quantize::QuantError),
    #[error(transparent)]
    Eval(#[from] evalharness::EvalError),
    #[error(transparent)]
    Stream(#[from] streamrt::StreamError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
