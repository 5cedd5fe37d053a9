//! Run configuration file and config echo.

use std::fs;
use std::path::{Path, PathBuf};

use emgspeech::emgio::SynthSpec;
use emgspeech::evalharness::EvalConfig;
use emgspeech::quantize::DEFAULT_CALIBRATION_WINDOWS;
use emgspeech::streamrt::StreamConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::GlobalOpts;

pub const DEFAULT_OUT: &str = "emgspeech-out";
pub const ECHO_FILE: &str = "config_echo.json";

/// Keys mirror the library configuration types. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub stream: StreamConfig,
    pub calibration_windows: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            stream: StreamConfig::default(),
            calibration_windows: DEFAULT_CALIBRATION_WINDOWS,
        }
    }
}

impl RunConfig {
    /// Reads the config file (if any) and applies the global flags on top.
    pub fn resolve(opts: &GlobalOpts) -> Result<(Self, PathBuf), CliError> {
        let mut cfg = match &opts.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => Self::default(),
        };
        if let Some(seed) = opts.seed {
            cfg.seed = seed;
        }
        let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok((cfg, out))
    }
}

#[derive(Serialize)]
struct Echo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
}

/// Writes `config_echo.json` with the resolved configuration and a version stamp.
pub fn write_echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let echo = Echo { tool: "emgspeech", version: env!("CARGO_PKG_VERSION"), command, config: cfg };
    write_json(&dir.join(ECHO_FILE), &echo)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"eval": {"train": {"max_epoch": 3}}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let ok = r#"{"seed": 3, "eval": {"train": {"max_epochs": 3}}}"#;
        let cfg: RunConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.eval.train.max_epochs, 3);
        assert_eq!(cfg.eval.train.batch_size, 32);
    }
}
