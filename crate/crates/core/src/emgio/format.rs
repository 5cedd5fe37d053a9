//! SWR1 container.
//!
//! Little-endian layout:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `SWR1`                  |
//! | 4      | 2    | version (1)                   |
//! | 6      | 2    | n_channels                    |
//! | 8      | 4    | fs_hz                         |
//! | 12     | 8    | n_samples                     |
//! | 20     | 8    | volts_per_count (f64)         |
//! | 28     | ...  | f32 samples, channel-major    |
//!
//! Events live next to the container in `<stem>.events.json`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{EmgIoError, EmgRecording, Event};

pub const RECORDING_MAGIC: &[u8; 4] = b"SWR1";
pub const RECORDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 28;

fn io_err(path: &Path, source: std::io::Error) -> EmgIoError {
    EmgIoError::File { path: path.display().to_string(), source }
}

/// Validates and attaches events to a recording.
pub fn attach_events(mut rec: EmgRecording, events: Vec<Event>) -> Result<EmgRecording, EmgIoError> {
    let mut prev_end = 0;
    for (index, ev) in events.iter().enumerate() {
        if ev.end_sample <= ev.onset_sample || ev.end_sample > rec.n_samples {
            return Err(EmgIoError::EventOutOfRange {
                index,
                onset: ev.onset_sample,
                end: ev.end_sample,
                n_samples: rec.n_samples,
            });
        }
        if ev.onset_sample < prev_end {
            return Err(EmgIoError::EventOverlap { index });
        }
        prev_end = ev.end_sample;
    }
    rec.events = events;
    Ok(rec)
}

/// Decodes a container. The returned recording carries no events.
pub fn parse_recording(bytes: &[u8]) -> Result<EmgRecording, EmgIoError> {
    if bytes.len() < 4 || &bytes[..4] != RECORDING_MAGIC {
        return Err(EmgIoError::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(EmgIoError::TruncatedPayload { offset: 4, expected: HEADER_LEN, actual: bytes.len() });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != RECORDING_VERSION {
        return Err(EmgIoError::UnsupportedVersion(version));
    }
    let n_channels = u16_at(6);
    let fs_hz = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let n_samples = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let volts_per_count = f64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));

    let n_values = usize::try_from(n_samples)
        .ok()
        .and_then(|n| n.checked_mul(n_channels as usize))
        .ok_or_else(|| EmgIoError::BadHeader(format!("n_samples {n_samples} too large")))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = n_values * 4;
    if payload.len() < expected {
        return Err(EmgIoError::TruncatedPayload { offset: HEADER_LEN, expected, actual: payload.len() });
    }
    let samples = payload[..expected].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    EmgRecording::new(fs_hz, n_channels, volts_per_count, samples, Vec::new())
}

/// Encodes the sample container (events are not part of it).
pub fn serialize_recording(rec: &EmgRecording) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rec.samples.len() * 4);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    out.extend_from_slice(&rec.n_channels.to_le_bytes());
    out.extend_from_slice(&rec.fs_hz.to_le_bytes());
    out.extend_from_slice(&(rec.n_samples as u64).to_le_bytes());
    out.extend_from_slice(&rec.volts_per_count.to_le_bytes());
    for v in &rec.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// `dir/name.swr1` -> `dir/name.events.json`.
pub fn events_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.events.json"))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, EmgIoError> {
    let text = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Reads a container and, when present, its events sidecar.
pub fn read_recording(path: &Path) -> Result<EmgRecording, EmgIoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let rec = parse_recording(&bytes)?;
    let sidecar = events_path(path);
    if sidecar.exists() {
        let events = read_events(&sidecar)?;
        attach_events(rec, events)
    } else {
        Ok(rec)
    }
}

/// Writes the container and its events sidecar.
pub fn write_recording(path: &Path, rec: &EmgRecording) -> Result<(), EmgIoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, serialize_recording(rec)).map_err(|e| io_err(path, e))?;
    let sidecar = events_path(path);
    let json = serde_json::to_vec_pretty(&rec.events)?;
    fs::write(&sidecar, json).map_err(|e| io_err(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emgio::{CommandLabel, Condition};
    use proptest::prelude::*;

    fn header(fs: u32, ch: u16, n: u64) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"SWR1");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&ch.to_le_bytes());
        b.extend_from_slice(&fs.to_le_bytes());
        b.extend_from_slice(&n.to_le_bytes());
        b.extend_from_slice(&0f64.to_le_bytes());
        b
    }

    #[test]
    fn parses_declared_shape() {
        let mut bytes = header(500, 14, 1000);
        for i in 0..14 * 1000 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let rec = parse_recording(&bytes).unwrap();
        assert_eq!((rec.n_channels, rec.n_samples), (14, 1000));
        assert_eq!(rec.channel(1)[0], 1000.0);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(500, 14, 1000);
        bytes.extend(std::iter::repeat_n(0u8, 14 * 500 * 4));
        match parse_recording(&bytes) {
            Err(EmgIoError::TruncatedPayload { offset, expected, actual }) => {
                assert_eq!((offset, expected, actual), (28, 56000, 28000));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = header(500, 1, 0);
        bytes[0] = b'X';
        assert!(matches!(parse_recording(&bytes), Err(EmgIoError::BadMagic { offset: 0 })));
    }

    #[test]
    fn event_out_of_range() {
        let rec = EmgRecording::new(500, 1, 0.0, vec![0.0; 1000], vec![]).unwrap();
        let ev = Event { onset_sample: 1500, end_sample: 2000, label: CommandLabel::Up, condition: Condition::Silent };
        assert!(matches!(attach_events(rec, vec![ev]), Err(EmgIoError::EventOutOfRange { index: 0, .. })));
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.swr1");
        let ev = Event { onset_sample: 10, end_sample: 20, label: CommandLabel::Stop, condition: Condition::Vocalized };
        let rec = EmgRecording::new(500, 2, 1e-6, (0..60).map(|v| v as f32).collect(), vec![ev]).unwrap();
        write_recording(&path, &rec).unwrap();
        assert!(dir.path().join("a/b.events.json").exists());
        assert_eq!(read_recording(&path).unwrap(), rec);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            ch in 1u16..4,
            n in 0usize..50,
            fs in 1u32..5000,
            seed in any::<u32>(),
        ) {
            let samples: Vec<f32> = (0..ch as usize * n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let rec = EmgRecording::new(fs, ch, 0.5, samples, vec![]).unwrap();
            let back = parse_recording(&serialize_recording(&rec)).unwrap();
            prop_assert_eq!(back.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            rec.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.n_samples, n);
        }
    }
}
