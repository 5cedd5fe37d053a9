//! Dataset manifest: subjects -> sessions -> batches -> recording files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_recording, BatchKey, Condition, EmgIoError, EmgRecording};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub fs_hz: u32,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: u32,
    pub sessions: Vec<SessionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub id: u32,
    pub batches: Vec<BatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEntry {
    pub id: u32,
    pub condition: Condition,
    /// Path of the SWR1 file, relative to the manifest directory.
    pub path: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, EmgIoError> {
        let text = fs::read(path).map_err(|source| EmgIoError::File { path: path.display().to_string(), source })?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmgIoError> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|source| EmgIoError::File { path: path.display().to_string(), source })
    }

    /// All batch keys in manifest order.
    pub fn keys(&self) -> impl Iterator<Item = (BatchKey, &BatchEntry)> + '_ {
        self.subjects.iter().flat_map(|subj| {
            subj.sessions.iter().flat_map(move |sess| {
                sess.batches.iter().map(move |b| {
                    let key = BatchKey { subject: subj.id, session: sess.id, batch: b.id, condition: b.condition };
                    (key, b)
                })
            })
        })
    }

    /// Checks tuple uniqueness and, when `root` is given, that every file exists.
    pub fn validate(&self, root: Option<&Path>) -> Result<(), EmgIoError> {
        let mut seen = BTreeSet::new();
        for (key, entry) in self.keys() {
            if !seen.insert(key) {
                return Err(EmgIoError::InvalidManifest(format!("duplicate tuple ({key})")));
            }
            if let Some(root) = root {
                let p = root.join(&entry.path);
                if !p.is_file() {
                    return Err(EmgIoError::InvalidManifest(format!("{key}: missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, key: &BatchKey) -> Option<&BatchEntry> {
        self.keys().find(|(k, _)| k == key).map(|(_, e)| e)
    }

    /// Session ids of a subject in ascending order.
    pub fn sessions(&self, subject: u32) -> Vec<u32> {
        let mut ids: Vec<u32> =
            self.subjects.iter().filter(|s| s.id == subject).flat_map(|s| s.sessions.iter().map(|x| x.id)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Batch ids of one session and condition in ascending order.
    pub fn batches(&self, subject: u32, session: u32, condition: Condition) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .keys()
            .filter(|(k, _)| k.subject == subject && k.session == session && k.condition == condition)
            .map(|(k, _)| k.batch)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Anything that can hand out the recording behind a batch key.
pub trait RecordingSource: Sync {
    fn manifest(&self) -> &DatasetManifest;
    fn recording(&self, key: &BatchKey) -> Result<EmgRecording, EmgIoError>;
}

/// Recordings stored on disk next to a manifest file.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl ManifestSource {
    pub fn open(manifest_path: &Path) -> Result<Self, EmgIoError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(Some(&root))?;
        Ok(Self { manifest, root })
    }
}

impl RecordingSource for ManifestSource {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn recording(&self, key: &BatchKey) -> Result<EmgRecording, EmgIoError> {
        let entry =
            self.manifest.entry(key).ok_or_else(|| EmgIoError::InvalidManifest(format!("no entry for ({key})")))?;
        read_recording(&self.root.join(&entry.path))
    }
}
