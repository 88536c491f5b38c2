//! Dataset manifests: `subject_id,scan_id,label,path` CSV files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{read_geometry, Geometry};
use crate::error::{Error, Result};

pub const HEADER: [&str; 4] = ["subject_id", "scan_id", "label", "path"];

/// One scan. Label 1 is the positive (AD) class, 0 the control (NC) class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub scan_id: String,
    pub label: u8,
    #[serde(rename = "path")]
    pub volume_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<VolumeRecord>,
    /// Shared `[channels, D, H, W]` of every referenced volume.
    pub geometry: Geometry,
}

impl Manifest {
    pub fn new(records: Vec<VolumeRecord>, geometry: Geometry) -> Result<Self> {
        let m = Self { records, geometry };
        m.validate()?;
        Ok(m)
    }

    /// Checks record-level invariants (not the files themselves).
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut labels: BTreeMap<&str, u8> = BTreeMap::new();
        for r in &self.records {
            if r.subject_id.is_empty() {
                return Err(Error::Data("empty subject_id".into()));
            }
            if r.label > 1 {
                return Err(Error::Data(format!(
                    "subject {}: label must be 0 or 1, got {}",
                    r.subject_id, r.label
                )));
            }
            if !seen.insert((r.subject_id.as_str(), r.scan_id.as_str())) {
                return Err(Error::Data(format!(
                    "duplicate scan {}/{}",
                    r.subject_id, r.scan_id
                )));
            }
            if let Some(&prev) = labels.get(r.subject_id.as_str()) {
                if prev != r.label {
                    return Err(Error::Data(format!(
                        "subject {} has conflicting labels",
                        r.subject_id
                    )));
                }
            }
            labels.insert(&r.subject_id, r.label);
        }
        Ok(())
    }

    /// Subject id to label, ordered by subject id.
    pub fn subjects(&self) -> BTreeMap<&str, u8> {
        self.records
            .iter()
            .map(|r| (r.subject_id.as_str(), r.label))
            .collect()
    }

    /// Parses a manifest and reads every volume header to establish the
    /// shared geometry. Relative paths are resolved against the manifest's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::Reader::from_path(path)?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header != HEADER {
            return Err(Error::Format(format!(
                "{}: manifest header must be `{}`",
                path.display(),
                HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        for row in reader.deserialize() {
            let mut rec: VolumeRecord = row?;
            if rec.volume_path.is_relative() {
                rec.volume_path = base.join(&rec.volume_path);
            }
            records.push(rec);
        }
        let Some(first) = records.first() else {
            return Err(Error::Data(format!(
                "{}: manifest has no records",
                path.display()
            )));
        };
        let geometry = read_geometry(&first.volume_path)?;
        for r in &records[1..] {
            let g = read_geometry(&r.volume_path)?;
            if g != geometry {
                return Err(Error::Shape(format!(
                    "{} has geometry {g:?}, manifest geometry is {geometry:?}",
                    r.volume_path.display()
                )));
            }
        }
        Self::new(records, geometry)
    }

    /// Writes the manifest. Paths under `relative_to` are stored relative.
    pub fn save(&self, path: impl AsRef<Path>, relative_to: Option<&Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for r in &self.records {
            let mut rec = r.clone();
            if let Some(stripped) =
                relative_to.and_then(|base| r.volume_path.strip_prefix(base).ok())
            {
                rec.volume_path = stripped.to_path_buf();
            }
            writer.serialize(rec)?;
        }
        writer.flush()?;
        Ok(())
    }
}
