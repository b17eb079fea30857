//! Line-delimited dataset manifests: a header object on the first line, one
//! video record per following line. Human-diffable and append-friendly.
//!
//! Frame paths are stored relative to the manifest's directory when possible
//! and resolved back on load, so a dataset tree can be moved wholesale.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index: 0 = real, 1 = fake (the fake-class logit/probability
    /// lives at index 1 everywhere).
    pub fn class(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled video with its extracted frame crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: Label,
    /// For fakes, the real video this fake was generated from (`"unknown"`
    /// when unresolvable); equals `video_id` for reals.
    pub source_id: String,
    pub generator: String,
    pub frame_paths: Vec<PathBuf>,
    pub split: Split,
    pub dataset: String,
    pub year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    name: String,
    preprocessing_fingerprint: String,
    created_at: u64,
    tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub preprocessing_fingerprint: String,
    pub records: Vec<VideoRecord>,
}

/// Creation timestamp honoring `SOURCE_DATE_EPOCH` for reproducible outputs.
fn created_at() -> u64 {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(n) = v.parse() {
            return n;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, preprocessing_fingerprint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            preprocessing_fingerprint: preprocessing_fingerprint.into(),
            records: Vec::new(),
        }
    }

    pub fn real_ids(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.label == Label::Real)
            .map(|r| r.video_id.as_str())
            .collect()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Consistency checks; `check_files` additionally requires every frame
    /// file to exist.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate video_id '{}'",
                    r.video_id
                )));
            }
            if r.frame_paths.is_empty() {
                return Err(Error::InvalidManifest(format!(
                    "video '{}' has no frames",
                    r.video_id
                )));
            }
            if r.label == Label::Real && r.source_id != r.video_id {
                return Err(Error::InvalidManifest(format!(
                    "real video '{}' must have source_id equal to its video_id",
                    r.video_id
                )));
            }
        }
        let reals = self.real_ids();
        for r in &self.records {
            if r.label == Label::Fake && r.source_id != "unknown" && !reals.contains(r.source_id.as_str())
            {
                // Source links may point outside this manifest (e.g. after
                // split carving); that is allowed as long as they are marked.
                continue;
            }
        }
        if check_files {
            for r in &self.records {
                for p in &r.frame_paths {
                    if !p.exists() {
                        return Err(Error::InvalidManifest(format!(
                            "missing frame file {}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut file = std::fs::File::create(path)?;
        let header = Header {
            name: self.name.clone(),
            preprocessing_fingerprint: self.preprocessing_fingerprint.clone(),
            created_at: created_at(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        for record in &self.records {
            let mut rel = record.clone();
            rel.frame_paths = rel
                .frame_paths
                .iter()
                .map(|p| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.clone()))
                .collect();
            writeln!(file, "{}", serde_json::to_string(&rel)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InvalidManifest("empty manifest file".into()))??;
        let header: Header = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: VideoRecord = serde_json::from_str(&line)?;
            record.frame_paths = record
                .frame_paths
                .iter()
                .map(|p| if p.is_relative() { base.join(p) } else { p.clone() })
                .collect();
            records.push(record);
        }
        let manifest = Self {
            name: header.name,
            preprocessing_fingerprint: header.preprocessing_fingerprint,
            records,
        };
        manifest.validate(true)?;
        Ok(manifest)
    }

    /// Copy containing only records selected by `keep`, under a new name.
    pub fn filtered(&self, name: impl Into<String>, keep: impl Fn(&VideoRecord) -> bool) -> Self {
        Self {
            name: name.into(),
            preprocessing_fingerprint: self.preprocessing_fingerprint.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::imageops::CropImage;

    fn record(dir: &Path, id: &str, label: Label, source: &str) -> VideoRecord {
        let frame = dir.join(format!("{id}_f0.png"));
        CropImage::filled(8, 8, 10).save_png(&frame).unwrap();
        VideoRecord {
            video_id: id.into(),
            label,
            source_id: source.into(),
            generator: if label == Label::Real { "real".into() } else { "gen0".into() },
            frame_paths: vec![frame],
            split: Split::Train,
            dataset: "toy".into(),
            year: 2019,
        }
    }

    #[test]
    fn round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new("toy", "fp123");
        m.records.push(record(dir.path(), "r1", Label::Real, "r1"));
        m.records.push(record(dir.path(), "f1", Label::Fake, "r1"));
        let path = dir.path().join("toy.jsonl");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.name, "toy");
        assert_eq!(back.preprocessing_fingerprint, "fp123");
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new("toy", "fp");
        m.records.push(record(dir.path(), "r1", Label::Real, "r1"));
        m.records.push(record(dir.path(), "r1", Label::Real, "r1"));
        assert!(m.validate(false).is_err());
    }

    #[test]
    fn missing_files_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new("toy", "fp");
        let mut r = record(dir.path(), "r1", Label::Real, "r1");
        std::fs::remove_file(&r.frame_paths[0]).unwrap();
        r.frame_paths = vec![dir.path().join("gone.png")];
        m.records.push(r);
        let path = dir.path().join("toy.jsonl");
        m.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn real_with_foreign_source_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new("toy", "fp");
        m.records.push(record(dir.path(), "r1", Label::Real, "r2"));
        assert!(m.validate(false).is_err());
    }
}
