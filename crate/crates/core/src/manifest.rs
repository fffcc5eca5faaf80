//! Corpus manifests: `vc_path,evidence_path,raw_path,source_id,target_id` rows and enrollment lists.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["vc_path", "evidence_path", "raw_path", "source_id", "target_id"];
pub const ENROLL_HEADER: [&str; 2] = ["speaker_id", "path"];
/// Evidence token meaning "no evidence recording"; the nil audio is used instead.
pub const NIL: &str = "NIL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub vc_path: PathBuf,
    pub evidence_path: Option<PathBuf>,
    pub raw_path: PathBuf,
    pub source_id: String,
    pub target_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

fn resolve(base: &Path, field: &str) -> PathBuf {
    let p = PathBuf::from(field);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::Manifest(format!(
            "{}: expected header {}, found {}",
            path.display(),
            want.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

impl Manifest {
    /// Reads a manifest; relative paths are resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let base = base_dir(path);
        let mut reader = csv::Reader::from_path(path)?;
        check_header(path, reader.headers()?, &MANIFEST_HEADER)?;
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 5 {
                return Err(Error::Manifest(format!("{} line {}: expected 5 fields", path.display(), i + 2)));
            }
            let source_id = record[3].to_string();
            let target_id = record[4].to_string();
            if source_id.is_empty() || target_id.is_empty() {
                return Err(Error::Manifest(format!("{} line {}: empty speaker id", path.display(), i + 2)));
            }
            rows.push(ManifestRow {
                vc_path: resolve(&base, &record[0]),
                evidence_path: (&record[1] != NIL).then(|| resolve(&base, &record[1])),
                raw_path: resolve(&base, &record[2]),
                source_id,
                target_id,
            });
        }
        Ok(Self { rows })
    }

    /// Writes the manifest with paths relative to its directory where possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = base_dir(path);
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(MANIFEST_HEADER)?;
        for row in &self.rows {
            let evidence = row.evidence_path.as_ref().map_or_else(|| NIL.to_string(), |p| relative(&base, p));
            writer.write_record([
                relative(&base, &row.vc_path),
                evidence,
                relative(&base, &row.raw_path),
                row.source_id.clone(),
                row.target_id.clone(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn source_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.source_id.clone()).collect()
    }

    /// Every speaker mentioned as source or target.
    pub fn speaker_ids(&self) -> BTreeSet<String> {
        self.rows.iter().flat_map(|r| [r.source_id.clone(), r.target_id.clone()]).collect()
    }
}

/// Enrollment recordings, one `(speaker_id, path)` per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnrollList {
    pub entries: Vec<(String, PathBuf)>,
}

impl EnrollList {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let base = base_dir(path);
        let mut reader = csv::Reader::from_path(path)?;
        check_header(path, reader.headers()?, &ENROLL_HEADER)?;
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Manifest(format!("{}: expected 2 fields per line", path.display())));
            }
            entries.push((record[0].to_string(), resolve(&base, &record[1])));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = base_dir(path);
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(ENROLL_HEADER)?;
        for (id, p) in &self.entries {
            writer.write_record([id.clone(), relative(&base, p)])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn speaker_ids(&self) -> BTreeSet<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}
