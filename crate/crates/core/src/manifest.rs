//! On-disk dataset description: a JSON-lines file whose first line is a
//! header carrying the generation-config digest, followed by one record per image.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where an image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// A corpus image (toy or ingested from a directory).
    Real,
    Generated,
    OversampledInquiry,
}

/// One image of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub source: Source,
    pub m: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub digest: String,
    pub tool_version: String,
    #[serde(default)]
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f64>,
    /// Digest of the run configuration, set when produced by the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ManifestHeader {
    pub fn new(digest: impl Into<String>) -> Self {
        Self {
            kind: "header".into(),
            digest: digest.into(),
            tool_version: TOOL_VERSION.into(),
            partial: false,
            group_id: None,
            mean_similarity: None,
            config_digest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(digest: impl Into<String>) -> Self {
        Self {
            header: ManifestHeader::new(digest),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.clone())
            .collect()
    }

    pub fn records_of<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().filter(move |r| r.subject_id == subject)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(first)?;
        if header.kind != "header" {
            return Err(Error::Format("manifest does not start with a header line".into()));
        }
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<ImageRecord>>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    /// Directory that record paths are relative to.
    pub fn root_of(path: &Path) -> PathBuf {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Subject ids are unique per subject block and every file exists under `root`.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            if !root.join(&r.path).is_file() {
                return Err(Error::Validation(format!("manifest references missing file {}", r.path)));
            }
        }
        Ok(())
    }

    /// Concatenates manifests whose records live under the same root, rejecting
    /// subject-id collisions. The digest of the result hashes the input digests.
    pub fn concat(parts: &[DatasetManifest]) -> Result<Self> {
        let mut seen: HashSet<String> = HashSet::new();
        let mut records = Vec::new();
        let mut digests = Vec::new();
        for p in parts {
            let subjects = p.subjects();
            for s in &subjects {
                if !seen.insert(s.clone()) {
                    return Err(Error::Validation(format!("subject id {s} appears in more than one manifest")));
                }
            }
            digests.push(p.header.digest.clone());
            records.extend(p.records.iter().cloned());
        }
        let mut out = Self::new(digest_str(&digests.join("+")));
        out.header.partial = parts.iter().any(|p| p.header.partial);
        out.records = records;
        Ok(out)
    }
}

/// Hex SHA-256 of a string.
pub fn digest_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}
