//! Case manifests: one record per case with image and label paths.
//!
//! Tab-separated when the file name ends in `.tsv`, comma-separated otherwise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub image_path: PathBuf,
    /// Absent for inference-only cases.
    #[serde(default, with = "optional_path")]
    pub label_path: Option<PathBuf>,
    #[serde(default)]
    pub split_tag: String,
}

mod optional_path {
    use std::path::PathBuf;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<PathBuf>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PathBuf>, D::Error> {
        let s = String::deserialize(d)?;
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub cases: Vec<ManifestCase>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Empty("no cases in manifest".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.cases {
            if c.case_id.is_empty() {
                return Err(Error::Config("empty case_id in manifest".into()));
            }
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Config(format!("duplicate case_id {:?}", c.case_id)));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.case_id.clone()).collect()
    }

    pub fn get(&self, case_id: &str) -> Option<&ManifestCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

fn delimiter(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => b'\t',
        _ => b',',
    }
}

/// Reads and validates a manifest; relative paths resolve against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter(path))
        .from_path(path)?;
    let mut cases = Vec::new();
    for rec in rdr.deserialize() {
        let mut c: ManifestCase = rec?;
        c.image_path = base.join(&c.image_path);
        c.label_path = c.label_path.map(|p| base.join(p));
        cases.push(c);
    }
    let m = DatasetManifest { cases };
    m.validate()?;
    Ok(m)
}

/// Writes paths exactly as stored.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter(path))
        .from_path(path)?;
    for c in &manifest.cases {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Coordinate-wise median; even counts take the lower middle value.
pub fn median_dims(dims: &[[usize; 3]]) -> Result<[usize; 3]> {
    if dims.is_empty() {
        return Err(Error::Empty("median of no volumes".into()));
    }
    Ok([0, 1, 2].map(|k| {
        let mut v: Vec<usize> = dims.iter().map(|d| d[k]).collect();
        v.sort_unstable();
        v[(v.len() - 1) / 2]
    }))
}
