use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityInfo {
    pub name: String,
    pub channels: usize,
    /// Hz.
    pub sample_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub sample_id: u64,
    pub subject_id: u32,
    pub session_id: u32,
    pub label: String,
    /// Modality name to CSV path, relative to the dataset root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub modalities: Vec<ModalityInfo>,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

/// One raw multi-channel series, `T_raw × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRecord {
    pub modality: String,
    pub series: Tensor<f64>,
    pub sample_rate: f64,
}

impl ModalityRecord {
    pub fn steps(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.series.shape()[1]
    }
}

pub(crate) const META_FILE: &str = "meta.json";

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(META_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("manifest declares no modalities".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("manifest declares no classes".into()));
        }
        let names: BTreeSet<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.modalities.len() {
            return Err(Error::Config("duplicate modality names in manifest".into()));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.channels == 0) {
            return Err(Error::Config(format!("modality `{}` has zero channels", m.name)));
        }
        let classes: HashSet<&str> = self.classes.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for s in &self.samples {
            let fail = |reason: String| Error::Ingestion {
                sample_id: s.sample_id,
                reason,
            };
            if !seen.insert(s.sample_id) {
                return Err(fail("duplicate sample_id".into()));
            }
            if s.subject_id == 0 || s.session_id == 0 {
                return Err(fail("subject_id and session_id must be positive".into()));
            }
            if !classes.contains(s.label.as_str()) {
                return Err(fail(format!("label `{}` is not a declared class", s.label)));
            }
            let keys: BTreeSet<&str> = s.files.keys().map(String::as_str).collect();
            if keys != names {
                return Err(fail(format!(
                    "references modalities {keys:?}, expected exactly {names:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// Reads one modality CSV of `channels` comma-separated columns.
pub fn read_record(
    root: &Path,
    sample: &SampleEntry,
    modality: &ModalityInfo,
) -> Result<ModalityRecord> {
    let fail = |reason: String| Error::Ingestion {
        sample_id: sample.sample_id,
        reason,
    };
    let rel = sample
        .files
        .get(&modality.name)
        .ok_or_else(|| fail(format!("no file for modality `{}`", modality.name)))?;
    let path = root.join(rel);
    let text = fs::read_to_string(&path)
        .map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                fail(format!("{}:{}: bad number `{field}`", path.display(), line_no + 1))
            })?;
            values.push(v);
        }
        if values.len() - before != modality.channels {
            return Err(fail(format!(
                "{}:{}: expected {} channels for `{}`, found {}",
                path.display(),
                line_no + 1,
                modality.channels,
                modality.name,
                values.len() - before
            )));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(fail(format!("{} is empty", path.display())));
    }
    Ok(ModalityRecord {
        modality: modality.name.clone(),
        series: Tensor::new(vec![rows, modality.channels], values)?,
        sample_rate: modality.sample_rate,
    })
}

pub(crate) fn write_record(path: &Path, series: &Tensor<f64>) -> Result<()> {
    use std::fmt::Write;
    let mut text = String::new();
    for row in series.rows() {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            write!(text, "{v}").expect("write to String");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
