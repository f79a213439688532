use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, Result};
use crate::grammar::{GrammarParams, WindowType};
use crate::procgen::PatchImage;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub split: Split,
    pub window_type: WindowType,
    pub params: GrammarParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlabeledEntry {
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub labeled: Vec<LabeledEntry>,
    pub unlabeled: Vec<UnlabeledEntry>,
}

impl DatasetManifest {
    fn paths(&self) -> impl Iterator<Item = &str> {
        self.labeled.iter().map(|e| e.path.as_str()).chain(self.unlabeled.iter().map(|e| e.path.as_str()))
    }

    pub fn labeled_in(&self, split: Split) -> impl Iterator<Item = &LabeledEntry> {
        self.labeled.iter().filter(move |e| e.split == split)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.paths() {
            let rel = Path::new(p);
            if p.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
                return Err(DatasetError::Format(format!("path {p:?} must be relative without '..'")));
            }
            if !seen.insert(p) {
                return Err(DatasetError::Format(format!("{p:?} listed more than once")));
            }
        }
        for e in &self.labeled {
            if let Some(m) = e.params.violations().into_iter().next() {
                return Err(DatasetError::Format(format!("{}: {m}", e.path)));
            }
        }
        Ok(())
    }
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.check()?;
    let mut text = serde_json::to_string_pretty(m).map_err(|e| DatasetError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Reads and checks a manifest: version, relative unique paths, valid
/// labels and that every referenced patch exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DatasetError::Format(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        Some(v) => return Err(DatasetError::Format(format!("unsupported manifest version {v}"))),
        None => return Err(DatasetError::Format("missing version".into())),
    }
    let m: DatasetManifest =
        serde_path_to_error::deserialize(value).map_err(|e| DatasetError::Format(format!("{}: {}", e.path(), e.inner())))?;
    m.check()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for p in m.paths() {
        let full = dir.join(p);
        if !full.is_file() {
            return Err(DatasetError::MissingFile(full));
        }
    }
    Ok(m)
}

/// A decoded labeled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub path: PathBuf,
    pub image: PatchImage,
    pub window_type: WindowType,
    pub params: GrammarParams,
}

pub fn load_labeled(m: &DatasetManifest, dir: &Path, split: Split) -> Result<Vec<LabeledPatch>> {
    m.labeled_in(split)
        .map(|e| {
            let path = dir.join(&e.path);
            Ok(LabeledPatch {
                image: PatchImage::load_png(&path)?,
                path,
                window_type: e.window_type,
                params: e.params,
            })
        })
        .collect()
}

pub fn load_unlabeled(m: &DatasetManifest, dir: &Path) -> Result<Vec<PatchImage>> {
    m.unlabeled.iter().map(|e| Ok(PatchImage::load_png(&dir.join(&e.path))?)).collect()
}
