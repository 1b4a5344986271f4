use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::read_raster;
use super::pair::RasterPair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image pair on disk. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path_t1: PathBuf,
    pub path_t2: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_labels: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub band_count: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub creation: serde_json::Value,
    /// Directory the entry paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Ids are unique (so splits are disjoint) and every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.band_count == 0 {
            return Err(Error::data("manifest band_count must be positive"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::data(format!("pair id {} listed more than once", e.id)));
            }
            let paths = [Some(&e.path_t1), Some(&e.path_t2), e.path_labels.as_ref()];
            for p in paths.into_iter().flatten() {
                let full = self.base_dir.join(p);
                if !full.is_file() {
                    return Err(Error::data(format!(
                        "pair {}: file {} does not exist",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::data(format!("no pair with id {id}")))
    }

    /// Reads one pair from disk (not normalized).
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<RasterPair> {
        let t1 = read_raster(self.base_dir.join(&entry.path_t1))?;
        let t2 = read_raster(self.base_dir.join(&entry.path_t2))?;
        if t1.shape().first() != Some(&self.band_count) {
            return Err(Error::data(format!(
                "pair {} has shape {:?}, manifest says {} bands",
                entry.id,
                t1.shape(),
                self.band_count
            )));
        }
        let labels = entry
            .path_labels
            .as_ref()
            .map(|p| read_raster(self.base_dir.join(p)))
            .transpose()?;
        RasterPair::new(entry.id.clone(), t1, t2, labels)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RasterPair>> {
        self.split(split).map(|e| self.load_pair(e)).collect()
    }
}

/// Split sizes for `n` pairs under the 85/10/5 train/val/test ratio.
///
/// Validation and test each get at least one pair once `n >= 3`.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let val = ((n as f64 * 0.10).round() as usize).max(1);
    let test = ((n as f64 * 0.05).round() as usize).max(1);
    (n - val - test, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(60), (51, 6, 3));
        assert_eq!(split_counts(100), (85, 10, 5));
        assert_eq!(split_counts(3), (1, 1, 1));
        assert_eq!(split_counts(2), (2, 0, 0));
    }

    #[test]
    fn duplicate_ids_and_missing_files_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let t = crate::Tensor::zeros(&[1, 2, 2]);
        crate::raster::write_raster(&t, dir.path().join("a.raster")).unwrap();
        let entry = ManifestEntry {
            id: "p".into(),
            path_t1: "a.raster".into(),
            path_t2: "a.raster".into(),
            path_labels: None,
            split: Split::Train,
        };
        let mut m = DatasetManifest {
            band_count: 1,
            entries: vec![entry.clone()],
            creation: serde_json::Value::Null,
            base_dir: dir.path().to_path_buf(),
        };
        m.validate().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap().entries, m.entries);

        m.entries.push(ManifestEntry { split: Split::Test, ..entry.clone() });
        assert!(m.validate().is_err());
        m.entries.pop();
        m.entries[0].path_t2 = "missing.raster".into();
        assert!(m.validate().is_err());
    }
}
