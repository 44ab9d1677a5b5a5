use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TurbulenceParams;

pub const MANIFEST_VERSION: u32 = 1;

/// One scene (or one frame of a scene).
///
/// Paths are stored relative to the manifest file. An entry without
/// `clean_path` has no ground truth and can only feed self-supervised training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
    pub degraded_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<TurbulenceParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for SceneManifest {
    fn default() -> Self {
        SceneManifest::new(PathBuf::from("."))
    }
}

impl SceneManifest {
    /// Empty manifest whose relative paths resolve against `base_dir`.
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        SceneManifest {
            version: MANIFEST_VERSION,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.version > MANIFEST_VERSION {
            return Err(Error::Version {
                kind: "manifest",
                found: m.version,
                supported: MANIFEST_VERSION,
            });
        }
        m.validate()?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.base_dir.as_os_str().is_empty() {
            m.base_dir = PathBuf::from(".");
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::Schema(format!("duplicate scene_id {:?} in manifest", e.scene_id)));
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            scene_id: id.into(),
            clean_path: Some(format!("clean/{}.png", id)),
            degraded_path: format!("degraded/{}.png", id),
            seed: Some(3),
            params: None,
        }
    }

    #[test]
    fn paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("data");
        std::fs::create_dir(&sub).unwrap();
        let mut m = SceneManifest::new(&sub);
        m.entries.push(entry("a"));
        m.save(sub.join("manifest.json")).unwrap();
        let back = SceneManifest::load(sub.join("manifest.json")).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.resolve("clean/a.png"), sub.join("clean/a.png"));
    }

    #[test]
    fn rejects_duplicates_and_future_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut m = SceneManifest::new(dir.path());
        m.entries = vec![entry("a"), entry("a")];
        assert!(matches!(m.save(&p), Err(Error::Schema(_))));
        std::fs::write(&p, r#"{"version": 9, "entries": []}"#).unwrap();
        assert!(matches!(SceneManifest::load(&p), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn clean_path_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"version": 1, "entries": [{"scene_id": "r0", "degraded_path": "r0.png"}]}"#).unwrap();
        let m = SceneManifest::load(&p).unwrap();
        assert_eq!(m.entries[0].clean_path, None);
    }
}
