use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::OcrSceneResult;

pub const OCR_VERSION: u32 = 1;

/// Either a bare JSON list of scenes or `{"version": n, "scenes": [...]}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum OcrFile {
    List(Vec<OcrSceneResult>),
    Versioned { version: u32, scenes: Vec<OcrSceneResult> },
}

/// Reads and validates an OCR results file.
///
/// Rejects duplicate scene ids and match indices outside the word or
/// detection lists.
pub fn load_ocr_results(path: impl AsRef<Path>) -> Result<Vec<OcrSceneResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ocr_results(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path.display().to_string(), source),
        other => other,
    })
}

pub fn parse_ocr_results(text: &str) -> Result<Vec<OcrSceneResult>> {
    // Parse twice on failure so the error carries line/column and field
    // names from the plain list schema instead of serde's untagged message.
    let scenes = match serde_json::from_str::<OcrFile>(text) {
        Ok(OcrFile::List(s)) => s,
        Ok(OcrFile::Versioned { version, scenes }) => {
            if version > OCR_VERSION {
                return Err(Error::Version {
                    kind: "OCR results",
                    found: version,
                    supported: OCR_VERSION,
                });
            }
            scenes
        }
        Err(_) => serde_json::from_str::<Vec<OcrSceneResult>>(text).map_err(|e| Error::json("OCR results", e))?,
    };
    let mut ids = HashSet::new();
    for s in &scenes {
        s.validate()?;
        if !ids.insert(s.scene_id.as_str()) {
            return Err(Error::Schema(format!("duplicate scene_id {:?} in OCR results", s.scene_id)));
        }
    }
    Ok(scenes)
}

#[derive(Serialize)]
struct OcrOut<'a>(&'a [OcrSceneResult]);

/// Writes scenes as a bare JSON list.
pub fn save_ocr_results(scenes: &[OcrSceneResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&OcrOut(scenes)).map_err(|e| Error::json("OCR results", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<OcrSceneResult> {
        vec![OcrSceneResult {
            scene_id: "s1".into(),
            gt_words: vec!["CAT".into(), "DOG".into()],
            detections: vec!["CAT".into(), "DG".into()],
            word_matches: vec![(0, 0), (1, 1)],
        }]
    }

    #[test]
    fn empty_list_is_valid() {
        assert!(parse_ocr_results("[]").unwrap().is_empty());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ocr.json");
        save_ocr_results(&sample(), &p).unwrap();
        assert_eq!(load_ocr_results(&p).unwrap(), sample());
    }

    #[test]
    fn out_of_range_index_names_scene() {
        let text = r#"[{"scene_id": "street_7", "gt_words": ["A"], "detections": ["A"], "word_matches": [[0, 4]]}]"#;
        match parse_ocr_results(text) {
            Err(Error::Schema(m)) => assert!(m.contains("street_7"), "{}", m),
            other => panic!("expected schema error, got {:?}", other),
        }
    }

    #[test]
    fn schema_errors_have_positions() {
        let text = "[\n  {\"scene_id\": \"a\", \"gt_words\": 3}\n]";
        let msg = parse_ocr_results(text).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{}", msg);
    }

    #[test]
    fn duplicates_and_versions() {
        let mut two = sample();
        two.extend(sample());
        let text = serde_json::to_string(&two).unwrap();
        assert!(matches!(parse_ocr_results(&text), Err(Error::Schema(_))));
        let v = r#"{"version": 2, "scenes": []}"#;
        assert!(matches!(parse_ocr_results(v), Err(Error::Version { found: 2, .. })));
        assert!(parse_ocr_results(r#"{"version": 1, "scenes": []}"#).unwrap().is_empty());
    }
}
