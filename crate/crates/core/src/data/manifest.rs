//! JSON-lines dataset manifest.
//!
//! One object per line:
//! `{"image_id", "patient_id", "image_path", "y_m", "y_b", "mask_path"?, "annotations"?}`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionClass {
    #[serde(rename = "B")]
    Benign,
    #[serde(rename = "M")]
    Malignant,
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LesionClass::Benign => "B",
            LesionClass::Malignant => "M",
        })
    }
}

/// Weak image-level tuple label `(y_M, y_B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct WeakLabel {
    pub malignant: bool,
    pub benign: bool,
}

impl WeakLabel {
    pub const NORMAL: WeakLabel = WeakLabel {
        malignant: false,
        benign: false,
    };

    pub fn new(malignant: bool, benign: bool) -> Self {
        WeakLabel { malignant, benign }
    }

    pub fn is_normal(&self) -> bool {
        !self.malignant && !self.benign
    }

    pub fn has(&self, class: LesionClass) -> bool {
        match class {
            LesionClass::Benign => self.benign,
            LesionClass::Malignant => self.malignant,
        }
    }

    /// Dense code in `0..4`: N, M-only, B-only, both.
    pub fn code(&self) -> usize {
        self.malignant as usize + 2 * self.benign as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    #[serde(rename = "cls")]
    pub class: LesionClass,
    #[serde(flatten)]
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub label: WeakLabel,
    pub mask_path: Option<PathBuf>,
    pub annotations: Vec<LesionAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct RawEntry {
    image_id: String,
    patient_id: String,
    image_path: String,
    y_m: u8,
    y_b: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    annotations: Vec<LesionAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn find(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Checks identifier uniqueness and annotation sanity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.image_id.as_str()) {
                return Err(Error::Data(format!("duplicate image_id `{}`", entry.image_id)));
            }
            for ann in &entry.annotations {
                if ann.rect.w == 0 || ann.rect.h == 0 {
                    return Err(Error::Data(format!(
                        "annotation with zero area in image `{}`",
                        entry.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let raw = RawEntry {
                image_id: e.image_id.clone(),
                patient_id: e.patient_id.clone(),
                image_path: e.image_path.to_string_lossy().into_owned(),
                y_m: e.label.malignant as u8,
                y_b: e.label.benign as u8,
                mask_path: e.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
                annotations: e.annotations.clone(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Parses manifest text without touching the filesystem.
    pub fn parse(text: &str, source: &Path, root: PathBuf) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: line_no,
                message,
            };
            let raw: RawEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let bit = |v: u8, key: &str| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(parse_err(format!("label {key}={v} outside {{0,1}}"))),
            };
            let label = WeakLabel::new(bit(raw.y_m, "y_m")?, bit(raw.y_b, "y_b")?);
            entries.push(ManifestEntry {
                image_id: raw.image_id,
                patient_id: raw.patient_id,
                image_path: PathBuf::from(raw.image_path),
                label,
                mask_path: raw.mask_path.map(PathBuf::from),
                annotations: raw.annotations,
            });
        }
        let manifest = DatasetManifest { root, entries };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Loads and validates a manifest; every referenced image and mask must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, path, root)?;
    for entry in &manifest.entries {
        let image = manifest.resolve(&entry.image_path);
        if !image.is_file() {
            return Err(Error::Data(format!(
                "image `{}` not found at {}",
                entry.image_id,
                image.display()
            )));
        }
        if let Some(mask) = &entry.mask_path {
            let mask = manifest.resolve(mask);
            if !mask.is_file() {
                return Err(Error::Data(format!(
                    "mask for `{}` not found at {}",
                    entry.image_id,
                    mask.display()
                )));
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        DatasetManifest::parse(text, Path::new("m.jsonl"), PathBuf::new())
    }

    #[test]
    fn three_entries_and_both_findings_label() {
        let text = r#"{"image_id":"a","patient_id":"p1","image_path":"a.pgm","y_m":0,"y_b":0}
{"image_id":"b","patient_id":"p1","image_path":"b.pgm","y_m":1,"y_b":1,"annotations":[{"cls":"M","x":1,"y":2,"w":3,"h":4}]}
{"image_id":"c","patient_id":"p2","image_path":"c.pgm","y_m":0,"y_b":1,"mask_path":"c_mask.pgm"}
"#;
        let m = parse(text).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.entries[0].label.is_normal());
        assert_eq!(m.entries[1].label, WeakLabel::new(true, true));
        assert_eq!(m.entries[1].annotations[0].class, LesionClass::Malignant);
        assert_eq!(m.entries[1].annotations[0].rect, Rect::new(1, 2, 3, 4));
        assert_eq!(m.entries[2].mask_path.as_deref(), Some(Path::new("c_mask.pgm")));
    }

    #[test]
    fn duplicate_image_id_is_named() {
        let text = r#"{"image_id":"dup","patient_id":"p","image_path":"a.pgm","y_m":0,"y_b":0}
{"image_id":"dup","patient_id":"p","image_path":"b.pgm","y_m":0,"y_b":0}"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("dup"), "{err}");
    }

    #[test]
    fn label_outside_binary_range() {
        let text = r#"{"image_id":"a","patient_id":"p","image_path":"a.pgm","y_m":2,"y_b":0}"#;
        match parse(text).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("y_m"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"image_id\":\"a\",\"patient_id\":\"p\",\"image_path\":\"a.pgm\",\"y_m\":0,\"y_b\":0}\n{oops";
        match parse(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let text = r#"{"image_id":"b","patient_id":"p1","image_path":"b.pgm","y_m":1,"y_b":0,"annotations":[{"cls":"B","x":1,"y":2,"w":3,"h":4}]}
"#;
        let m = parse(text).unwrap();
        assert_eq!(m.to_jsonl(), text);
    }

    #[test]
    fn missing_image_file_fails_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"image_id":"a","patient_id":"p","image_path":"nope.pgm","y_m":0,"y_b":0}"#,
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("not found"), "{err}");
    }
}
