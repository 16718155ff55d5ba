//! JSON-lines manifests of image/caption pairs.
//!
//! Each non-blank line is an object with an `image` path (relative to the
//! manifest's directory), a `caption`, and an optional integer `label`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// A manifest entry with its image path resolved but not yet read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub caption: String,
    pub label: Option<usize>,
}

impl Sample {
    pub fn load_image(&self) -> Result<Image> {
        Image::load(&self.image_path)
    }
}

/// Parse manifest text. `base` resolves relative image paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Sample {
            image_path: base.join(&rec.image),
            caption: rec.caption,
            label: rec.label,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

pub fn format_record(rec: &ManifestRecord) -> String {
    serde_json::to_string(rec).expect("record serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_ordered() {
        assert!(parse_manifest("", Path::new(".")).unwrap().is_empty());
        let text = r#"{"image":"a.ppm","caption":"one"}
{"image":"b.ppm","caption":"two","label":3}

{"image":"c.pgm","caption":"three"}
"#;
        let s = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].caption, "one");
        assert_eq!(s[1].label, Some(3));
        assert_eq!(s[2].image_path, PathBuf::from("/data/c.pgm"));
    }

    #[test]
    fn missing_caption_reports_line() {
        let text = "{\"image\":\"a.ppm\",\"caption\":\"ok\"}\n{\"image\":\"b.ppm\"}\n";
        match parse_manifest(text, Path::new(".")) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("caption"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_fails_lazily() {
        let s = parse_manifest(r#"{"image":"nope.ppm","caption":"x"}"#, Path::new("/nonexistent"))
            .unwrap();
        match s[0].load_image() {
            Err(Error::ImageLoad { path, .. }) => assert!(path.ends_with("nope.ppm")),
            other => panic!("{other:?}"),
        }
    }
}
