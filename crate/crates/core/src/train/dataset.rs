//! On-disk dataset: `raw/<id>.pgm`, `raw/<id>.meta.json`, `target/<id>.png`,
//! `annotations/<id>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::io::{self, RawFrame};
use crate::imaging::{BayerImage, EncodedImage, Illuminant, PatchRect};

/// Ground-truth illuminant from a white-patch rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub rect: PatchRect,
    pub illuminant: [f64; 3],
    pub annotator: String,
    /// UTC seconds.
    pub timestamp: u64,
    pub version: u64,
}

impl AnnotationRecord {
    pub fn illuminant(&self) -> Result<Illuminant> {
        let [r, g, b] = self.illuminant;
        let norm = (r * r + g * g + b * b).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "annotation `{}` illuminant is not unit length (norm {norm})",
                self.image_id
            )));
        }
        Illuminant::new(r, g, b)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("record serializes");
        v.push(b'\n');
        v
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad annotation JSON: {e}")))
    }
}

/// Ids must be usable as file stems and URL path segments.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub raw: BayerImage,
    pub target: EncodedImage,
    pub annotation: Option<AnnotationRecord>,
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths { root: root.into() }
    }

    pub fn raw(&self, id: &str) -> PathBuf {
        self.root.join("raw").join(format!("{id}.pgm"))
    }

    pub fn meta(&self, id: &str) -> PathBuf {
        self.root.join("raw").join(format!("{id}.meta.json"))
    }

    pub fn target(&self, id: &str) -> PathBuf {
        self.root.join("target").join(format!("{id}.png"))
    }

    pub fn annotation(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.json"))
    }

    /// Sorted ids of every `raw/<id>.pgm`.
    pub fn ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("raw");
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for e in entries {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".pgm") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_raw(&self, id: &str) -> Result<BayerImage> {
        io::load_raw(&self.raw(id), Some(&self.meta(id)))
    }

    /// `Ok(None)` when the file does not exist.
    pub fn load_annotation(&self, id: &str) -> Result<Option<AnnotationRecord>> {
        let p = self.annotation(id);
        match std::fs::read(&p) {
            Ok(b) => AnnotationRecord::decode(&b)
                .map(Some)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    }
}

/// Loads every sample, collecting all problems into one report.
///
/// With `require_annotations`, a missing annotation is an error.
pub fn load_dataset(root: &Path, require_annotations: bool) -> Result<Vec<SamplePair>> {
    let paths = DatasetPaths::new(root);
    let ids = paths.ids()?;
    let mut problems = Vec::new();
    let mut out = Vec::new();
    if ids.is_empty() {
        problems.push(format!("{}: no raw/<id>.pgm files", root.display()));
    }
    for id in ids {
        if !valid_id(&id) {
            problems.push(format!("{}: invalid sample id", paths.raw(&id).display()));
            continue;
        }
        let raw = paths.load_raw(&id).map_err(|e| problems.push(format!("{e}"))).ok();
        let target = io::read_png(&paths.target(&id)).map_err(|e| problems.push(format!("{e}"))).ok();
        let annotation = match paths.load_annotation(&id) {
            Ok(Some(a)) => {
                if a.image_id != id {
                    problems.push(format!(
                        "{}: image_id `{}` does not match file name",
                        paths.annotation(&id).display(),
                        a.image_id
                    ));
                }
                if let Err(e) = a.illuminant() {
                    problems.push(format!("{}: {e}", paths.annotation(&id).display()));
                }
                Some(a)
            }
            Ok(None) => {
                if require_annotations {
                    problems.push(format!("{}: missing annotation", paths.annotation(&id).display()));
                }
                None
            }
            Err(e) => {
                problems.push(format!("{e}"));
                None
            }
        };
        if let (Some(raw), Some(target)) = (raw, target) {
            if (raw.width, raw.height) != (target.width, target.height) {
                problems.push(format!(
                    "{}: target is {}x{}, raw is {}x{}",
                    paths.target(&id).display(),
                    target.width,
                    target.height,
                    raw.width,
                    raw.height
                ));
                continue;
            }
            if let Some(a) = &annotation {
                if let Err(e) = a.rect.validate(raw.width, raw.height) {
                    problems.push(format!("{}: {e}", paths.annotation(&id).display()));
                }
            }
            out.push(SamplePair { id, raw, target, annotation });
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(format!("dataset validation failed:\n  {}", problems.join("\n  "))))
    }
}

/// Writes one sample in dataset layout.
pub fn write_sample(root: &Path, raw: &RawFrame, sample: &SamplePair) -> Result<()> {
    let paths = DatasetPaths::new(root);
    for sub in ["raw", "target", "annotations"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    io::write_pgm(&paths.raw(&sample.id), raw)?;
    io::write_meta(&paths.meta(&sample.id), &sample.raw.meta)?;
    io::write_file_atomic(&paths.target(&sample.id), &io::encode_png8(&sample.target, &[])?)?;
    if let Some(a) = &sample.annotation {
        io::write_file_atomic(&paths.annotation(&sample.id), &a.encode())?;
    }
    Ok(())
}

/// Ordered ids with a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub ids: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Sorts ids and puts the first `train_count` into the training split.
pub fn split_dataset(ids: &[String], train_count: usize) -> Result<DatasetIndex> {
    if train_count >= ids.len() {
        return Err(Error::Parameter(format!(
            "train_count {train_count} must be smaller than the {} available ids",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let test = sorted.split_off(train_count);
    let train = sorted;
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    Ok(DatasetIndex { ids: all, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_split() {
        let ids: Vec<String> = (0..150).map(|i| format!("img{i:03}")).rev().collect();
        let s = split_dataset(&ids, 120).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (120, 30));
        assert_eq!(s.train[0], "img000");
        assert_eq!(s, split_dataset(&ids, 120).unwrap());
    }

    #[test]
    fn small_split_and_errors() {
        let ids = vec!["b".to_string(), "a".to_string()];
        let s = split_dataset(&ids, 1).unwrap();
        assert_eq!(s.train, vec!["a"]);
        assert_eq!(s.test, vec!["b"]);
        assert!(matches!(split_dataset(&ids, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn record_json_field_names() {
        let rec = AnnotationRecord {
            image_id: "x".into(),
            rect: PatchRect { x: 1, y: 2, w: 4, h: 4 },
            illuminant: [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0],
            annotator: "a".into(),
            timestamp: 5,
            version: 1,
        };
        let v: serde_json::Value = serde_json::from_slice(&rec.encode()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["image_id", "rect", "illuminant", "annotator", "timestamp", "version"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(AnnotationRecord::decode(&rec.encode()).unwrap(), rec);
        rec.illuminant().unwrap();
    }

    #[test]
    fn ids_are_checked() {
        assert!(valid_id("scene_01-a"));
        assert!(!valid_id("../x"));
        assert!(!valid_id(""));
    }
}
