//! Meme dataset loading, validation and persistence.
//!
//! A dataset on disk is a UTF-8 JSONL manifest (one record per line, fields
//! exactly `{id, image_path, caption, label, split, aux}`) plus 8-bit RGB
//! PNG image files. Image paths are resolved relative to the manifest's
//! directory. Captions are normalized to NFC on load so that character
//! indices are stable for the character-level attacks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Errors raised by manifest and image I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed manifest line: {source}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: invalid label {value} (expected 0 or 1)")]
    InvalidLabel {
        path: PathBuf,
        line: usize,
        value: i64,
    },
    #[error("{path}:{line}: invalid split {value:?} (expected train|val|test|aug)")]
    InvalidSplit {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: empty id")]
    EmptyId { path: PathBuf, line: usize },
    #[error("image decode error at {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image encode error at {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image {path} has zero dimension")]
    EmptyImage { path: PathBuf },
}

/// Binary hate label. Label 1 (hateful) is the positive class everywhere.
/// Serializes as the integer 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Hateful,
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = u8::deserialize(deserializer)?;
        Label::from_index(value)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {value}")))
    }
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Hateful => 1,
        }
    }

    pub fn from_index(value: u8) -> Option<Label> {
        match value {
            0 => Some(Label::Benign),
            1 => Some(Label::Hateful),
            _ => None,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Benign => Label::Hateful,
            Label::Hateful => Label::Benign,
        }
    }
}

/// Dataset partition tag. `Aug` marks generated augmentation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Aug,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Aug => "aug",
        }
    }

    pub fn parse(value: &str) -> Option<Split> {
        match value {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "aug" => Some(Split::Aug),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image+caption+label record, the unit flowing through every pipeline.
#[derive(Debug, Clone)]
pub struct MemeSample {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
    pub label: Label,
    pub split: Split,
    /// Opaque auxiliary tags (stance/humour/target, provenance, ...).
    pub aux: BTreeMap<String, String>,
}

/// An ordered, id-unique collection of samples.
///
/// `split` is `Some` when every sample shares one split (e.g. after
/// [`Dataset::subset`]) and `None` for mixed manifests.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<MemeSample>,
    pub split: Option<Split>,
    pub source_manifest: PathBuf,
}

impl Dataset {
    /// Build a dataset from samples, validating id uniqueness.
    pub fn new(samples: Vec<MemeSample>, source_manifest: PathBuf) -> Result<Dataset, DataError> {
        let mut seen = HashSet::new();
        for (idx, sample) in samples.iter().enumerate() {
            if sample.id.is_empty() {
                return Err(DataError::EmptyId {
                    path: source_manifest.clone(),
                    line: idx + 1,
                });
            }
            if !seen.insert(sample.id.as_str()) {
                return Err(DataError::DuplicateId {
                    path: source_manifest.clone(),
                    line: idx + 1,
                    id: sample.id.clone(),
                });
            }
        }
        let split = uniform_split(&samples);
        Ok(Dataset {
            samples,
            split,
            source_manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples belonging to one split, in manifest order.
    pub fn subset(&self, split: Split) -> Dataset {
        let samples: Vec<MemeSample> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect();
        Dataset {
            samples,
            split: Some(split),
            source_manifest: self.source_manifest.clone(),
        }
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

fn uniform_split(samples: &[MemeSample]) -> Option<Split> {
    let first = samples.first()?.split;
    samples.iter().all(|s| s.split == first).then_some(first)
}

/// On-disk manifest record. Field set is fixed; unknown fields are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image_path: String,
    caption: String,
    label: i64,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux: Option<BTreeMap<String, String>>,
}

/// Load a JSONL manifest, decoding and validating every referenced image.
///
/// Samples come back in file order. Captions are NFC-normalized. Errors
/// carry the manifest path and 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (line_idx, line) in reader.lines().enumerate() {
        let line_no = line_idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                source,
            })?;
        if record.id.is_empty() {
            return Err(DataError::EmptyId {
                path: path.to_path_buf(),
                line: line_no,
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: record.id,
            });
        }
        let label = u8::try_from(record.label)
            .ok()
            .and_then(Label::from_index)
            .ok_or(DataError::InvalidLabel {
                path: path.to_path_buf(),
                line: line_no,
                value: record.label,
            })?;
        let split = Split::parse(&record.split).ok_or_else(|| DataError::InvalidSplit {
            path: path.to_path_buf(),
            line: line_no,
            value: record.split.clone(),
        })?;
        let image_path = base_dir.join(&record.image_path);
        let image = load_rgb_image(&image_path)?;
        samples.push(MemeSample {
            id: record.id,
            image,
            caption: record.caption.nfc().collect(),
            label,
            split,
            aux: record.aux.unwrap_or_default(),
        });
    }

    let split = uniform_split(&samples);
    Ok(Dataset {
        samples,
        split,
        source_manifest: path.to_path_buf(),
    })
}

/// Decode an 8-bit RGB image, rejecting zero-dimension rasters.
pub fn load_rgb_image(path: &Path) -> Result<RgbImage, DataError> {
    let image = image::open(path)
        .map_err(|source| DataError::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    if image.width() == 0 || image.height() == 0 {
        return Err(DataError::EmptyImage {
            path: path.to_path_buf(),
        });
    }
    Ok(image)
}

/// Persist a dataset under `dir`: lossless PNGs in `dir/images/` plus
/// `dir/manifest.jsonl`. Returns the manifest path.
///
/// A saved dataset reloads to the identical captions, labels, splits and
/// pixel data.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| DataError::Io {
        path: images_dir.clone(),
        source,
    })?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let mut writer = BufWriter::new(file);

    for (idx, sample) in dataset.samples.iter().enumerate() {
        let file_name = format!("{idx:06}.png");
        let image_path = images_dir.join(&file_name);
        sample
            .image
            .save_with_format(&image_path, image::ImageFormat::Png)
            .map_err(|source| DataError::ImageEncode {
                path: image_path.clone(),
                source,
            })?;
        let record = ManifestRecord {
            id: sample.id.clone(),
            image_path: format!("images/{file_name}"),
            caption: sample.caption.clone(),
            label: sample.label.index() as i64,
            split: sample.split.as_str().to_string(),
            aux: if sample.aux.is_empty() {
                None
            } else {
                Some(sample.aux.clone())
            },
        };
        let line = serde_json::to_string(&record).expect("manifest record serializes");
        writeln!(writer, "{line}").map_err(|source| DataError::Io {
            path: manifest_path.clone(),
            source,
        })?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use tempfile::TempDir;

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "").unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.len(), 0);
        assert!(ds.split.is_none());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let err = load_manifest(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn ten_line_fixture_loads_in_file_order() {
        let dir = TempDir::new().unwrap();
        let ds = synth::make_synthetic_dataset(10, 0, 5);
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), 10);
        let ids: Vec<&str> = loaded.samples.iter().map(|s| s.id.as_str()).collect();
        let expected: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn split_counts_validate_per_split_field() {
        // Mirror of the 3136/924/1003 partition shape, scaled down 16x.
        let dir = TempDir::new().unwrap();
        let ds = synth::make_synthetic_dataset_with_splits(196, 58, 63, 0, 9);
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.count_split(Split::Train), 196);
        assert_eq!(loaded.count_split(Split::Val), 58);
        assert_eq!(loaded.count_split(Split::Test), 63);
        assert!(loaded.split.is_none());
        assert_eq!(loaded.subset(Split::Train).split, Some(Split::Train));
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = TempDir::new().unwrap();
        let ds = synth::make_synthetic_dataset(10, 3, 7);
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(loaded.samples.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.label, b.label);
            assert_eq!(a.split, b.split);
            assert_eq!(a.aux, b.aux);
            assert_eq!(a.image.as_raw(), b.image.as_raw());
        }
    }

    #[test]
    fn zero_sample_dataset_round_trips() {
        let dir = TempDir::new().unwrap();
        let ds = Dataset::new(Vec::new(), PathBuf::from("none")).unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&manifest).unwrap(), "");
        assert_eq!(load_manifest(&manifest).unwrap().len(), 0);
    }

    #[test]
    fn caption_with_newline_round_trips_exactly() {
        let dir = TempDir::new().unwrap();
        let mut ds = synth::make_synthetic_dataset(1, 1, 11);
        ds.samples[0].caption = "line one\nline two\ttabbed \"quoted\"".to_string();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert_eq!(text.lines().count(), 1, "newline must be escaped");
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.samples[0].caption, ds.samples[0].caption);
    }

    #[test]
    fn duplicate_id_is_rejected_with_line_number() {
        let dir = TempDir::new().unwrap();
        let ds = synth::make_synthetic_dataset(2, 2, 13);
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let mut text = fs::read_to_string(&manifest).unwrap();
        let first = text.lines().next().unwrap().to_string();
        text.push_str(&first);
        text.push('\n');
        fs::write(&manifest, text).unwrap();
        match load_manifest(&manifest).unwrap_err() {
            DataError::DuplicateId { line, .. } => assert_eq!(line, 3),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "{\"id\": \"a\"\n").unwrap();
        match load_manifest(&path).unwrap_err() {
            DataError::MalformedLine { line, .. } => assert_eq!(line, 1),
            other => panic!("expected malformed line, got {other:?}"),
        }
    }

    #[test]
    fn unresolvable_image_path_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let line = r#"{"id":"a","image_path":"missing.png","caption":"x","label":0,"split":"train"}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            DataError::ImageDecode { .. }
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = TempDir::new().unwrap();
        let ds = synth::make_synthetic_dataset(1, 4, 17);
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"label\":0", "\"label\":2")
            .replace("\"label\":1", "\"label\":2");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(
            load_manifest(&manifest).unwrap_err(),
            DataError::InvalidLabel { value: 2, .. }
        ));
    }

    #[test]
    fn captions_are_nfc_normalized_on_load() {
        let dir = TempDir::new().unwrap();
        let mut ds = synth::make_synthetic_dataset(1, 5, 19);
        // "e" + combining acute accent; NFC composes it to a single scalar.
        ds.samples[0].caption = "caf\u{0065}\u{0301}".to_string();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.samples[0].caption, "caf\u{e9}");
    }
}
