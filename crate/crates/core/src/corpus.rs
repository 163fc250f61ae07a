//! Annotated corpus records, vocabulary and per-image feature containers,
//! with their JSON / JSON-lines file formats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;
pub type PredicateId = usize;

/// Predicate index reserved for "no relation" when training the classifier head.
pub const BACKGROUND_PREDICATE: PredicateId = 0;

/// Sizes of the object-class and predicate label spaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    #[serde(rename = "num_classes")]
    pub num_object_classes: usize,
    pub num_predicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate_names: Option<Vec<String>>,
}

impl RelationVocab {
    pub fn new(num_object_classes: usize, num_predicates: usize) -> Self {
        RelationVocab {
            num_object_classes,
            num_predicates,
            class_names: None,
            predicate_names: None,
        }
    }

    pub fn with_class_names<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.class_names = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn class_name(&self, class: ClassId) -> Option<&str> {
        self.class_names.as_ref()?.get(class).map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_object_classes == 0 || self.num_predicates == 0 {
            return Err(Error::input("vocabulary needs at least one class and one predicate"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_object_classes {
                return Err(Error::input(format!(
                    "class_names has {} entries, expected {}",
                    names.len(),
                    self.num_object_classes
                )));
            }
        }
        if let Some(names) = &self.predicate_names {
            if names.len() != self.num_predicates {
                return Err(Error::input(format!(
                    "predicate_names has {} entries, expected {}",
                    names.len(),
                    self.num_predicates
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box `[x, y, w, h]` in pixels, top-left origin.
pub type BoxXywh = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
}

/// Ground-truth relation between two object instances of the same image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subj: usize,
    pub pred: PredicateId,
    pub obj: usize,
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    pub relations: Vec<RelationAnnotation>,
}

impl SceneSample {
    pub fn labels(&self) -> Vec<ClassId> {
        self.objects.iter().map(|o| o.class).collect()
    }

    /// Checks every label and index against `vocab`, naming the offending field.
    pub fn validate(&self, vocab: &RelationVocab) -> Result<()> {
        let id = &self.image_id;
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class >= vocab.num_object_classes {
                return Err(Error::input(format!(
                    "sample {id}: objects[{i}].class = {} out of range [0, {})",
                    obj.class, vocab.num_object_classes
                )));
            }
        }
        let n = self.objects.len();
        for (i, rel) in self.relations.iter().enumerate() {
            if rel.pred >= vocab.num_predicates {
                return Err(Error::input(format!(
                    "sample {id}: relations[{i}].pred = {} out of range [0, {})",
                    rel.pred, vocab.num_predicates
                )));
            }
            if rel.subj >= n {
                return Err(Error::input(format!(
                    "sample {id}: relations[{i}].subj = {} but image has {n} objects",
                    rel.subj
                )));
            }
            if rel.obj >= n {
                return Err(Error::input(format!(
                    "sample {id}: relations[{i}].obj = {} but image has {n} objects",
                    rel.obj
                )));
            }
            if rel.subj == rel.obj {
                return Err(Error::input(format!(
                    "sample {id}: relations[{i}] relates object {} to itself",
                    rel.subj
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_corpus(samples: &[SceneSample], vocab: &RelationVocab) -> Result<()> {
    samples.iter().try_for_each(|s| s.validate(vocab))
}

/// Index of the ordered pair `(s, t)`, `s != t`, among the `n (n - 1)` ordered
/// pairs of an image, enumerated subject-major.
pub fn pair_index(n: usize, s: usize, t: usize) -> usize {
    debug_assert!(s != t && s < n && t < n);
    s * (n - 1) + if t < s { t } else { t - 1 }
}

/// Inverse of [`pair_index`].
pub fn pair_from_index(n: usize, index: usize) -> (usize, usize) {
    let s = index / (n - 1);
    let r = index % (n - 1);
    (s, if r < s { r } else { r + 1 })
}

/// Region features of one image: one vector per object (`f_s`, `f_t`) and one
/// per ordered pair (`f_u`, indexed by [`pair_index`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    pub objects: Vec<Vec<f64>>,
    pub pairs: Vec<Vec<f64>>,
}

impl ImageFeatures {
    pub fn object(&self, index: usize) -> Option<&[f64]> {
        self.objects.get(index).map(Vec::as_slice)
    }

    pub fn union(&self, s: usize, t: usize) -> Option<&[f64]> {
        let n = self.objects.len();
        if s == t || s >= n || t >= n {
            return None;
        }
        self.pairs.get(pair_index(n, s, t)).map(Vec::as_slice)
    }
}

/// Feature vectors for a whole corpus keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    pub images: BTreeMap<String, ImageFeatures>,
}

impl FeatureStore {
    pub fn from_records(records: Vec<ImageFeatures>) -> Result<Self> {
        let mut dim = None;
        let mut images = BTreeMap::new();
        for rec in records {
            for v in rec.objects.iter().chain(rec.pairs.iter()) {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::input(format!(
                            "features for image {}: vector of length {} but expected {d}",
                            rec.image_id,
                            v.len()
                        )))
                    }
                    _ => {}
                }
            }
            let n = rec.objects.len();
            if !rec.pairs.is_empty() && rec.pairs.len() != n * n.saturating_sub(1) {
                return Err(Error::input(format!(
                    "features for image {}: {} pair vectors for {n} objects, expected {}",
                    rec.image_id,
                    rec.pairs.len(),
                    n * n.saturating_sub(1)
                )));
            }
            images.insert(rec.image_id.clone(), rec);
        }
        Ok(FeatureStore {
            dim: dim.unwrap_or(0),
            images,
        })
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageFeatures> {
        self.images.get(image_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageFeatures> {
        self.images.values()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads one JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes one pretty-printed JSON document followed by a newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::input(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a JSON-lines file; blank lines are skipped, errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)
            .map_err(|e| Error::input(format!("serializing {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_corpus(path: &Path) -> Result<Vec<SceneSample>> {
    read_jsonl(path)
}

pub fn read_vocab(path: &Path) -> Result<RelationVocab> {
    let vocab: RelationVocab = read_json(path)?;
    vocab.validate()?;
    Ok(vocab)
}

pub fn read_features(path: &Path) -> Result<FeatureStore> {
    FeatureStore::from_records(read_jsonl(path)?)
}
