//! Corpus directories: `features/<id>.escf` + `features/<id>.json`, and one
//! `<split>.txt` manifest of ids per split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::annotations::{AnnotationError, RepetitionAnnotation};
use crate::features::{load_features, save_features, FeatureError, FeatureSequence};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Feature {
        path: PathBuf,
        source: FeatureError,
    },
    #[error("{path}: {source}")]
    Annotation {
        path: PathBuf,
        source: AnnotationError,
    },
    #[error("annotation for {id} is missing")]
    MissingAnnotation { id: String },
    #[error("empty corpus")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub features: FeatureSequence,
    pub annotation: RepetitionAnnotation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

pub fn features_dir(root: &Path) -> PathBuf {
    root.join("features")
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.txt"))
}

impl Corpus {
    pub fn new(items: Vec<CorpusItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loads every id listed in `<root>/<split>.txt`.
    pub fn load_split(root: &Path, split: &str) -> Result<Self, CorpusError> {
        let manifest = manifest_path(root, split);
        let text = fs::read_to_string(&manifest).map_err(|source| CorpusError::Io {
            path: manifest.clone(),
            source,
        })?;
        let dir = features_dir(root);
        let mut items = Vec::new();
        for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fpath = dir.join(format!("{id}.escf"));
            let apath = dir.join(format!("{id}.json"));
            let features = load_features(&fpath).map_err(|source| CorpusError::Feature {
                path: fpath.clone(),
                source,
            })?;
            if !apath.exists() {
                return Err(CorpusError::MissingAnnotation { id: id.to_string() });
            }
            let annotation = RepetitionAnnotation::load(&apath).map_err(|source| CorpusError::Annotation {
                path: apath.clone(),
                source,
            })?;
            items.push(CorpusItem { features, annotation });
        }
        Ok(Self { items })
    }

    /// Writes feature files, sidecars, and the split manifest.
    pub fn save_split(&self, root: &Path, split: &str) -> Result<(), CorpusError> {
        let dir = features_dir(root);
        fs::create_dir_all(&dir).map_err(|source| CorpusError::Io { path: dir.clone(), source })?;
        let mut manifest = String::new();
        for item in &self.items {
            let id = &item.annotation.video_id;
            let fpath = dir.join(format!("{id}.escf"));
            save_features(&item.features, &fpath).map_err(|source| CorpusError::Feature { path: fpath, source })?;
            let apath = dir.join(format!("{id}.json"));
            item.annotation
                .save(&apath)
                .map_err(|source| CorpusError::Annotation { path: apath, source })?;
            manifest.push_str(id);
            manifest.push('\n');
        }
        let mpath = manifest_path(root, split);
        fs::write(&mpath, manifest).map_err(|source| CorpusError::Io { path: mpath, source })
    }

    pub fn class_index(&self) -> ClassIndex {
        ClassIndex::build(&self.items)
    }
}

/// Class label → indices of videos that carry annotated repetitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassIndex {
    by_class: BTreeMap<String, Vec<usize>>,
}

impl ClassIndex {
    pub fn build(items: &[CorpusItem]) -> Self {
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if !item.annotation.repetitions.is_empty() {
                by_class.entry(item.annotation.class_label.clone()).or_default().push(i);
            }
        }
        Self { by_class }
    }

    /// Same-class videos with repetitions, excluding `exclude`.
    pub fn donors(&self, class: &str, exclude: Option<usize>) -> Vec<usize> {
        self.by_class
            .get(class)
            .map(|v| v.iter().copied().filter(|&i| Some(i) != exclude).collect())
            .unwrap_or_default()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.by_class.keys().map(String::as_str)
    }
}
