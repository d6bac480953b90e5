//! Labelled images held in memory, loaded from a manifest.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{validation, Result};
use crate::image::ImageArray;
use crate::manifest::{DatasetManifest, ImageRecord};

/// Images with dense class labels; class `k` is the `k`-th distinct subject id.
#[derive(Clone, Debug)]
pub struct Corpus {
    images: Vec<ImageArray>,
    labels: Vec<usize>,
    subject_ids: Vec<String>,
}

impl Corpus {
    pub fn new(images: Vec<ImageArray>, labels: Vec<usize>, subject_ids: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(validation("one label per image required"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= subject_ids.len()) {
            return Err(validation(format!("label {l} has no subject id")));
        }
        Ok(Self {
            images,
            labels,
            subject_ids,
        })
    }

    /// Loads every record's image, optionally skipping some records.
    pub fn from_manifest_filtered(
        manifest: &DatasetManifest,
        root: &Path,
        keep: impl Fn(&ImageRecord) -> bool,
    ) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut subject_ids = Vec::new();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for r in manifest.records.iter().filter(|r| keep(r)) {
            let label = *index.entry(r.subject_id.as_str()).or_insert_with(|| {
                subject_ids.push(r.subject_id.clone());
                subject_ids.len() - 1
            });
            images.push(ImageArray::load_png(&root.join(&r.path))?);
            labels.push(label);
        }
        Self::new(images, labels, subject_ids)
    }

    pub fn from_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        Self::from_manifest_filtered(manifest, root, |_| true)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        Self::from_manifest(&manifest, &DatasetManifest::root_of(manifest_path))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageArray] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn num_classes(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// All images resized to a square resolution.
    pub fn resized(&self, resolution: usize) -> Vec<ImageArray> {
        self.images.iter().map(|i| i.resized(resolution, resolution)).collect()
    }
}
