//! Multi-annotator dataset model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rational::Rational;

pub type ImageId = u64;
pub type LabelId = u64;
pub type CategoryId = u32;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnnotatorId(pub String);

impl AnnotatorId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AnnotatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnnotatorId {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

impl From<String> for AnnotatorId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Where an aggregated label came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_ids: Vec<LabelId>,
    pub annotator_ids: Vec<AnnotatorId>,
    /// Generalized IoU of the source boxes.
    pub iou: Rational,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSource {
    Annotator(AnnotatorId),
    Fused(Provenance),
}

/// One instance annotation. When a mask is present the box is always the
/// mask's tight pixel rectangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabel {
    pub id: LabelId,
    pub source: LabelSource,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub mask: Option<Mask>,
    pub score: Option<Rational>,
}

impl InstanceLabel {
    pub fn new(id: LabelId, annotator: AnnotatorId, category_id: CategoryId, bbox: BBox) -> Self {
        Self { id, source: LabelSource::Annotator(annotator), category_id, bbox, mask: None, score: None }
    }

    /// Attaches a mask and replaces the box with the mask's bounding rectangle.
    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        self.bbox = mask
            .bbox()
            .ok_or_else(|| Error::Integrity(format!("label {} has an empty mask", self.id)))?;
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_score(mut self, score: Rational) -> Self {
        self.score = Some(score);
        self
    }

    pub fn annotator(&self) -> Option<&AnnotatorId> {
        match &self.source {
            LabelSource::Annotator(a) => Some(a),
            LabelSource::Fused(_) => None,
        }
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        match &self.source {
            LabelSource::Fused(p) => Some(p),
            LabelSource::Annotator(_) => None,
        }
    }

    /// Confidence score, 1 when absent.
    pub fn score_or_one(&self) -> Rational {
        self.score.clone().unwrap_or_else(Rational::one)
    }
}

/// One image with its labels grouped by annotator.
///
/// A key mapped to an empty list means the annotator looked at the image
/// and found nothing; a missing key means the annotator never saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    pub labels_by_annotator: BTreeMap<AnnotatorId, Vec<InstanceLabel>>,
    /// Aggregated labels (output datasets only).
    pub fused: Vec<InstanceLabel>,
}

impl ImageRecord {
    pub fn new(id: ImageId, width: u32, height: u32) -> Self {
        Self {
            id,
            width,
            height,
            file_name: String::new(),
            labels_by_annotator: BTreeMap::new(),
            fused: Vec::new(),
        }
    }

    pub fn annotators(&self) -> impl Iterator<Item = &AnnotatorId> {
        self.labels_by_annotator.keys()
    }

    pub fn annotator_count(&self) -> usize {
        self.labels_by_annotator.len()
    }

    /// Registers an annotator for this image (possibly with no labels).
    pub fn add_annotator(&mut self, annotator: AnnotatorId) {
        self.labels_by_annotator.entry(annotator).or_default();
    }

    /// Files a label under its annotator key, or with the fused labels.
    pub fn push_label(&mut self, label: InstanceLabel) {
        match label.annotator().cloned() {
            Some(a) => self.labels_by_annotator.entry(a).or_default().push(label),
            None => self.fused.push(label),
        }
    }

    /// All labels: annotator labels in annotator order, then fused labels.
    pub fn labels(&self) -> impl Iterator<Item = &InstanceLabel> {
        self.labels_by_annotator.values().flatten().chain(self.fused.iter())
    }

    pub fn label_count(&self) -> usize {
        self.labels_by_annotator.values().map(Vec::len).sum::<usize>() + self.fused.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    pub annotators: BTreeSet<AnnotatorId>,
}

impl Dataset {
    pub fn label_count(&self) -> usize {
        self.images.iter().map(ImageRecord::label_count).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = &InstanceLabel> {
        self.images.iter().flat_map(ImageRecord::labels)
    }

    pub fn category_ids(&self) -> Vec<CategoryId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Sorts images and categories by id and rebuilds the annotator roster
    /// from the images.
    pub fn canonicalize(&mut self) {
        self.images.sort_by_key(|i| i.id);
        self.categories.sort_by_key(|c| c.id);
        for image in &mut self.images {
            for labels in image.labels_by_annotator.values_mut() {
                labels.sort_by_key(|l| l.id);
            }
            image.fused.sort_by_key(|l| l.id);
        }
        self.annotators = self.images.iter().flat_map(|i| i.annotators().cloned()).collect();
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let mut category_ids = BTreeSet::new();
        for c in &self.categories {
            if !category_ids.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut image_ids = BTreeSet::new();
        let mut label_ids = BTreeSet::new();
        for image in &self.images {
            if !image_ids.insert(image.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", image.id)));
            }
            if image.width == 0 || image.height == 0 {
                return Err(Error::Integrity(format!("image {} has zero size", image.id)));
            }
            for (annotator, labels) in &image.labels_by_annotator {
                if !self.annotators.contains(annotator) {
                    return Err(Error::Integrity(format!(
                        "image {} references unknown annotator {annotator}",
                        image.id
                    )));
                }
                for label in labels {
                    if label.annotator() != Some(annotator) {
                        return Err(Error::Integrity(format!(
                            "label {} filed under annotator {annotator} but carries another source",
                            label.id
                        )));
                    }
                }
            }
            for label in image.labels() {
                if !label_ids.insert(label.id) {
                    return Err(Error::Integrity(format!("duplicate label id {}", label.id)));
                }
                if !category_ids.contains(&label.category_id) {
                    return Err(Error::Integrity(format!(
                        "label {} references unknown category {}",
                        label.id, label.category_id
                    )));
                }
                if !label.bbox.within_canvas(image.width, image.height) {
                    return Err(Error::Integrity(format!(
                        "label {} box lies outside image {}",
                        label.id, image.id
                    )));
                }
                if let Some(score) = &label.score {
                    if *score < Rational::zero() || *score > Rational::one() {
                        return Err(Error::Integrity(format!("label {} score outside [0, 1]", label.id)));
                    }
                }
                if let Some(mask) = &label.mask {
                    if mask.width() != image.width || mask.height() != image.height {
                        return Err(Error::Integrity(format!(
                            "label {} mask canvas differs from image {}",
                            label.id, image.id
                        )));
                    }
                    if mask.bbox().as_ref() != Some(&label.bbox) {
                        return Err(Error::Integrity(format!(
                            "label {} box is not the bounding rectangle of its mask",
                            label.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dataset size summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsReport {
    pub images: usize,
    pub annotators: usize,
    pub instances: usize,
    /// Σ over images of the number of annotators that labelled the image.
    pub annotator_passes: usize,
    /// `instances / annotator_passes`, 0 for an empty dataset.
    pub instances_per_image: Rational,
}

/// Instances per image and annotator, weighting each image by the number of
/// annotators that actually saw it.
pub fn dataset_stats(dataset: &Dataset) -> StatsReport {
    let instances = dataset.images.iter().map(|i| i.label_count()).sum::<usize>();
    let passes = dataset.images.iter().map(ImageRecord::annotator_count).sum::<usize>();
    let ratio = if passes == 0 {
        Rational::zero()
    } else {
        Rational::new(BigInt::from(instances), BigInt::from(passes))
    };
    StatsReport {
        images: dataset.images.len(),
        annotators: dataset.annotators.len(),
        instances,
        annotator_passes: passes,
        instances_per_image: ratio,
    }
}
