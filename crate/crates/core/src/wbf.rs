//! Weighted boxes fusion and its mask extension.
//!
//! Labels are clustered greedily within each class; nothing is discarded.
//! The fused box of a cluster is the (weight × score)-weighted mean of its
//! members' edges.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::geometry::{average_masks, boxes_iou, weighted_mean_box};
use crate::mask::Mask;
use crate::model::{AnnotatorId, CategoryId, ImageRecord, InstanceLabel};
use crate::rational::{from_f64, ratio, Rational};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WbfConfig {
    /// Minimum IoU between a label and a cluster's fused box to join it.
    pub iou_threshold: Rational,
    /// Per-annotator prior weight; annotators not listed weigh 1.
    pub annotator_weights: BTreeMap<AnnotatorId, Rational>,
    /// Multiply weights by the labels' confidence scores.
    pub use_scores: bool,
    /// Scale cluster scores by member count over annotator count.
    pub scale_by_count: bool,
}

impl Default for WbfConfig {
    fn default() -> Self {
        Self {
            iou_threshold: ratio(55, 100),
            annotator_weights: BTreeMap::new(),
            use_scores: true,
            scale_by_count: true,
        }
    }
}

impl WbfConfig {
    fn check(&self) -> Result<()> {
        if self.iou_threshold <= Rational::zero() || self.iou_threshold > Rational::one() {
            return Err(Error::Config(format!("WBF threshold must lie in (0, 1], got {}", self.iou_threshold)));
        }
        if let Some((a, _)) = self.annotator_weights.iter().find(|(_, w)| **w <= Rational::zero()) {
            return Err(Error::Config(format!("annotator {a} has a non-positive weight")));
        }
        Ok(())
    }

    fn annotator_weight(&self, label: &InstanceLabel) -> Rational {
        label
            .annotator()
            .and_then(|a| self.annotator_weights.get(a))
            .cloned()
            .unwrap_or_else(Rational::one)
    }

    /// Fusion weight of a label: annotator weight, times score if enabled.
    pub fn label_weight(&self, label: &InstanceLabel) -> Rational {
        let w = self.annotator_weight(label);
        if self.use_scores {
            w * label.score_or_one()
        } else {
            w
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedCluster {
    pub category_id: CategoryId,
    /// Members in admission order.
    pub members: Vec<InstanceLabel>,
    pub fused_box: BBox,
    pub fused_mask: Option<Mask>,
    pub score: Rational,
}

impl FusedCluster {
    pub fn member_boxes(&self) -> Vec<&BBox> {
        self.members.iter().map(|m| &m.bbox).collect()
    }
}

fn fused_box_of(members: &[InstanceLabel], weights: &[Rational]) -> Result<BBox> {
    if weights.iter().all(Zero::is_zero) {
        // all scores zero: fall back to the plain mean
        let ones = alloc::vec![Rational::one(); members.len()];
        return weighted_mean_box(members.iter().map(|m| &m.bbox).zip(ones.iter()));
    }
    weighted_mean_box(members.iter().map(|m| &m.bbox).zip(weights.iter()))
}

/// Clusters one image's labels.
pub fn wbf_image(image: &ImageRecord, config: &WbfConfig) -> Result<Vec<FusedCluster>> {
    config.check()?;
    let annotator_count = image.annotator_count().max(1);
    let mut by_class: BTreeMap<CategoryId, Vec<(&InstanceLabel, Rational)>> = BTreeMap::new();
    for label in image.labels() {
        by_class.entry(label.category_id).or_default().push((label, config.label_weight(label)));
    }
    let mut out = Vec::new();
    for (category_id, mut labels) in by_class {
        labels.sort_by(|(la, wa), (lb, wb)| wb.cmp(wa).then(la.id.cmp(&lb.id)));
        // (members, weights, fused box)
        let mut clusters: Vec<(Vec<InstanceLabel>, Vec<Rational>, BBox)> = Vec::new();
        for (label, weight) in labels {
            let target = clusters
                .iter()
                .position(|(_, _, fused)| boxes_iou(&[fused, &label.bbox]) >= config.iou_threshold);
            match target {
                Some(i) => {
                    let (members, weights, fused) = &mut clusters[i];
                    members.push(label.clone());
                    weights.push(weight);
                    *fused = fused_box_of(members, weights)?;
                }
                None => clusters.push((alloc::vec![label.clone()], alloc::vec![weight], label.bbox.clone())),
            }
        }
        for (members, weights, fused_box) in clusters {
            let fused_mask = fuse_member_masks(&members, &weights)?;
            let score = cluster_score(&members, annotator_count, config);
            out.push(FusedCluster { category_id, members, fused_box, fused_mask, score });
        }
    }
    Ok(out)
}

fn fuse_member_masks(members: &[InstanceLabel], weights: &[Rational]) -> Result<Option<Mask>> {
    let (masks, mask_weights): (Vec<&Mask>, Vec<Rational>) = members
        .iter()
        .zip(weights)
        .filter_map(|(m, w)| m.mask.as_ref().map(|mask| (mask, w.clone())))
        .unzip();
    if masks.is_empty() {
        return Ok(None);
    }
    let weights = if mask_weights.iter().any(Zero::is_zero) { None } else { Some(mask_weights.as_slice()) };
    Ok(Some(average_masks(&masks, weights)?.mask))
}

fn cluster_score(members: &[InstanceLabel], annotator_count: usize, config: &WbfConfig) -> Rational {
    let n = BigInt::from(members.len());
    let mean: Rational = members.iter().map(InstanceLabel::score_or_one).sum::<Rational>() / Rational::from_integer(n.clone());
    if !config.scale_by_count {
        return mean;
    }
    let scaled = mean * Rational::new(n, BigInt::from(annotator_count));
    if scaled > Rational::one() {
        Rational::one()
    } else {
        scaled
    }
}

/// Lowest weight an EM confidence can contribute.
pub fn confidence_floor() -> Rational {
    ratio(1, 1000)
}

/// Converts EM confidences into fusion weights, flooring them at 1e-3.
pub fn confidence_weights(confidences: &BTreeMap<AnnotatorId, f64>) -> Result<BTreeMap<AnnotatorId, Rational>> {
    let floor = confidence_floor();
    confidences
        .iter()
        .map(|(a, c)| {
            let w = from_f64(*c).ok_or_else(|| Error::Config(format!("confidence of {a} is not finite")))?;
            Ok((a.clone(), if w < floor { floor.clone() } else { w }))
        })
        .collect()
}

/// WBF with annotator weights taken from EM confidences.
pub fn wbf_em_image(
    image: &ImageRecord,
    confidences: &BTreeMap<AnnotatorId, f64>,
    config: &WbfConfig,
) -> Result<Vec<FusedCluster>> {
    if let Some(missing) = image.annotators().find(|a| !confidences.contains_key(*a)) {
        return Err(Error::Config(format!("no confidence for annotator {missing} on image {}", image.id)));
    }
    let config = WbfConfig { annotator_weights: confidence_weights(confidences)?, ..config.clone() };
    wbf_image(image, &config)
}
