//! Localization stage: turns the labels of one image into consensus groups.
//!
//! Annotator subsets of at least half the image's annotators are visited
//! from largest to smallest. For each subset every cross-annotator label
//! tuple whose generalized box IoU reaches `theta` becomes a candidate;
//! candidates are taken in descending IoU and committed when none of their
//! labels has been used yet. Whatever is never committed is discarded.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::{One, Zero};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::geometry::{boxes_iou, fuse_boxes, fuse_masks, FusionPolicy};
use crate::mask::Mask;
use crate::model::{AnnotatorId, CategoryId, ImageRecord, InstanceLabel, LabelId};
use crate::rational::{ratio, Rational};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalizationConfig {
    /// IoU admission threshold, in (0, 1].
    pub theta: Rational,
    /// Images with more annotators than this are rejected instead of
    /// enumerating a power set that large.
    pub max_annotators_exact: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self { theta: ratio(1, 2), max_annotators_exact: 6 }
    }
}

impl LocalizationConfig {
    pub fn new(theta: Rational) -> Result<Self> {
        let config = Self { theta, ..Self::default() };
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<()> {
        if self.theta <= Rational::zero() || self.theta > Rational::one() {
            return Err(Error::Config(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// A tuple of labels from distinct annotators together with its IoU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchCandidate<'a> {
    /// One label per subset annotator, in annotator order.
    pub labels: Vec<&'a InstanceLabel>,
    pub iou: Rational,
}

impl MatchCandidate<'_> {
    pub fn subset_size(&self) -> usize {
        self.labels.len()
    }

    fn label_ids(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.labels.iter().map(|l| l.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusGroup {
    /// Members in annotator order.
    pub members: Vec<InstanceLabel>,
    pub fused_box: BBox,
    /// Present when at least one member carries a mask and the masks could
    /// be fused (an empty mask intersection leaves this `None`).
    pub fused_mask: Option<Mask>,
    pub iou: Rational,
}

impl ConsensusGroup {
    pub fn class_votes(&self) -> Vec<(AnnotatorId, CategoryId)> {
        self.members
            .iter()
            .filter_map(|m| m.annotator().map(|a| (a.clone(), m.category_id)))
            .collect()
    }

    pub fn member_ids(&self) -> Vec<LabelId> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn annotator_ids(&self) -> Vec<AnnotatorId> {
        self.members.iter().filter_map(|m| m.annotator().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalizationOutcome {
    pub groups: Vec<ConsensusGroup>,
    /// Labels never committed to a group, in annotator then label order.
    pub discarded: Vec<InstanceLabel>,
    /// Groups whose masks had no common pixel under intersection fusion.
    pub degenerate_masks: usize,
}

/// Smallest admissible subset size, ⌈r/2⌉.
pub fn majority_size(annotators: usize) -> usize {
    annotators.div_ceil(2)
}

/// All subsets of `annotators` (assumed sorted) with size at least
/// `min_size`, by descending size and lexicographically within a size.
pub fn annotator_subsets<T: Clone>(annotators: &[T], min_size: usize) -> Vec<Vec<T>> {
    let n = annotators.len();
    let mut out = Vec::new();
    for size in (min_size.max(1)..=n).rev() {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| annotators[i].clone()).collect());
            // next combination in lexicographic order
            let mut i = size;
            while i > 0 && idx[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

fn order_candidates(a: &MatchCandidate<'_>, b: &MatchCandidate<'_>) -> Ordering {
    b.iou.cmp(&a.iou).then_with(|| a.label_ids().cmp(b.label_ids()))
}

/// Cartesian product of the pools (one label per pool) restricted to tuples
/// with IoU ≥ `theta`, sorted by descending IoU then by member label ids.
///
/// Partial tuples are pruned as soon as their common intersection is empty
/// or falls below `theta` times the largest member area: adding members
/// never raises the generalized IoU, and the union is at least the largest
/// member.
fn product_candidates<'a>(pools: &[Vec<&'a InstanceLabel>], theta: &Rational) -> Vec<MatchCandidate<'a>> {
    let mut out = Vec::new();
    if pools.iter().any(Vec::is_empty) {
        return out;
    }
    if pools.len() == 1 {
        out.extend(pools[0].iter().map(|l| MatchCandidate { labels: alloc::vec![*l], iou: Rational::one() }));
        out.sort_by(order_candidates);
        return out;
    }
    let mut chosen: Vec<&'a InstanceLabel> = Vec::with_capacity(pools.len());
    let mut stack: Vec<(BBox, Rational)> = Vec::with_capacity(pools.len());
    descend(pools, theta, &mut chosen, &mut stack, &mut out);
    out.sort_by(order_candidates);
    out
}

fn descend<'a>(
    pools: &[Vec<&'a InstanceLabel>],
    theta: &Rational,
    chosen: &mut Vec<&'a InstanceLabel>,
    stack: &mut Vec<(BBox, Rational)>,
    out: &mut Vec<MatchCandidate<'a>>,
) {
    let depth = chosen.len();
    if depth == pools.len() {
        let boxes: Vec<&BBox> = chosen.iter().map(|l| &l.bbox).collect();
        let iou = boxes_iou(&boxes);
        if iou >= *theta {
            out.push(MatchCandidate { labels: chosen.clone(), iou });
        }
        return;
    }
    for label in &pools[depth] {
        let area = label.bbox.area();
        let next = match stack.last() {
            None => Some((label.bbox.clone(), area)),
            Some((inter, max_area)) => inter.intersection(&label.bbox).and_then(|inter| {
                let max_area = if area > *max_area { area } else { max_area.clone() };
                (inter.area() >= theta * &max_area).then_some((inter, max_area))
            }),
        };
        if let Some(state) = next {
            stack.push(state);
            chosen.push(label);
            descend(pools, theta, chosen, stack, out);
            chosen.pop();
            stack.pop();
        }
    }
}

/// Candidate tuples for one annotator subset of an image.
pub fn enumerate_candidates<'a>(
    image: &'a ImageRecord,
    subset: &[AnnotatorId],
    theta: &Rational,
) -> Result<Vec<MatchCandidate<'a>>> {
    let mut sorted: Vec<&AnnotatorId> = subset.iter().collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("annotator subset contains duplicates".to_string()));
    }
    let pools = sorted
        .iter()
        .map(|a| {
            image
                .labels_by_annotator
                .get(*a)
                .map(|labels| labels.iter().collect::<Vec<_>>())
                .ok_or_else(|| Error::Config(format!("annotator {a} did not annotate image {}", image.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(product_candidates(&pools, theta))
}

fn aggregate(members: Vec<InstanceLabel>, iou: Rational, fusion: FusionPolicy) -> Result<(ConsensusGroup, bool)> {
    let boxes: Vec<&BBox> = members.iter().map(|m| &m.bbox).collect();
    let fused_box = fuse_boxes(&boxes, fusion, None)?;
    let masks: Vec<&Mask> = members.iter().filter_map(|m| m.mask.as_ref()).collect();
    let (fused_mask, degenerate) = if masks.is_empty() {
        (None, false)
    } else {
        match fuse_masks(&masks, fusion, None) {
            Ok(m) => (Some(m), false),
            Err(Error::DegenerateRegion(_)) => (None, true),
            Err(e) => return Err(e),
        }
    };
    Ok((ConsensusGroup { members, fused_box, fused_mask, iou }, degenerate))
}

/// Runs the localization stage on one image.
pub fn localize_image(
    image: &ImageRecord,
    config: &LocalizationConfig,
    fusion: FusionPolicy,
) -> Result<LocalizationOutcome> {
    config.check()?;
    let annotators: Vec<AnnotatorId> = image.annotators().cloned().collect();
    if annotators.len() > config.max_annotators_exact {
        return Err(Error::Infeasible(format!(
            "image {} has {} annotators, above the exact-enumeration limit of {}; \
             split its annotators into smaller chunks or raise the limit",
            image.id,
            annotators.len(),
            config.max_annotators_exact
        )));
    }
    let mut outcome = LocalizationOutcome::default();
    if annotators.is_empty() {
        return Ok(outcome);
    }
    let mut available: alloc::collections::BTreeSet<LabelId> = image.labels().map(|l| l.id).collect();
    let min_size = majority_size(annotators.len());
    for subset in annotator_subsets(&annotators, min_size) {
        let pools: Vec<Vec<&InstanceLabel>> = subset
            .iter()
            .map(|a| image.labels_by_annotator[a].iter().filter(|l| available.contains(&l.id)).collect())
            .collect();
        for candidate in product_candidates(&pools, &config.theta) {
            if !candidate.label_ids().all(|id| available.contains(&id)) {
                continue;
            }
            for id in candidate.label_ids() {
                available.remove(&id);
            }
            let members = candidate.labels.iter().map(|l| (*l).clone()).collect();
            let (group, degenerate) = aggregate(members, candidate.iou, fusion)?;
            outcome.degenerate_masks += usize::from(degenerate);
            outcome.groups.push(group);
        }
    }
    outcome.discarded = image.labels().filter(|l| available.contains(&l.id)).cloned().collect();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceLabel;
    use alloc::vec;

    fn label(id: LabelId, who: &str, class: CategoryId, r: [i64; 4]) -> InstanceLabel {
        InstanceLabel::new(id, who.into(), class, BBox::from_ints(r[0], r[1], r[2], r[3]).unwrap())
    }

    fn image(labels: Vec<InstanceLabel>, annotators: &[&str]) -> ImageRecord {
        let mut im = ImageRecord::new(1, 100, 100);
        for a in annotators {
            im.add_annotator((*a).into());
        }
        for l in labels {
            im.push_label(l);
        }
        im
    }

    fn half() -> LocalizationConfig {
        LocalizationConfig::default()
    }

    #[test]
    fn subsets_by_size_then_lexicographic() {
        let s = annotator_subsets(&["a", "b", "c"], 2);
        assert_eq!(s, vec![vec!["a", "b", "c"], vec!["a", "b"], vec!["a", "c"], vec!["b", "c"]]);
        assert_eq!(annotator_subsets(&["a"], 1), vec![vec!["a"]]);
        assert_eq!(annotator_subsets(&["a", "b", "c", "d", "e"], 3).len(), 1 + 5 + 10);
        assert_eq!(majority_size(1), 1);
        assert_eq!(majority_size(2), 1);
        assert_eq!(majority_size(3), 2);
        assert_eq!(majority_size(4), 2);
        assert_eq!(majority_size(5), 3);
    }

    #[test]
    fn full_consensus() {
        let im = image(
            vec![
                label(1, "a", 1, [10, 10, 50, 50]),
                label(2, "b", 1, [11, 10, 51, 50]),
                label(3, "c", 1, [10, 11, 50, 51]),
            ],
            &[],
        );
        let out = localize_image(&im, &half(), FusionPolicy::Average).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].members.len(), 3);
        assert!(out.discarded.is_empty());
    }

    #[test]
    fn outlier_is_discarded() {
        // a/b IoU = 80/100 = 0.8, c disjoint
        let im = image(
            vec![
                label(1, "a", 1, [0, 0, 10, 10]),
                label(2, "b", 1, [0, 0, 10, 8]),
                label(3, "c", 1, [50, 50, 60, 60]),
            ],
            &[],
        );
        let out = localize_image(&im, &half(), FusionPolicy::Union).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].member_ids(), vec![1, 2]);
        assert_eq!(out.groups[0].iou, ratio(4, 5));
        assert_eq!(out.discarded.iter().map(|l| l.id).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn greedy_takes_best_tuple_first() {
        // a1-b1 0.9 and a2-b2 0.6 are label-disjoint; a1-b2 0.7, a2-b1 0.2
        let im = image(
            vec![
                label(1, "a", 1, [0, 0, 100, 10]),
                label(2, "a", 1, [0, 20, 100, 30]),
                label(3, "b", 1, [0, 0, 90, 10]),
                label(4, "b", 1, [0, 20, 60, 30]),
            ],
            &["c"],
        );
        let cands = enumerate_candidates(&im, &["a".into(), "b".into()], &ratio(1, 2)).unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].iou, ratio(9, 10));
        let out = localize_image(&im, &half(), FusionPolicy::Average).unwrap();
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.groups[0].member_ids(), vec![1, 3]);
        assert_eq!(out.groups[1].member_ids(), vec![2, 4]);
    }

    #[test]
    fn candidate_product_cardinality() {
        let im = image(
            vec![
                label(1, "a", 1, [0, 0, 10, 10]),
                label(2, "a", 1, [0, 0, 10, 10]),
                label(3, "b", 1, [0, 0, 10, 10]),
                label(4, "b", 1, [0, 0, 10, 10]),
                label(5, "b", 1, [0, 0, 10, 10]),
            ],
            &[],
        );
        let all = enumerate_candidates(&im, &["a".into(), "b".into()], &ratio(1, 100)).unwrap();
        assert_eq!(all.len(), 6);
        // equal IoU: ordered by label ids
        let ids: Vec<Vec<LabelId>> = all.iter().map(|c| c.label_ids().collect()).collect();
        assert_eq!(ids[0], vec![1, 3]);
        assert_eq!(ids[5], vec![2, 5]);
    }

    #[test]
    fn strict_theta_rejects_non_coincident() {
        let im = image(vec![label(1, "a", 1, [0, 0, 10, 10]), label(2, "b", 1, [1, 0, 11, 10])], &[]);
        assert!(enumerate_candidates(&im, &["a".into(), "b".into()], &Rational::one()).unwrap().is_empty());
    }

    #[test]
    fn single_annotator_keeps_every_label() {
        let im = image(vec![label(1, "a", 1, [0, 0, 10, 10]), label(2, "a", 2, [20, 20, 30, 30])], &[]);
        let out = localize_image(&im, &half(), FusionPolicy::Intersection).unwrap();
        assert_eq!(out.groups.len(), 2);
        assert!(out.discarded.is_empty());
    }

    #[test]
    fn too_many_annotators_is_infeasible() {
        let names = ["a", "b", "c", "d", "e", "f", "g"];
        let im = image(vec![], &names);
        assert!(matches!(localize_image(&im, &half(), FusionPolicy::Union), Err(Error::Infeasible(_))));
        let empty = image(vec![], &[]);
        assert_eq!(localize_image(&empty, &half(), FusionPolicy::Union).unwrap(), LocalizationOutcome::default());
    }

    #[test]
    fn theta_out_of_range() {
        assert!(LocalizationConfig::new(Rational::zero()).is_err());
        assert!(LocalizationConfig::new(ratio(3, 2)).is_err());
    }

    /// Raising theta can lower the discard count: a loose threshold lets a
    /// three-way match consume the label that a stricter threshold would pair
    /// with a fourth label.
    #[test]
    fn raising_theta_can_reduce_discards() {
        let im = image(
            vec![
                label(1, "a", 1, [0, 0, 10, 10]),
                label(2, "a", 1, [3, 0, 13, 10]),
                label(3, "b", 1, [0, 0, 10, 10]),
                label(4, "c", 1, [3, 0, 13, 10]),
            ],
            &[],
        );
        let loose = localize_image(&im, &LocalizationConfig::new(ratio(1, 2)).unwrap(), FusionPolicy::Union).unwrap();
        let strict = localize_image(&im, &LocalizationConfig::new(ratio(4, 5)).unwrap(), FusionPolicy::Union).unwrap();
        assert_eq!(loose.discarded.len(), 1);
        assert_eq!(strict.discarded.len(), 0);
    }

    #[test]
    fn masks_are_fused_after_commitment() {
        use crate::mask::Bitmap;
        let mk = |x0, y0, x1, y1| {
            let mut bm = Bitmap::new(40, 40);
            bm.fill_rect(x0, y0, x1, y1);
            Mask::from_bitmap(&bm)
        };
        let a = label(1, "a", 1, [0, 0, 1, 1]).with_mask(mk(0, 0, 10, 10)).unwrap();
        let b = label(2, "b", 1, [0, 0, 1, 1]).with_mask(mk(2, 0, 12, 10)).unwrap();
        let mut im = image(vec![a, b], &[]);
        im.width = 40;
        im.height = 40;
        let out = localize_image(&im, &half(), FusionPolicy::Union).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].fused_mask.as_ref().unwrap().area(), 120);
        assert_eq!(out.groups[0].fused_box, BBox::from_ints(0, 0, 12, 10).unwrap());
    }
}
