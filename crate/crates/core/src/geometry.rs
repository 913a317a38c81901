//! Region arithmetic: generalized IoU, area fusion and mask morphology.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::mask::{Bitmap, Mask};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Box(BBox),
    Mask(Mask),
}

impl Region {
    pub fn area(&self) -> Rational {
        match self {
            Region::Box(b) => b.area(),
            Region::Mask(m) => Rational::from_integer(BigInt::from(m.area())),
        }
    }
}

/// How the regions of a matched tuple are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionPolicy {
    Union,
    Average,
    Intersection,
}

impl fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionPolicy::Union => "union",
            FusionPolicy::Average => "average",
            FusionPolicy::Intersection => "intersection",
        })
    }
}

impl FromStr for FusionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(FusionPolicy::Union),
            "average" | "avg" | "mean" => Ok(FusionPolicy::Average),
            "intersection" => Ok(FusionPolicy::Intersection),
            other => Err(Error::Config(format!("unknown fusion policy `{other}`"))),
        }
    }
}

/// Area of the common intersection over area of the union of all regions.
/// A single region scores 1; an empty common intersection scores 0.
pub fn generalized_iou(regions: &[Region]) -> Result<Rational> {
    match regions.first() {
        None => Err(Error::Domain("generalized IoU of an empty tuple".to_string())),
        Some(Region::Box(_)) => {
            let boxes = regions
                .iter()
                .map(|r| match r {
                    Region::Box(b) => Ok(b),
                    Region::Mask(_) => Err(Error::MixedRegions),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(boxes_iou(&boxes))
        }
        Some(Region::Mask(_)) => {
            let masks = regions
                .iter()
                .map(|r| match r {
                    Region::Mask(m) => Ok(m),
                    Region::Box(_) => Err(Error::MixedRegions),
                })
                .collect::<Result<Vec<_>>>()?;
            masks_iou(&masks)
        }
    }
}

/// Generalized IoU of a nonempty box tuple.
pub fn boxes_iou(boxes: &[&BBox]) -> Rational {
    if boxes.len() == 1 {
        return Rational::one();
    }
    match common_intersection(boxes) {
        None => Rational::zero(),
        Some(inter) => inter.area() / union_area(boxes),
    }
}

pub fn common_intersection(boxes: &[&BBox]) -> Option<BBox> {
    let (first, rest) = boxes.split_first()?;
    rest.iter().try_fold((*first).clone(), |acc, b| acc.intersection(b))
}

/// Exact area of the union of boxes, by sweeping vertical slabs between
/// consecutive distinct x edges.
pub fn union_area(boxes: &[&BBox]) -> Rational {
    let mut xs: Vec<&Rational> = boxes.iter().flat_map(|b| [b.x_min(), b.x_max()]).collect();
    xs.sort();
    xs.dedup();
    let mut total = Rational::zero();
    let mut spans: Vec<(&Rational, &Rational)> = Vec::with_capacity(boxes.len());
    for slab in xs.windows(2) {
        let (left, right) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            boxes
                .iter()
                .filter(|b| b.x_min() <= left && b.x_max() >= right)
                .map(|b| (b.y_min(), b.y_max())),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort();
        let mut covered = Rational::zero();
        let (mut lo, mut hi) = spans[0];
        for &(a, b) in &spans[1..] {
            if a > hi {
                covered += hi - lo;
                lo = a;
                hi = b;
            } else if b > hi {
                hi = b;
            }
        }
        covered += hi - lo;
        total += (right - left) * covered;
    }
    total
}

fn masks_iou(masks: &[&Mask]) -> Result<Rational> {
    let first = masks[0];
    if masks.iter().any(|m| !m.same_canvas(first)) {
        return Err(Error::Domain("masks drawn on different canvases".to_string()));
    }
    let bitmaps: Vec<Bitmap> = masks.iter().map(|m| m.to_bitmap()).collect();
    let inter = bitmaps[1..].iter().fold(bitmaps[0].clone(), |acc, b| acc.and(b)).count();
    let union = bitmaps[1..].iter().fold(bitmaps[0].clone(), |acc, b| acc.or(b)).count();
    if union == 0 {
        return Err(Error::DegenerateRegion("empty masks".to_string()));
    }
    Ok(Rational::new(BigInt::from(inter), BigInt::from(union)))
}

fn check_weights(n: usize, weights: Option<&[Rational]>) -> Result<Vec<Rational>> {
    match weights {
        None => Ok(alloc::vec![Rational::one(); n]),
        Some(w) if w.len() != n => {
            Err(Error::Config(format!("{} weights given for {n} regions", w.len())))
        }
        Some(w) if w.iter().any(|x| *x <= Rational::zero()) => {
            Err(Error::Config("fusion weights must be positive".to_string()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

/// Fuses boxes. `Union` returns the minimal enclosing box, `Intersection`
/// the common rectangle, `Average` the weighted mean of each edge.
pub fn fuse_boxes(boxes: &[&BBox], policy: FusionPolicy, weights: Option<&[Rational]>) -> Result<BBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| Error::Domain("fusion of an empty tuple".to_string()))?;
    match policy {
        FusionPolicy::Union => Ok(rest.iter().fold((*first).clone(), |acc, b| acc.enclosing(b))),
        FusionPolicy::Intersection => common_intersection(boxes)
            .ok_or_else(|| Error::DegenerateRegion("boxes share no common area".to_string())),
        FusionPolicy::Average => {
            let weights = check_weights(boxes.len(), weights)?;
            weighted_mean_box(boxes.iter().copied().zip(weights.iter()))
        }
    }
}

/// Σ wᵢ·edgeᵢ / Σ wᵢ for each of the four edges.
pub fn weighted_mean_box<'a>(items: impl IntoIterator<Item = (&'a BBox, &'a Rational)>) -> Result<BBox> {
    let mut sums = [Rational::zero(), Rational::zero(), Rational::zero(), Rational::zero()];
    let mut total = Rational::zero();
    for (b, w) in items {
        for (sum, edge) in sums.iter_mut().zip(b.edges()) {
            *sum += edge * w;
        }
        total += w;
    }
    if total.is_zero() {
        return Err(Error::Domain("weights sum to zero".to_string()));
    }
    let [x0, y0, x1, y1] = sums;
    BBox::new(x0 / &total, y0 / &total, x1 / &total, y1 / &total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Morphology {
    Dilate,
    Erode,
}

/// Result of one structuring-element application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MorphologyStep {
    pub mask: Mask,
    /// The step could not move the area in the requested direction: erosion
    /// would empty the mask (the input is returned) or dilation already
    /// covers the canvas.
    pub saturated: bool,
}

/// One dilation or erosion with the 3×3 cross, clipped to the canvas.
pub fn morphology_step(mask: &Mask, direction: Morphology) -> MorphologyStep {
    let bitmap = mask.to_bitmap();
    let next = match direction {
        Morphology::Dilate => bitmap.dilate_cross(),
        Morphology::Erode => bitmap.erode_cross(),
    };
    let count = next.count();
    if count == 0 || next == bitmap {
        MorphologyStep { mask: mask.clone(), saturated: true }
    } else {
        MorphologyStep { mask: Mask::from_bitmap(&next), saturated: false }
    }
}

/// Trace of the averaging mask fusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AveragedMask {
    pub mask: Mask,
    /// Index of the input mask that was reshaped.
    pub selected: usize,
    /// Weighted mean area the result was steered towards.
    pub target_area: Rational,
    pub target_centroid: (Rational, Rational),
    /// Morphology steps applied (0 when the selected mask was kept as is).
    pub steps: usize,
    pub direction: Option<Morphology>,
}

/// Fuses masks on a common canvas. `Union` and `Intersection` are bitwise
/// OR/AND; `Average` is [`average_masks`].
pub fn fuse_masks(masks: &[&Mask], policy: FusionPolicy, weights: Option<&[Rational]>) -> Result<Mask> {
    let first = *masks
        .first()
        .ok_or_else(|| Error::Domain("fusion of an empty tuple".to_string()))?;
    if masks.iter().any(|m| !m.same_canvas(first)) {
        return Err(Error::Domain("masks drawn on different canvases".to_string()));
    }
    match policy {
        FusionPolicy::Union => {
            let union = masks[1..].iter().fold(first.to_bitmap(), |acc, m| acc.or(&m.to_bitmap()));
            Ok(Mask::from_bitmap(&union))
        }
        FusionPolicy::Intersection => {
            let inter = masks[1..].iter().fold(first.to_bitmap(), |acc, m| acc.and(&m.to_bitmap()));
            if inter.count() == 0 {
                return Err(Error::DegenerateRegion("masks share no common pixel".to_string()));
            }
            Ok(Mask::from_bitmap(&inter))
        }
        FusionPolicy::Average => average_masks(masks, weights).map(|a| a.mask),
    }
}

/// Weighted mask averaging:
/// 1. weighted mean of the mask areas and of the mask centroids;
/// 2. these are the target area and target centroid;
/// 3. the input mask whose centroid is nearest the target is selected
///    (ties go to the earlier input);
/// 4. the selection is dilated or eroded with the 3×3 cross, keeping the step
///    count that minimizes |area − target|, ties towards fewer steps.
pub fn average_masks(masks: &[&Mask], weights: Option<&[Rational]>) -> Result<AveragedMask> {
    if masks.is_empty() {
        return Err(Error::Domain("fusion of an empty tuple".to_string()));
    }
    let weights = check_weights(masks.len(), weights)?;
    let total: Rational = weights.iter().sum();
    let mut area_sum = Rational::zero();
    let mut cx = Rational::zero();
    let mut cy = Rational::zero();
    let mut centroids = Vec::with_capacity(masks.len());
    for (m, w) in masks.iter().zip(&weights) {
        let c = m
            .centroid()
            .ok_or_else(|| Error::DegenerateRegion("empty mask in fusion".to_string()))?;
        area_sum += Rational::from_integer(BigInt::from(m.area())) * w;
        cx += &c.0 * w;
        cy += &c.1 * w;
        centroids.push(c);
    }
    let target_area = area_sum / &total;
    let target_centroid = (cx / &total, cy / &total);

    let mut selected = 0;
    let mut best_dist: Option<Rational> = None;
    for (i, (x, y)) in centroids.iter().enumerate() {
        let dx = x - &target_centroid.0;
        let dy = y - &target_centroid.1;
        let d = &dx * &dx + &dy * &dy;
        if best_dist.as_ref().is_none_or(|b| d < *b) {
            best_dist = Some(d);
            selected = i;
        }
    }

    let start = masks[selected].to_bitmap();
    let gap = |area: u64| {
        let diff = Rational::from_integer(BigInt::from(area)) - &target_area;
        if diff < Rational::zero() {
            -diff
        } else {
            diff
        }
    };
    let start_area = start.count();
    let start_gap = gap(start_area);
    let direction = match Rational::from_integer(BigInt::from(start_area)).cmp(&target_area) {
        core::cmp::Ordering::Equal => None,
        core::cmp::Ordering::Less => Some(Morphology::Dilate),
        core::cmp::Ordering::Greater => Some(Morphology::Erode),
    };
    let mut best = (start.clone(), start_gap.clone(), 0usize);
    if let Some(dir) = direction {
        let mut current = start;
        let mut current_gap = start_gap;
        let mut steps = 0usize;
        loop {
            let next = match dir {
                Morphology::Dilate => current.dilate_cross(),
                Morphology::Erode => current.erode_cross(),
            };
            let area = next.count();
            if area == 0 || next == current {
                break;
            }
            steps += 1;
            let next_gap = gap(area);
            if next_gap < best.1 {
                best = (next.clone(), next_gap.clone(), steps);
            }
            // area is monotone in `dir`, so the gap only grows past the target
            if next_gap >= current_gap {
                break;
            }
            current = next;
            current_gap = next_gap;
        }
    }
    let (bitmap, _, steps) = best;
    Ok(AveragedMask {
        mask: Mask::from_bitmap(&bitmap),
        selected,
        target_area,
        target_centroid,
        steps,
        direction: if steps == 0 { None } else { direction },
    })
}
