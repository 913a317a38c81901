//! Annotation-budget splits and leave-one-group-out subsets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_bigint::BigInt;
use num_traits::Zero;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AnnotatorId, Dataset, ImageId, ImageRecord};
use crate::rational::Rational;
use crate::seed;

/// `image_count` images, each labelled by `annotators_per_image` annotators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapePart {
    pub image_count: usize,
    pub annotators_per_image: usize,
}

/// A budget shape such as `966x2,966x1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitShape(pub Vec<ShapePart>);

impl SplitShape {
    /// Number of single annotations the shape consumes.
    pub fn absolute_budget(&self) -> u64 {
        self.0.iter().map(|p| (p.image_count * p.annotators_per_image) as u64).sum()
    }

    pub fn image_count(&self) -> usize {
        self.0.iter().map(|p| p.image_count).sum()
    }
}

impl fmt::Display for SplitShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}x{}", p.image_count, p.annotators_per_image)?;
        }
        Ok(())
    }
}

impl FromStr for SplitShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split([',', '+'])
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (n, k) = p
                    .split_once(['x', 'X', '×'])
                    .ok_or_else(|| Error::Config(format!("shape part `{p}` is not of the form NxK")))?;
                let parse = |v: &str| {
                    v.trim()
                        .replace(['_', '\''], "")
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("shape part `{p}` has a non-integer count")))
                };
                let part = ShapePart { image_count: parse(n)?, annotators_per_image: parse(k)? };
                if part.annotators_per_image == 0 {
                    return Err(Error::Config(format!("shape part `{p}` asks for zero annotators")));
                }
                Ok(part)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Err(Error::Config("empty split shape".to_string()));
        }
        Ok(SplitShape(parts))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub shape: SplitShape,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetReport {
    pub absolute: u64,
    /// Annotations available: Σ over images of their annotator count.
    pub available: u64,
    /// `absolute / available`.
    pub relative: Rational,
}

pub fn budget(shape: &SplitShape, dataset: &Dataset) -> BudgetReport {
    let available = dataset.images.iter().map(|i| i.annotator_count() as u64).sum::<u64>();
    let absolute = shape.absolute_budget();
    let relative = if available == 0 {
        Rational::zero()
    } else {
        Rational::new(BigInt::from(absolute), BigInt::from(available))
    };
    BudgetReport { absolute, available, relative }
}

/// Checks that enough images have enough annotators for every level of
/// the shape. Demands are nested (an image usable for k annotators is
/// usable for fewer), so checking each threshold suffices.
pub fn check_feasible(shape: &SplitShape, dataset: &Dataset) -> Result<()> {
    if shape.image_count() > dataset.images.len() {
        return Err(Error::Infeasible(format!(
            "shape {shape} needs {} images, dataset has {}",
            shape.image_count(),
            dataset.images.len()
        )));
    }
    let mut levels: Vec<usize> = shape.0.iter().map(|p| p.annotators_per_image).collect();
    levels.sort_unstable();
    levels.dedup();
    for k in levels {
        let demand: usize = shape.0.iter().filter(|p| p.annotators_per_image >= k).map(|p| p.image_count).sum();
        let supply = dataset.images.iter().filter(|i| i.annotator_count() >= k).count();
        if demand > supply {
            return Err(Error::Infeasible(format!(
                "shape {shape} needs {demand} images with at least {k} annotators, dataset has {supply}"
            )));
        }
    }
    Ok(())
}

fn restrict(image: &ImageRecord, keep: &[AnnotatorId]) -> ImageRecord {
    let mut out = image.clone();
    out.labels_by_annotator.retain(|a, _| keep.contains(a));
    out
}

/// One sampled replicate of a budget shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replicate {
    pub index: usize,
    pub dataset: Dataset,
    /// Image ids chosen for each shape part, in part order.
    pub images_per_part: Vec<Vec<ImageId>>,
}

/// Draws `spec.replicates` subsets of the dataset following the shape.
///
/// Images are drawn without replacement, most demanding part first; the
/// annotators kept on each image are drawn from a stream keyed on
/// (seed, replicate, image id).
pub fn generate_budget_splits(dataset: &Dataset, spec: &SplitSpec) -> Result<Vec<Replicate>> {
    check_feasible(&spec.shape, dataset)?;
    let mut images: Vec<&ImageRecord> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let mut order: Vec<usize> = (0..spec.shape.0.len()).collect();
    order.sort_by(|a, b| {
        spec.shape.0[*b].annotators_per_image.cmp(&spec.shape.0[*a].annotators_per_image).then(a.cmp(b))
    });

    (0..spec.replicates)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[r as u64]));
            let mut taken: BTreeSet<ImageId> = BTreeSet::new();
            let mut per_part: Vec<Vec<ImageId>> = alloc::vec![Vec::new(); spec.shape.0.len()];
            let mut selected: Vec<ImageRecord> = Vec::new();
            for &p in &order {
                let part = spec.shape.0[p];
                let eligible: Vec<&ImageRecord> = images
                    .iter()
                    .filter(|i| !taken.contains(&i.id) && i.annotator_count() >= part.annotators_per_image)
                    .copied()
                    .collect();
                let mut picks: Vec<usize> = sample(&mut rng, eligible.len(), part.image_count).into_vec();
                picks.sort_unstable();
                for idx in picks {
                    let image = eligible[idx];
                    taken.insert(image.id);
                    per_part[p].push(image.id);
                    let annotators: Vec<AnnotatorId> = image.annotators().cloned().collect();
                    let mut image_rng =
                        ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[r as u64, image.id]));
                    let mut keep: Vec<AnnotatorId> =
                        sample(&mut image_rng, annotators.len(), part.annotators_per_image)
                            .into_iter()
                            .map(|i| annotators[i].clone())
                            .collect();
                    keep.sort();
                    selected.push(restrict(image, &keep));
                }
            }
            let mut out = Dataset { images: selected, categories: dataset.categories.clone(), ..Default::default() };
            out.canonicalize();
            out.validate()?;
            Ok(Replicate { index: r, dataset: out, images_per_part: per_part })
        })
        .collect()
}

/// Named, disjoint annotator groups and the group to drop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub groups: BTreeMap<String, BTreeSet<AnnotatorId>>,
    pub leave_out: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOutReport {
    pub group: String,
    pub removed_images: usize,
    pub total_images: usize,
    pub removed_annotations: usize,
    pub total_annotations: usize,
    /// Image-annotator pairs removed, i.e. images the group had labelled.
    pub removed_passes: usize,
    pub total_passes: usize,
}

impl LeaveOutReport {
    pub fn removed_images_relative(&self) -> Rational {
        fraction(self.removed_images, self.total_images)
    }

    pub fn removed_annotations_relative(&self) -> Rational {
        fraction(self.removed_annotations, self.total_annotations)
    }

    pub fn removed_passes_relative(&self) -> Rational {
        fraction(self.removed_passes, self.total_passes)
    }
}

fn fraction(a: usize, b: usize) -> Rational {
    if b == 0 {
        Rational::zero()
    } else {
        Rational::new(BigInt::from(a), BigInt::from(b))
    }
}

/// Removes every annotation of the left-out group and the images that end
/// up without annotators.
pub fn leave_one_out(dataset: &Dataset, spec: &GroupSpec) -> Result<(Dataset, LeaveOutReport)> {
    let dropped = spec
        .groups
        .get(&spec.leave_out)
        .ok_or_else(|| Error::Config(format!("unknown group `{}`", spec.leave_out)))?;
    let mut seen: BTreeMap<&AnnotatorId, &String> = BTreeMap::new();
    for (name, members) in &spec.groups {
        for a in members {
            if !dataset.annotators.contains(a) {
                return Err(Error::Config(format!("group `{name}` lists unknown annotator {a}")));
            }
            if let Some(other) = seen.insert(a, name) {
                return Err(Error::Config(format!("annotator {a} is in both `{other}` and `{name}`")));
            }
        }
    }
    let total_annotations = dataset.label_count();
    let mut removed_annotations = 0;
    let mut removed_passes = 0;
    let mut images = Vec::with_capacity(dataset.images.len());
    for image in &dataset.images {
        let mut kept = image.clone();
        kept.labels_by_annotator.retain(|a, labels| {
            let drop = dropped.contains(a);
            if drop {
                removed_annotations += labels.len();
                removed_passes += 1;
            }
            !drop
        });
        if kept.annotator_count() > 0 || image.annotator_count() == 0 {
            images.push(kept);
        }
    }
    let removed_images = dataset.images.len() - images.len();
    let mut out = Dataset { images, categories: dataset.categories.clone(), ..Default::default() };
    out.canonicalize();
    let report = LeaveOutReport {
        group: spec.leave_out.clone(),
        removed_images,
        total_images: dataset.images.len(),
        removed_annotations,
        total_annotations,
        removed_passes,
        total_passes: dataset.images.iter().map(ImageRecord::annotator_count).sum(),
    };
    Ok((out, report))
}
