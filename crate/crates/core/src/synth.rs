//! Seeded synthetic fixtures: multi-annotator images with integer boxes and
//! vote tables drawn from known confusion matrices.

use alloc::format;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use rand::Rng;

use crate::bbox::BBox;
use crate::error::Result;
use crate::inference::VoteTable;
use crate::model::{AnnotatorId, CategoryId, ImageId, ImageRecord, InstanceLabel};

#[derive(Debug, Clone)]
pub struct ImageRecipe {
    pub canvas: u32,
    pub annotators: RangeInclusive<usize>,
    /// True objects per image.
    pub objects: RangeInclusive<usize>,
    /// Cap on labels per annotator.
    pub max_labels: usize,
    pub classes: CategoryId,
    /// Largest corner displacement between annotators, in pixels.
    pub jitter: i64,
    /// Probability an annotator labels a given object.
    pub recall: f64,
    /// Probability an annotator's class matches the object's.
    pub class_agreement: f64,
    /// Probability of an extra label at a random place.
    pub spurious: f64,
}

impl Default for ImageRecipe {
    fn default() -> Self {
        Self {
            canvas: 64,
            annotators: 1..=5,
            objects: 0..=4,
            max_labels: 6,
            classes: 3,
            jitter: 3,
            recall: 0.8,
            class_agreement: 0.85,
            spurious: 0.2,
        }
    }
}

pub fn annotator_name(i: usize) -> AnnotatorId {
    AnnotatorId(format!("ann{i:02}"))
}

fn random_box(rng: &mut impl Rng, canvas: i64) -> [i64; 4] {
    let w = rng.gen_range(2..=canvas / 3);
    let h = rng.gen_range(2..=canvas / 3);
    let x = rng.gen_range(0..=canvas - w);
    let y = rng.gen_range(0..=canvas - h);
    [x, y, x + w, y + h]
}

fn jittered(rng: &mut impl Rng, b: [i64; 4], jitter: i64, canvas: i64) -> [i64; 4] {
    let mut d = || rng.gen_range(-jitter..=jitter);
    let x0 = (b[0] + d()).clamp(0, canvas - 1);
    let y0 = (b[1] + d()).clamp(0, canvas - 1);
    let x1 = (b[2] + d()).clamp(x0 + 1, canvas);
    let y1 = (b[3] + d()).clamp(y0 + 1, canvas);
    [x0, y0, x1, y1]
}

/// Draws one image; label ids start at `first_label` and the next free id
/// is returned alongside.
pub fn random_image(rng: &mut impl Rng, id: ImageId, first_label: u64, recipe: &ImageRecipe) -> Result<(ImageRecord, u64)> {
    let canvas = i64::from(recipe.canvas);
    let mut image = ImageRecord::new(id, recipe.canvas, recipe.canvas);
    let annotators = rng.gen_range(recipe.annotators.clone());
    let objects: Vec<([i64; 4], CategoryId)> = (0..rng.gen_range(recipe.objects.clone()))
        .map(|_| (random_box(rng, canvas), rng.gen_range(0..recipe.classes)))
        .collect();
    let mut next = first_label;
    for a in 0..annotators {
        let who = annotator_name(a);
        image.add_annotator(who.clone());
        let mut count = 0;
        for (b, class) in &objects {
            if count >= recipe.max_labels || !rng.gen_bool(recipe.recall) {
                continue;
            }
            let class = if rng.gen_bool(recipe.class_agreement) { *class } else { rng.gen_range(0..recipe.classes) };
            let r = jittered(rng, *b, recipe.jitter, canvas);
            image.push_label(InstanceLabel::new(next, who.clone(), class, BBox::from_ints(r[0], r[1], r[2], r[3])?));
            next += 1;
            count += 1;
        }
        while count < recipe.max_labels && rng.gen_bool(recipe.spurious) {
            let r = random_box(rng, canvas);
            let class = rng.gen_range(0..recipe.classes);
            image.push_label(InstanceLabel::new(next, who.clone(), class, BBox::from_ints(r[0], r[1], r[2], r[3])?));
            next += 1;
            count += 1;
        }
    }
    Ok((image, next))
}

/// Samples `rows` items with true classes from `prior`; every annotator
/// votes on every item according to its confusion matrix. Returns the
/// table and the true class index per row.
pub fn sample_vote_table(
    rng: &mut impl Rng,
    rows: usize,
    prior: &[f64],
    confusions: &[Vec<Vec<f64>>],
) -> Result<(VoteTable, Vec<usize>)> {
    let draw = |rng: &mut dyn rand::RngCore, probs: &[f64]| -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let classes = prior.len() as CategoryId;
    let mut table = VoteTable::new(0..classes);
    let mut truth = Vec::with_capacity(rows);
    for key in 0..rows as u64 {
        let t = draw(rng, prior);
        let votes = confusions
            .iter()
            .enumerate()
            .map(|(j, m)| (annotator_name(j), draw(rng, &m[t]) as CategoryId))
            .collect();
        table.push_row(key, votes)?;
        truth.push(t);
    }
    Ok((table, truth))
}

/// Confusion matrix with `diagonal` on the diagonal and the rest spread
/// uniformly.
pub fn symmetric_confusion(classes: usize, diagonal: f64) -> Vec<Vec<f64>> {
    let off = if classes > 1 { (1.0 - diagonal) / (classes - 1) as f64 } else { 0.0 };
    (0..classes)
        .map(|t| (0..classes).map(|o| if o == t { diagonal } else { off }).collect())
        .collect()
}
