//! End-to-end aggregation: localization or clustering, class inference,
//! fused output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use gtfuse_core::geometry::{generalized_iou, Region};
use gtfuse_core::inference::{infer_classes, EmConfig, InferenceMethod, InferenceResult, VoteTable};
use gtfuse_core::localize::{localize_image, LocalizationConfig, LocalizationOutcome};
use gtfuse_core::model::{LabelId, LabelSource, Provenance};
use gtfuse_core::rational::{from_f64, ratio, round_to, to_f64};
use gtfuse_core::wbf::{wbf_em_image, wbf_image, FusedCluster, WbfConfig};
use gtfuse_core::{
    seed, AnnotatorId, BBox, CategoryId, Dataset, FusionPolicy, ImageId, ImageRecord, InstanceLabel, Mask, Rational,
};
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Method {
    /// Localization matching, then Dawid-Skene EM over the matched groups.
    Laem,
    /// Localization matching, then plurality vote with seeded tie-breaks.
    Mjv,
    /// Weighted boxes fusion.
    Wbf,
    /// Weighted boxes fusion weighted by EM annotator confidences.
    WbfEm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Laem => "laem",
            Method::Mjv => "mjv",
            Method::Wbf => "wbf",
            Method::WbfEm => "wbf-em",
        })
    }
}

impl FromStr for Method {
    type Err = gtfuse_core::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "laem" => Ok(Method::Laem),
            "mjv" => Ok(Method::Mjv),
            "wbf" => Ok(Method::Wbf),
            "wbf-em" | "wbf+em" => Ok(Method::WbfEm),
            other => Err(gtfuse_core::Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub method: Method,
    /// Region fusion for laem/mjv; `None` means average.
    pub fusion: Option<FusionPolicy>,
    pub theta: Rational,
    pub wbf_threshold: Rational,
    pub seed: u64,
    pub em: EmConfig,
    pub max_annotators: usize,
    /// Scale WBF cluster scores by members / annotators.
    pub count_scaling: bool,
}

impl PipelineSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            fusion: None,
            theta: ratio(1, 2),
            wbf_threshold: WbfConfig::default().iou_threshold,
            seed: 0,
            em: EmConfig::default(),
            max_annotators: LocalizationConfig::default().max_annotators_exact,
            count_scaling: true,
        }
    }

    pub fn fusion_policy(&self) -> FusionPolicy {
        self.fusion.unwrap_or(FusionPolicy::Average)
    }

    fn uses_localization(&self) -> bool {
        self.method != Method::Wbf
    }

    /// Short label such as `laem+average` or `wbf`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Laem | Method::Mjv => format!("{}+{}", self.method, self.fusion_policy()),
            _ => self.method.to_string(),
        }
    }

    pub fn localization(&self) -> LocalizationConfig {
        LocalizationConfig { theta: self.theta.clone(), max_annotators_exact: self.max_annotators }
    }

    pub fn wbf_config(&self) -> WbfConfig {
        WbfConfig { iou_threshold: self.wbf_threshold.clone(), scale_by_count: self.count_scaling, ..WbfConfig::default() }
    }

    /// Rejects inconsistent flag combinations.
    pub fn validate(&self) -> Result<()> {
        let config = |m: String| -> Result<()> { Err(gtfuse_core::Error::Config(m).into()) };
        if self.fusion.is_some() && matches!(self.method, Method::Wbf | Method::WbfEm) {
            return config(format!("--fusion applies to laem and mjv only, not {}", self.method));
        }
        self.localization().check()?;
        if self.wbf_threshold <= Rational::zero() || self.wbf_threshold > Rational::one() {
            return config("wbf threshold must lie in (0, 1]".into());
        }
        if self.em.max_iter == 0 {
            return config("EM needs at least one iteration".into());
        }
        if !(self.em.tol.is_finite() && self.em.tol >= 0.0) || !(self.em.smoothing.is_finite() && self.em.smoothing >= 0.0) {
            return config("EM tolerance and smoothing must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Validates the spec and checks it can run on the dataset.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        if self.uses_localization() {
            if let Some(im) = dataset.images.iter().find(|i| i.annotator_count() > self.max_annotators) {
                return Err(gtfuse_core::Error::Infeasible(format!(
                    "image {} has {} annotators; exact matching supports at most {}",
                    im.id,
                    im.annotator_count(),
                    self.max_annotators
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// Row key of a group in the vote table, derived from the image id so that
/// tie-breaks do not depend on image order.
pub fn row_key(image: ImageId, group: usize) -> u64 {
    seed::derive(image, &[group as u64])
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImageSummary {
    pub image_id: ImageId,
    pub input_labels: usize,
    pub output_labels: usize,
    pub discarded: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AnnotatorFit {
    pub confidence: f64,
    pub confusion: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EmReport {
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: Vec<f64>,
    pub objective: Vec<f64>,
    pub categories: Vec<CategoryId>,
    pub priors: Vec<f64>,
    pub annotators: BTreeMap<String, AnnotatorFit>,
}

impl EmReport {
    fn new(fit: &InferenceResult) -> Self {
        Self {
            iterations: fit.iterations,
            converged: fit.converged,
            log_likelihood: fit.log_likelihood.clone(),
            objective: fit.objective.clone(),
            categories: fit.categories.clone(),
            priors: fit.priors.clone(),
            annotators: fit
                .confusion
                .iter()
                .map(|(a, c)| (a.0.clone(), AnnotatorFit { confidence: c.confidence(), confusion: c.matrix.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub method: String,
    pub theta: f64,
    pub wbf_threshold: f64,
    pub seed: u64,
    pub images: usize,
    pub input_labels: usize,
    pub output_labels: usize,
    pub groups: usize,
    pub discarded: usize,
    pub degenerate_masks: usize,
    pub ties: usize,
    /// Output label ids whose class needed a tie-break.
    pub tied_label_ids: Vec<LabelId>,
    pub em: Option<EmReport>,
    pub per_image: Vec<ImageSummary>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dataset: Dataset,
    pub report: RunReport,
}

/// A fused label before ids are assigned.
struct Draft {
    category: CategoryId,
    bbox: BBox,
    mask: Option<Mask>,
    score: Rational,
    tie: bool,
    provenance: Provenance,
}

struct ImageDrafts {
    drafts: Vec<Draft>,
    discarded: usize,
}

pub fn run_pipeline(dataset: &Dataset, spec: &PipelineSpec) -> Result<PipelineOutput> {
    spec.check(dataset)?;
    let start = Instant::now();
    let mut images: Vec<&ImageRecord> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);

    let mut degenerate_masks = 0;
    let mut em = None;
    let per_image: Vec<ImageDrafts> = match spec.method {
        Method::Laem | Method::Mjv => {
            let outcomes = localize_all(&images, spec)?;
            degenerate_masks = outcomes.iter().map(|o| o.degenerate_masks).sum();
            let method = if spec.method == Method::Laem {
                InferenceMethod::ExpectationMaximization
            } else {
                InferenceMethod::MajorityVote
            };
            let table = vote_table(dataset, &images, &outcomes)?;
            let mut classes = Vec::new();
            if !table.is_empty() {
                let inferred = infer_classes(&table, method, &spec.em, spec.seed)?;
                em = inferred.em.as_ref().map(EmReport::new);
                classes = inferred.classes;
            }
            let mut next = classes.into_iter();
            outcomes
                .into_iter()
                .map(|o| ImageDrafts {
                    discarded: o.discarded.len(),
                    drafts: o
                        .groups
                        .into_iter()
                        .map(|g| {
                            let class = next.next().expect("one class per group");
                            let provenance = Provenance {
                                source_ids: g.member_ids(),
                                annotator_ids: g.annotator_ids(),
                                iou: g.iou.clone(),
                                method: spec.label(),
                            };
                            Draft {
                                category: class.category,
                                bbox: g.fused_box,
                                mask: g.fused_mask,
                                score: from_f64(class.score).map(|s| round_to(&s, 6)).unwrap_or_else(Rational::zero),
                                tie: class.tie,
                                provenance,
                            }
                        })
                        .collect(),
                })
                .collect()
        }
        Method::Wbf => {
            let config = spec.wbf_config();
            let clusters: Vec<Vec<FusedCluster>> =
                images.par_iter().map(|im| wbf_image(im, &config)).collect::<Result<_, _>>()?;
            clusters.into_iter().map(|c| cluster_drafts(c, spec)).collect::<Result<_>>()?
        }
        Method::WbfEm => {
            let outcomes = localize_all(&images, &PipelineSpec { fusion: Some(FusionPolicy::Average), ..spec.clone() })?;
            let table = vote_table(dataset, &images, &outcomes)?;
            let fit = if table.is_empty() {
                None
            } else {
                infer_classes(&table, InferenceMethod::ExpectationMaximization, &spec.em, spec.seed)?.em
            };
            // annotators without votes get the confidence of an uninformative one
            let uninformed = 1.0 / dataset.categories.len().max(1) as f64;
            let mut confidences: BTreeMap<AnnotatorId, f64> =
                dataset.annotators.iter().map(|a| (a.clone(), uninformed)).collect();
            if let Some(fit) = &fit {
                confidences.extend(fit.confidences());
                em = Some(EmReport::new(fit));
            }
            let config = spec.wbf_config();
            let clusters: Vec<Vec<FusedCluster>> = images
                .par_iter()
                .map(|im| wbf_em_image(im, &confidences, &config))
                .collect::<Result<_, _>>()?;
            clusters.into_iter().map(|c| cluster_drafts(c, spec)).collect::<Result<_>>()?
        }
    };

    let mut next_id: LabelId = 1;
    let mut out_images = Vec::with_capacity(images.len());
    let mut summaries = Vec::with_capacity(images.len());
    let mut tied_label_ids = Vec::new();
    let mut groups = 0;
    let mut discarded = 0;
    for (image, drafts) in images.iter().zip(per_image) {
        let mut out = ImageRecord::new(image.id, image.width, image.height);
        out.file_name = image.file_name.clone();
        let mut ties = 0;
        let count = drafts.drafts.len();
        for d in drafts.drafts {
            if d.tie {
                ties += 1;
                tied_label_ids.push(next_id);
            }
            let mut label = InstanceLabel {
                id: next_id,
                source: LabelSource::Fused(d.provenance),
                category_id: d.category,
                bbox: d.bbox,
                mask: None,
                score: Some(d.score),
            };
            if let Some(mask) = d.mask {
                label = label.with_mask(mask)?;
            }
            out.push_label(label);
            next_id += 1;
        }
        groups += count;
        discarded += drafts.discarded;
        summaries.push(ImageSummary {
            image_id: image.id,
            input_labels: image.label_count(),
            output_labels: count,
            discarded: drafts.discarded,
            ties,
        });
        out_images.push(out);
    }
    let output = Dataset { images: out_images, categories: dataset.categories.clone(), ..Default::default() };
    output.validate()?;

    let report = RunReport {
        method: spec.label(),
        theta: to_f64(&spec.theta),
        wbf_threshold: to_f64(&spec.wbf_threshold),
        seed: spec.seed,
        images: images.len(),
        input_labels: dataset.label_count(),
        output_labels: output.label_count(),
        groups,
        discarded,
        degenerate_masks,
        ties: tied_label_ids.len(),
        tied_label_ids,
        em,
        per_image: summaries,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(PipelineOutput { dataset: output, report })
}

fn localize_all(images: &[&ImageRecord], spec: &PipelineSpec) -> Result<Vec<LocalizationOutcome>> {
    let config = spec.localization();
    let fusion = spec.fusion_policy();
    Ok(images.par_iter().map(|im| localize_image(im, &config, fusion)).collect::<Result<_, _>>()?)
}

fn vote_table(dataset: &Dataset, images: &[&ImageRecord], outcomes: &[LocalizationOutcome]) -> Result<VoteTable> {
    let rows = images
        .iter()
        .zip(outcomes)
        .flat_map(|(im, o)| o.groups.iter().enumerate().map(move |(i, g)| (row_key(im.id, i), g)));
    Ok(VoteTable::from_groups(dataset.category_ids(), rows)?)
}

fn cluster_drafts(clusters: Vec<FusedCluster>, spec: &PipelineSpec) -> Result<ImageDrafts> {
    let drafts = clusters
        .into_iter()
        .map(|c| {
            let regions: Vec<Region> = if c.members.iter().all(|m| m.mask.is_some()) {
                c.members.iter().filter_map(|m| m.mask.clone()).map(Region::Mask).collect()
            } else {
                c.members.iter().map(|m| Region::Box(m.bbox.clone())).collect()
            };
            let provenance = Provenance {
                source_ids: c.members.iter().map(|m| m.id).collect(),
                annotator_ids: c.members.iter().filter_map(|m| m.annotator().cloned()).collect(),
                iou: generalized_iou(&regions)?,
                method: spec.label(),
            };
            Ok(Draft {
                category: c.category_id,
                bbox: c.fused_box,
                mask: c.fused_mask,
                score: c.score,
                tie: false,
                provenance,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImageDrafts { drafts, discarded: 0 })
}
