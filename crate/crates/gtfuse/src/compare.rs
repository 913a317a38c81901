//! Side-by-side structural comparison of aggregation runs.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use gtfuse_core::geometry::{generalized_iou, Region};
use gtfuse_core::inference::EmConfig;
use gtfuse_core::model::LabelId;
use gtfuse_core::rational::{parse_decimal, to_f64};
use gtfuse_core::{CategoryId, Dataset, ImageId, InstanceLabel};
use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineOutput, PipelineSpec};

/// One entry of a comparison spec file. Omitted fields take the
/// `gtfuse aggregate` defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(default)]
    name: Option<String>,
    method: String,
    #[serde(default)]
    fusion: Option<String>,
    #[serde(default)]
    theta: Option<Number>,
    #[serde(default)]
    wbf_threshold: Option<Number>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    em_max_iter: Option<usize>,
    #[serde(default)]
    em_tol: Option<f64>,
    #[serde(default)]
    em_smoothing: Option<f64>,
    #[serde(default)]
    count_scaling: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSpec {
    pub name: String,
    pub spec: PipelineSpec,
}

fn exact(n: &Number, field: &str) -> Result<gtfuse_core::Rational> {
    parse_decimal(&n.to_string()).ok_or_else(|| Error::Schema(format!("`{field}` is not a decimal: {n}")))
}

/// Parses a JSON array of pipeline specs.
pub fn parse_specs(text: &str) -> Result<Vec<NamedSpec>> {
    let raw: Vec<RawSpec> = serde_json::from_str(text).map_err(|e| Error::Schema(format!("spec file: {e}")))?;
    raw.into_iter()
        .map(|r| {
            let mut spec = PipelineSpec::new(r.method.parse()?);
            spec.fusion = r.fusion.as_deref().map(str::parse).transpose()?;
            if let Some(t) = &r.theta {
                spec.theta = exact(t, "theta")?;
            }
            if let Some(t) = &r.wbf_threshold {
                spec.wbf_threshold = exact(t, "wbf_threshold")?;
            }
            spec.seed = r.seed.unwrap_or(0);
            let d = EmConfig::default();
            spec.em = EmConfig {
                max_iter: r.em_max_iter.unwrap_or(d.max_iter),
                tol: r.em_tol.unwrap_or(d.tol),
                smoothing: r.em_smoothing.unwrap_or(d.smoothing),
            };
            spec.count_scaling = r.count_scaling.unwrap_or(true);
            let name = r.name.unwrap_or_else(|| spec.label());
            spec.validate()?;
            Ok(NamedSpec { name, spec })
        })
        .collect()
}

pub fn read_specs(path: impl AsRef<Path>) -> Result<Vec<NamedSpec>> {
    let path = path.as_ref();
    parse_specs(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MethodSummary {
    pub name: String,
    pub method: String,
    pub instances: usize,
    pub discarded: usize,
    pub ties: usize,
    pub class_histogram: BTreeMap<CategoryId, usize>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImageCounts {
    pub image_id: ImageId,
    /// Output instances per method, in spec order.
    pub instances: Vec<usize>,
    pub discarded: Vec<usize>,
}

/// Agreement between two runs on the groups both formed from exactly the
/// same source labels.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    /// `instances(b) - instances(a)`.
    pub instance_difference: i64,
    pub shared_groups: usize,
    pub mean_iou: Option<f64>,
    pub min_iou: Option<f64>,
    pub class_agreement: usize,
    /// Shared groups where the region of `a` is no larger than that of `b`.
    pub area_a_le_b: usize,
    pub area_a_ge_b: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Comparison {
    pub methods: Vec<MethodSummary>,
    pub per_image: Vec<ImageCounts>,
    pub pairs: Vec<PairComparison>,
}

fn region(label: &InstanceLabel, as_mask: bool) -> Region {
    match (&label.mask, as_mask) {
        (Some(m), true) => Region::Mask(m.clone()),
        _ => Region::Box(label.bbox.clone()),
    }
}

/// Fused labels keyed by (image, sorted source ids).
fn by_sources(out: &Dataset) -> BTreeMap<(ImageId, Vec<LabelId>), &InstanceLabel> {
    let mut map = BTreeMap::new();
    for image in &out.images {
        for label in &image.fused {
            if let Some(p) = label.provenance() {
                let mut ids = p.source_ids.clone();
                ids.sort_unstable();
                map.insert((image.id, ids), label);
            }
        }
    }
    map
}

fn pair(a: (&str, &PipelineOutput), b: (&str, &PipelineOutput)) -> Result<PairComparison> {
    let ga = by_sources(&a.1.dataset);
    let gb = by_sources(&b.1.dataset);
    let mut ious = Vec::new();
    let (mut class_agreement, mut le, mut ge) = (0, 0, 0);
    for (key, la) in &ga {
        let Some(lb) = gb.get(key) else { continue };
        let masks = la.mask.is_some() && lb.mask.is_some();
        let (ra, rb) = (region(la, masks), region(lb, masks));
        let (area_a, area_b) = (ra.area(), rb.area());
        ious.push(to_f64(&generalized_iou(&[ra, rb])?));
        class_agreement += usize::from(la.category_id == lb.category_id);
        le += usize::from(area_a <= area_b);
        ge += usize::from(area_a >= area_b);
    }
    let n = ious.len();
    Ok(PairComparison {
        a: a.0.to_string(),
        b: b.0.to_string(),
        instance_difference: b.1.report.output_labels as i64 - a.1.report.output_labels as i64,
        shared_groups: n,
        mean_iou: (n > 0).then(|| ious.iter().sum::<f64>() / n as f64),
        min_iou: ious.iter().copied().reduce(f64::min),
        class_agreement,
        area_a_le_b: le,
        area_a_ge_b: ge,
    })
}

/// Runs every spec on the dataset and compares the outputs.
pub fn compare_methods(dataset: &Dataset, specs: &[NamedSpec]) -> Result<Comparison> {
    if specs.len() < 2 {
        return Err(gtfuse_core::Error::Config(format!("comparison needs at least 2 specs, got {}", specs.len())).into());
    }
    for s in specs {
        s.spec.check(dataset)?;
    }
    let outputs = specs.iter().map(|s| run_pipeline(dataset, &s.spec)).collect::<Result<Vec<_>>>()?;

    let methods = specs
        .iter()
        .zip(&outputs)
        .map(|(s, o)| {
            let mut class_histogram = BTreeMap::new();
            for label in o.dataset.labels() {
                *class_histogram.entry(label.category_id).or_insert(0) += 1;
            }
            MethodSummary {
                name: s.name.clone(),
                method: s.spec.label(),
                instances: o.report.output_labels,
                discarded: o.report.discarded,
                ties: o.report.ties,
                class_histogram,
            }
        })
        .collect();

    let per_image = outputs[0]
        .report
        .per_image
        .iter()
        .enumerate()
        .map(|(i, first)| ImageCounts {
            image_id: first.image_id,
            instances: outputs.iter().map(|o| o.report.per_image[i].output_labels).collect(),
            discarded: outputs.iter().map(|o| o.report.per_image[i].discarded).collect(),
        })
        .collect();

    let mut pairs = Vec::new();
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            pairs.push(pair((&specs[i].name, &outputs[i]), (&specs[j].name, &outputs[j]))?);
        }
    }
    Ok(Comparison { methods, per_image, pairs })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text rendering of a comparison.
pub fn render_table(cmp: &Comparison) -> String {
    let mut out = String::new();
    let width = cmp.methods.iter().map(|m| m.name.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>6}  classes", "method", "instances", "discarded", "ties");
    for m in &cmp.methods {
        let hist: Vec<String> = m.class_histogram.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>6}  {}",
            m.name,
            m.instances,
            m.discarded,
            m.ties,
            hist.join(" ")
        );
    }
    if !cmp.pairs.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "pair  Δinstances  shared  mean IoU  min IoU  same class  area a≤b  area a≥b");
        for p in &cmp.pairs {
            let _ = writeln!(
                out,
                "{} vs {}  {:+}  {}  {}  {}  {}  {}  {}",
                p.a,
                p.b,
                p.instance_difference,
                p.shared_groups,
                opt(p.mean_iou),
                opt(p.min_iou),
                p.class_agreement,
                p.area_a_le_b,
                p.area_a_ge_b
            );
        }
    }
    out
}
