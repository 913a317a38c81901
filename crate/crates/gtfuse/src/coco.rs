//! COCO-style annotation files with per-annotation annotator ids.
//!
//! Layout: `images` (`id`, `width`, `height`, `file_name`, optional
//! `annotator_ids` roster), `annotations` (`id`, `image_id`, `category_id`,
//! `bbox` as `[x, y, w, h]`, optional `segmentation` as polygons or RLE,
//! optional `score`, and either `annotator_id` or, for aggregated labels,
//! `provenance`) and `categories` (`id`, `name`).
//!
//! Numbers are read exactly. Exports are canonical: images by id,
//! annotations by `(image_id, id)`, categories by id, decimals written with
//! six places and masks as uncompressed RLE.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use gtfuse_core::mask::Bitmap;
use gtfuse_core::model::{Provenance, LabelSource};
use gtfuse_core::rational::{parse_decimal, to_fixed};
use gtfuse_core::{AnnotatorId, BBox, Category, Dataset, ImageRecord, InstanceLabel, Mask, Rational};
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Any invalid label is an error.
    #[default]
    Strict,
    /// Out-of-canvas boxes are clipped, degenerate labels dropped and
    /// scores clamped, each with a warning.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub clipped: usize,
    pub dropped: usize,
    pub clamped: usize,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawFile {
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
    #[serde(default)]
    annotator_ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u32,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    #[serde(default)]
    bbox: Option<Vec<Number>>,
    #[serde(default)]
    segmentation: Option<Value>,
    #[serde(default)]
    score: Option<Number>,
    #[serde(default)]
    annotator_id: Option<String>,
    #[serde(default)]
    provenance: Option<RawProvenance>,
}

#[derive(Deserialize)]
struct RawProvenance {
    source_ids: Vec<u64>,
    annotator_ids: Vec<String>,
    iou: Number,
    method: String,
}

pub fn ingest(path: impl AsRef<Path>, strictness: Strictness) -> Result<(Dataset, IngestReport)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, strictness)
}

pub fn ingest_str(text: &str, strictness: Strictness) -> Result<(Dataset, IngestReport)> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
    Ingest { strictness, report: IngestReport::default() }.run(raw)
}

fn json_error(text: &str, err: &serde_json::Error) -> Error {
    let offset = byte_offset(text, err.line(), err.column());
    match err.classify() {
        serde_json::error::Category::Data => Error::Schema(format!("{err} (byte {offset})")),
        _ => Error::Parse { offset, message: err.to_string() },
    }
}

/// Converts serde_json's 1-based line and byte column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn number(n: &Number, what: impl FnOnce() -> String) -> Result<Rational> {
    parse_decimal(&n.to_string()).ok_or_else(|| Error::Schema(format!("{} is not a finite decimal: {n}", what())))
}

struct Ingest {
    strictness: Strictness,
    report: IngestReport,
}

impl Ingest {
    fn run(mut self, raw: RawFile) -> Result<(Dataset, IngestReport)> {
        let categories: Vec<Category> = raw.categories.into_iter().map(|c| Category { id: c.id, name: c.name }).collect();
        let category_ids: BTreeSet<u32> = categories.iter().map(|c| c.id).collect();

        let mut images: BTreeMap<u64, ImageRecord> = BTreeMap::new();
        let mut rosters: BTreeMap<u64, BTreeSet<AnnotatorId>> = BTreeMap::new();
        for im in raw.images {
            if images.contains_key(&im.id) {
                return Err(gtfuse_core::Error::Integrity(format!("duplicate image id {}", im.id)).into());
            }
            if im.width == 0 || im.height == 0 {
                return Err(gtfuse_core::Error::Integrity(format!("image {} has zero size", im.id)).into());
            }
            let mut record = ImageRecord::new(im.id, im.width, im.height);
            record.file_name = im.file_name;
            if let Some(ids) = im.annotator_ids {
                let roster: BTreeSet<AnnotatorId> = ids.into_iter().map(AnnotatorId::from).collect();
                for a in &roster {
                    record.add_annotator(a.clone());
                }
                rosters.insert(im.id, roster);
            }
            images.insert(im.id, record);
        }

        let mut label_ids = BTreeSet::new();
        for ann in raw.annotations {
            if !label_ids.insert(ann.id) {
                return Err(gtfuse_core::Error::Integrity(format!("duplicate label id {}", ann.id)).into());
            }
            let image = images.get_mut(&ann.image_id).ok_or_else(|| {
                gtfuse_core::Error::Integrity(format!("annotation {} refers to unknown image {}", ann.id, ann.image_id))
            })?;
            if !category_ids.contains(&ann.category_id) {
                return Err(gtfuse_core::Error::Integrity(format!(
                    "annotation {} refers to unknown category {}",
                    ann.id, ann.category_id
                ))
                .into());
            }
            let source = match (ann.annotator_id.clone(), ann.provenance.as_ref()) {
                (Some(_), Some(_)) => {
                    return Err(Error::Schema(format!("annotation {} has both annotator_id and provenance", ann.id)))
                }
                (Some(a), None) => {
                    let a = AnnotatorId::from(a);
                    if let Some(roster) = rosters.get(&ann.image_id) {
                        if !roster.contains(&a) {
                            return Err(gtfuse_core::Error::Integrity(format!(
                                "annotation {} is by {a}, who is not in the roster of image {}",
                                ann.id, ann.image_id
                            ))
                            .into());
                        }
                    }
                    LabelSource::Annotator(a)
                }
                (None, Some(p)) => LabelSource::Fused(Provenance {
                    source_ids: p.source_ids.clone(),
                    annotator_ids: p.annotator_ids.iter().map(|a| AnnotatorId::from(a.as_str())).collect(),
                    iou: number(&p.iou, || format!("provenance iou of annotation {}", ann.id))?,
                    method: p.method.clone(),
                }),
                (None, None) => return Err(Error::Schema(format!("annotation {} is missing annotator_id", ann.id))),
            };
            if let Some(label) = self.label(&ann, source, image.width, image.height)? {
                image.push_label(label);
            }
        }

        let mut dataset = Dataset { images: images.into_values().collect(), categories, ..Default::default() };
        dataset.canonicalize();
        dataset.validate()?;
        Ok((dataset, self.report))
    }

    /// Reports a recoverable defect: an error in strict mode, a warning otherwise.
    fn defect(&mut self, message: String) -> Result<()> {
        match self.strictness {
            Strictness::Strict => Err(gtfuse_core::Error::Integrity(message).into()),
            Strictness::Lenient => {
                self.report.warnings.push(message);
                Ok(())
            }
        }
    }

    fn label(&mut self, ann: &RawAnnotation, source: LabelSource, width: u32, height: u32) -> Result<Option<InstanceLabel>> {
        let id = ann.id;
        let score = match &ann.score {
            None => None,
            Some(n) => {
                let s = number(n, || format!("score of annotation {id}"))?;
                if s < Rational::zero() || s > Rational::one() {
                    self.defect(format!("annotation {id} score {n} outside [0, 1]"))?;
                    self.report.clamped += 1;
                    Some(s.clamp(Rational::zero(), Rational::one()))
                } else {
                    Some(s)
                }
            }
        };

        let mask = match ann.segmentation.as_ref() {
            None | Some(Value::Null) => None,
            Some(Value::Array(polys)) if polys.is_empty() => None,
            Some(seg) => Some(decode_segmentation(seg, id, width, height)?),
        };

        let (bbox, mask) = if let Some(mask) = mask {
            match mask.bbox() {
                Some(b) => (b, Some(mask)),
                None => {
                    self.defect(format!("annotation {id} has an empty mask"))?;
                    self.report.dropped += 1;
                    return Ok(None);
                }
            }
        } else {
            let Some(coords) = &ann.bbox else {
                return Err(Error::Schema(format!("annotation {id} has neither bbox nor segmentation")));
            };
            if coords.len() != 4 {
                return Err(Error::Schema(format!("annotation {id} bbox must have 4 numbers, has {}", coords.len())));
            }
            let v = coords
                .iter()
                .map(|n| number(n, || format!("bbox of annotation {id}")))
                .collect::<Result<Vec<_>>>()?;
            let Ok(b) = BBox::from_xywh(v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone()) else {
                self.defect(format!("annotation {id} box has non-positive width or height"))?;
                self.report.dropped += 1;
                return Ok(None);
            };
            if b.within_canvas(width, height) {
                (b, None)
            } else {
                self.defect(format!("annotation {id} box lies outside its {width}x{height} image"))?;
                match b.clip(width, height) {
                    Some(c) => {
                        self.report.clipped += 1;
                        (c, None)
                    }
                    None => {
                        self.report.dropped += 1;
                        return Ok(None);
                    }
                }
            }
        };

        Ok(Some(InstanceLabel { id, source, category_id: ann.category_id, bbox, mask, score }))
    }
}

fn decode_segmentation(seg: &Value, id: u64, width: u32, height: u32) -> Result<Mask> {
    let bad = |what: &str| Error::Schema(format!("annotation {id} segmentation: {what}"));
    match seg {
        Value::Array(polys) => {
            let polygons = polys
                .iter()
                .map(|p| {
                    p.as_array()
                        .ok_or_else(|| bad("polygons must be arrays of coordinates"))?
                        .iter()
                        .map(|v| match v {
                            Value::Number(n) => number(n, || format!("polygon of annotation {id}")),
                            _ => Err(bad("polygon coordinates must be numbers")),
                        })
                        .collect::<Result<Vec<Rational>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mask::from_bitmap(&Bitmap::from_polygons(width, height, &polygons)?))
        }
        Value::Object(obj) => {
            let size: Vec<u64> = obj
                .get("size")
                .and_then(Value::as_array)
                .map(|s| s.iter().filter_map(Value::as_u64).collect())
                .unwrap_or_default();
            if size != [u64::from(height), u64::from(width)] {
                return Err(gtfuse_core::Error::Integrity(format!(
                    "annotation {id} RLE size {size:?} differs from image size [{height}, {width}]"
                ))
                .into());
            }
            let counts = match obj.get("counts") {
                Some(Value::Array(c)) => c
                    .iter()
                    .map(|v| v.as_u64().and_then(|n| u32::try_from(n).ok()).ok_or_else(|| bad("RLE counts must be non-negative integers")))
                    .collect::<Result<Vec<u32>>>()?,
                Some(Value::String(s)) => decode_rle_string(s).ok_or_else(|| bad("malformed compressed RLE counts"))?,
                _ => return Err(bad("RLE object needs `counts`")),
            };
            Ok(Mask::from_counts(width, height, &counts)?)
        }
        _ => Err(bad("expected a polygon list or an RLE object")),
    }
}

/// Decodes the compact RLE string form used by COCO tooling (6-bit
/// little-endian groups, runs after the second stored as deltas).
pub fn decode_rle_string(s: &str) -> Option<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(bytes.get(p)?.checked_sub(48)?);
            if c > 63 || k > 11 {
                return None;
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts.into_iter().map(|c| u32::try_from(c).ok()).collect()
}

/// Inverse of [`decode_rle_string`].
pub fn encode_rle_string(counts: &[u32]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = i64::from(c);
        if i > 2 {
            x -= i64::from(counts[i - 2]);
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

#[derive(Serialize)]
struct OutFile {
    images: Vec<OutImage>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory>,
}

#[derive(Serialize)]
struct OutImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    annotator_ids: Vec<String>,
}

#[derive(Serialize)]
struct OutCategory {
    id: u32,
    name: String,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [Number; 4],
    area: Number,
    iscrowd: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    segmentation: Option<OutRle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<Number>,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotator_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<OutProvenance>,
}

#[derive(Serialize)]
struct OutRle {
    size: [u32; 2],
    counts: Vec<u32>,
}

#[derive(Serialize)]
struct OutProvenance {
    source_ids: Vec<u64>,
    annotator_ids: Vec<String>,
    iou: Number,
    method: String,
}

/// Six-place decimal as a JSON number.
fn fixed(r: &Rational) -> Number {
    to_fixed(r, 6).parse().expect("fixed-point text is a JSON number")
}

fn out_annotation(image: &ImageRecord, label: &InstanceLabel) -> OutAnnotation {
    let b = &label.bbox;
    let area = match &label.mask {
        Some(m) => Rational::from_integer(m.area().into()),
        None => b.area(),
    };
    let provenance = label.provenance().map(|p| OutProvenance {
        source_ids: p.source_ids.clone(),
        annotator_ids: p.annotator_ids.iter().map(|a| a.0.clone()).collect(),
        iou: fixed(&p.iou),
        method: p.method.clone(),
    });
    OutAnnotation {
        id: label.id,
        image_id: image.id,
        category_id: label.category_id,
        bbox: [fixed(b.x_min()), fixed(b.y_min()), fixed(&b.width()), fixed(&b.height())],
        area: fixed(&area),
        iscrowd: 0,
        segmentation: label.mask.as_ref().map(|m| OutRle { size: [m.height(), m.width()], counts: m.counts().to_vec() }),
        score: label.score.as_ref().map(fixed),
        annotator_id: label.annotator().map(|a| a.0.clone()),
        provenance,
    }
}

/// Serializes a dataset in canonical order.
pub fn export_string(dataset: &Dataset) -> Result<String> {
    let mut images: Vec<&ImageRecord> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let mut annotations: Vec<OutAnnotation> = Vec::with_capacity(dataset.label_count());
    for image in &images {
        let mut labels: Vec<&InstanceLabel> = image.labels().collect();
        labels.sort_by_key(|l| l.id);
        annotations.extend(labels.into_iter().map(|l| out_annotation(image, l)));
    }
    let mut categories: Vec<OutCategory> =
        dataset.categories.iter().map(|c| OutCategory { id: c.id, name: c.name.clone() }).collect();
    categories.sort_by_key(|c| c.id);
    let file = OutFile {
        images: images
            .iter()
            .map(|i| OutImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
                annotator_ids: i.annotators().map(|a| a.0.clone()).collect(),
            })
            .collect(),
        annotations,
        categories,
    };
    let mut text = serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn export(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = export_string(dataset)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
