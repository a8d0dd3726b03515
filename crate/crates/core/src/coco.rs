//! COCO-format ingestion and output.
//!
//! Annotations use the standard `images` / `annotations` / `categories`
//! layout. Detections use the results layout (`image_id`, `category_id`,
//! `bbox`, `score`) with an optional `top_scores` array carrying the
//! detector's top-5 class distribution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::{Category, ClassVocabulary, Detection, GroundTruth};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    #[serde(default)]
    pub width: f64,
    #[serde(default)]
    pub height: f64,
}

/// Vocabulary, ground truth and (optionally) detections, keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocab: ClassVocabulary,
    pub images: BTreeMap<u64, ImageInfo>,
    pub ground_truth: BTreeMap<u64, Vec<GroundTruth>>,
    pub detections: BTreeMap<u64, Vec<Detection>>,
}

impl DatasetBundle {
    pub fn detection_count(&self) -> usize {
        self.detections.values().map(Vec::len).sum()
    }

    pub fn ground_truth_count(&self) -> usize {
        self.ground_truth.values().map(Vec::len).sum()
    }
}

#[derive(Deserialize)]
struct RawCategory {
    id: i64,
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: i64,
    bbox: Vec<f64>,
}

fn field<'a>(doc: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    doc.get(key)
        .ok_or_else(|| Error::parse("annotations", format!("missing key `{key}`")))?
        .as_array()
        .ok_or_else(|| Error::parse("annotations", format!("`{key}` is not an array")))
}

fn record<T: for<'de> Deserialize<'de>>(v: &Value, what: &str, idx: usize) -> Result<T> {
    T::deserialize(v).map_err(|e| Error::parse(format!("{what}[{idx}]"), e.to_string()))
}

fn bbox_of(raw: &[f64], what: &str, idx: usize) -> Result<BBox> {
    let [x, y, w, h] = raw else {
        return Err(Error::parse(
            format!("{what}[{idx}]"),
            format!("bbox needs 4 values, got {}", raw.len()),
        ));
    };
    BBox::new(*x, *y, *w, *h).map_err(|e| Error::parse(format!("{what}[{idx}]"), e.to_string()))
}

pub fn parse_annotations(text: &str) -> Result<DatasetBundle> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::parse("annotations", format!("malformed JSON: {e}")))?;

    let mut cats = Vec::new();
    for (i, v) in field(&doc, "categories")?.iter().enumerate() {
        let c: RawCategory = record(v, "categories", i)?;
        cats.push(Category { id: c.id, name: c.name });
    }
    let vocab = ClassVocabulary::new(cats)?;

    let mut images = BTreeMap::new();
    let mut ground_truth = BTreeMap::new();
    for (i, v) in field(&doc, "images")?.iter().enumerate() {
        let img: ImageInfo = record(v, "images", i)?;
        ground_truth.insert(img.id, Vec::new());
        images.insert(img.id, img);
    }

    for (i, v) in field(&doc, "annotations")?.iter().enumerate() {
        let a: RawAnnotation = record(v, "annotations", i)?;
        let bbox = bbox_of(&a.bbox, "annotations", i)?;
        let class_id = vocab.class_of(a.category_id).ok_or_else(|| {
            Error::parse(format!("annotations[{i}]"), format!("unknown category_id {}", a.category_id))
        })?;
        let gts = ground_truth.get_mut(&a.image_id).ok_or_else(|| {
            Error::parse(format!("annotations[{i}]"), format!("unknown image_id {}", a.image_id))
        })?;
        gts.push(GroundTruth {
            image_id: a.image_id,
            class_id,
            bbox,
        });
    }

    Ok(DatasetBundle {
        vocab,
        images,
        ground_truth,
        detections: BTreeMap::new(),
    })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    parse_annotations(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopScore {
    pub category_id: i64,
    pub score: f64,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: i64,
    pub bbox: Vec<f64>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_scores: Option<Vec<TopScore>>,
}

/// Parses a results file against the bundle's images and vocabulary, dropping
/// detections scored below `threshold`. Every annotated image gets an entry.
pub fn parse_detections(
    text: &str,
    bundle: &DatasetBundle,
    threshold: f64,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::parse("detections", format!("malformed JSON: {e}")))?;
    let items = doc
        .as_array()
        .ok_or_else(|| Error::parse("detections", "expected a JSON array of results"))?;

    let mut out: BTreeMap<u64, Vec<Detection>> =
        bundle.images.keys().map(|id| (*id, Vec::new())).collect();
    for (i, v) in items.iter().enumerate() {
        let r: ResultRecord = record(v, "detections", i)?;
        let ctx = || format!("detections[{i}]");
        let bbox = bbox_of(&r.bbox, "detections", i)?;
        let class_id = bundle
            .vocab
            .class_of(r.category_id)
            .ok_or_else(|| Error::parse(ctx(), format!("unknown category_id {}", r.category_id)))?;
        let Some(slot) = out.get_mut(&r.image_id) else {
            return Err(Error::parse(ctx(), format!("unknown image_id {}", r.image_id)));
        };
        let top5 = match r.top_scores {
            None => None,
            Some(top) => {
                if top.len() > 5 {
                    return Err(Error::parse(ctx(), format!("top_scores has {} entries (max 5)", top.len())));
                }
                let mut v = Vec::with_capacity(top.len());
                for t in top {
                    let c = bundle.vocab.class_of(t.category_id).ok_or_else(|| {
                        Error::parse(ctx(), format!("unknown category_id {} in top_scores", t.category_id))
                    })?;
                    v.push((c, t.score));
                }
                v.sort_by(|a, b| b.1.total_cmp(&a.1));
                Some(v)
            }
        };
        let det = Detection {
            image_id: r.image_id,
            class_id,
            bbox,
            confidence: r.score,
            top5,
        };
        det.validate(bundle.vocab.len())
            .map_err(|e| Error::parse(ctx(), e.to_string()))?;
        if det.confidence >= threshold {
            slot.push(det);
        }
    }
    Ok(out)
}

/// Loads detections into `bundle`, replacing any already present.
pub fn load_detections(path: impl AsRef<Path>, bundle: &mut DatasetBundle, threshold: f64) -> Result<usize> {
    let dets = parse_detections(&fs::read_to_string(path)?, bundle, threshold)?;
    bundle.detections = dets;
    Ok(bundle.detection_count())
}

pub fn to_result_records<'a, I>(dets: I, vocab: &ClassVocabulary) -> Vec<ResultRecord>
where
    I: IntoIterator<Item = &'a Detection>,
{
    let ext = |c: usize| vocab.external_id(c).unwrap_or(c as i64);
    dets.into_iter()
        .map(|d| ResultRecord {
            image_id: d.image_id,
            category_id: ext(d.class_id),
            bbox: d.bbox.to_array().to_vec(),
            score: d.confidence,
            top_scores: d.top5.as_ref().map(|t| {
                t.iter()
                    .map(|(c, s)| TopScore {
                        category_id: ext(*c),
                        score: *s,
                    })
                    .collect()
            }),
        })
        .collect()
}

pub fn results_json<'a, I>(dets: I, vocab: &ClassVocabulary) -> Result<String>
where
    I: IntoIterator<Item = &'a Detection>,
{
    Ok(serde_json::to_string_pretty(&to_result_records(dets, vocab))?)
}

#[derive(Serialize)]
struct AnnotationsOut<'a> {
    images: Vec<&'a ImageInfo>,
    annotations: Vec<AnnotationOut>,
    categories: &'a [Category],
}

#[derive(Serialize)]
struct AnnotationOut {
    id: usize,
    image_id: u64,
    category_id: i64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

pub fn annotations_json(bundle: &DatasetBundle) -> Result<String> {
    let annotations = bundle
        .ground_truth
        .values()
        .flatten()
        .enumerate()
        .map(|(i, g)| AnnotationOut {
            id: i + 1,
            image_id: g.image_id,
            category_id: bundle.vocab.external_id(g.class_id).unwrap_or(g.class_id as i64),
            bbox: g.bbox.to_array(),
            area: g.bbox.area(),
            iscrowd: 0,
        })
        .collect();
    let doc = AnnotationsOut {
        images: bundle.images.values().collect(),
        annotations,
        categories: bundle.vocab.categories(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}
