//! Context encoding: class vocabulary, detections, the co-occurrence matrix
//! and the per-detection relation feature vectors used as classifier input.
//!
//! A feature vector has one block per vocabulary class. Each block holds the
//! active relation bits from the reference detection toward every other
//! detection of that class in the same image, OR-ed together. The reference
//! confidence is appended last.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::match_detections;
use crate::geometry::{relation_bits, BBox, RelationConfig};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Identifier used in external files (COCO `category_id`).
    pub id: i64,
    pub name: String,
}

/// Ordered class list; a class id is the position in this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Category>", into = "Vec<Category>")]
pub struct ClassVocabulary {
    categories: Vec<Category>,
    by_external: HashMap<i64, usize>,
}

impl ClassVocabulary {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut by_external = HashMap::with_capacity(categories.len());
        let mut names = HashMap::with_capacity(categories.len());
        for (idx, c) in categories.iter().enumerate() {
            if by_external.insert(c.id, idx).is_some() {
                return Err(Error::parse("categories", format!("duplicate category id {}", c.id)));
            }
            if names.insert(c.name.as_str(), idx).is_some() {
                return Err(Error::parse("categories", format!("duplicate category name {:?}", c.name)));
            }
        }
        Ok(Self {
            categories,
            by_external,
        })
    }

    /// Vocabulary `0..n` named `class0`, `class1`, ...
    pub fn synthetic(n: usize) -> Self {
        let cats = (0..n)
            .map(|i| Category {
                id: i as i64 + 1,
                name: format!("class{i}"),
            })
            .collect();
        Self::new(cats).expect("generated names are unique")
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn name(&self, class_id: usize) -> Option<&str> {
        self.categories.get(class_id).map(|c| c.name.as_str())
    }

    pub fn external_id(&self, class_id: usize) -> Option<i64> {
        self.categories.get(class_id).map(|c| c.id)
    }

    pub fn class_of(&self, external_id: i64) -> Option<usize> {
        self.by_external.get(&external_id).copied()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn check(&self, class_id: usize) -> Result<()> {
        if class_id < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownClass(class_id))
        }
    }
}

impl TryFrom<Vec<Category>> for ClassVocabulary {
    type Error = Error;

    fn try_from(value: Vec<Category>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ClassVocabulary> for Vec<Category> {
    fn from(v: ClassVocabulary) -> Self {
        v.categories
    }
}

/// A scored, labeled box in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
    /// Detector class distribution, descending by score, at most five entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<Vec<(usize, f64)>>,
}

impl Detection {
    pub fn new(image_id: u64, class_id: usize, bbox: BBox, confidence: f64) -> Self {
        Self {
            image_id,
            class_id,
            bbox,
            confidence,
            top5: None,
        }
    }

    pub fn with_top5(mut self, top5: Vec<(usize, f64)>) -> Self {
        self.top5 = Some(top5);
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.class_id >= vocab_size {
            return Err(Error::UnknownClass(self.class_id));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::parse(
                format!("detection in image {}", self.image_id),
                format!("confidence {} outside [0, 1]", self.confidence),
            ));
        }
        if let Some(top) = &self.top5 {
            if top.len() > 5 {
                return Err(Error::parse(
                    format!("detection in image {}", self.image_id),
                    format!("top5 has {} entries", top.len()),
                ));
            }
            for &(c, s) in top {
                if c >= vocab_size {
                    return Err(Error::UnknownClass(c));
                }
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::parse(
                        format!("detection in image {}", self.image_id),
                        format!("top5 score {s} outside [0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Normalized co-occurrence statistics over a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl CoocMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of images containing both `i` and `j`.
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    /// `count(i, j) / count(i, i)`, or zero when class `i` never appears.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        let ci = self.count(i, i);
        if ci == 0 {
            0.0
        } else {
            self.count(i, j) as f64 / ci as f64
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.n).map(move |i| (0..self.n).map(|j| self.value(i, j)).collect())
    }
}

/// Counts per-image class co-occurrence. Each image contributes at most one
/// count per class pair, however many instances it holds.
pub fn build_cooccurrence<I, S>(images: I, vocab: &ClassVocabulary) -> Result<CoocMatrix>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[usize]>,
{
    let n = vocab.len();
    let mut counts = vec![0u64; n * n];
    let mut seen_any = false;
    let mut present = vec![false; n];
    for (idx, img) in images.into_iter().enumerate() {
        seen_any = true;
        present.iter_mut().for_each(|p| *p = false);
        for &c in img.as_ref() {
            if c >= n {
                return Err(Error::parse(
                    format!("image #{idx}"),
                    format!("class id {c} outside vocabulary of {n}"),
                ));
            }
            present[c] = true;
        }
        let classes: Vec<usize> = (0..n).filter(|&c| present[c]).collect();
        for &i in &classes {
            for &j in &classes {
                counts[i * n + j] += 1;
            }
        }
    }
    if !seen_any {
        return Err(Error::Empty("co-occurrence needs at least one image"));
    }
    Ok(CoocMatrix { n, counts })
}

pub fn feature_length(cfg: &RelationConfig, vocab_size: usize) -> usize {
    vocab_size * cfg.active_width() + 1
}

/// Context encoding of one reference detection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_feature_vector<'a, I>(
    reference: &Detection,
    others: I,
    cfg: &RelationConfig,
    vocab_size: usize,
) -> Result<FeatureVector>
where
    I: IntoIterator<Item = &'a Detection>,
{
    if reference.class_id >= vocab_size {
        return Err(Error::UnknownClass(reference.class_id));
    }
    let width = cfg.active_width();
    let mut out = vec![0.0; feature_length(cfg, vocab_size)];
    for other in others {
        if other.class_id >= vocab_size {
            return Err(Error::UnknownClass(other.class_id));
        }
        let bits = relation_bits(&reference.bbox, &other.bbox, cfg);
        let block = &mut out[other.class_id * width..(other.class_id + 1) * width];
        for (slot, v) in block.iter_mut().zip(bits.active_values(cfg)) {
            if v > 0.0 {
                *slot = 1.0;
            }
        }
    }
    out[vocab_size * width] = reference.confidence;
    Ok(FeatureVector(out))
}

/// Feature vectors for every detection of a scene, each against all the others.
pub fn scene_features(
    dets: &[Detection],
    cfg: &RelationConfig,
    vocab_size: usize,
) -> Result<Vec<FeatureVector>> {
    (0..dets.len())
        .map(|i| {
            let others = dets.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| d);
            build_feature_vector(&dets[i], others, cfg, vocab_size)
        })
        .collect()
}

/// Classifier input: the context features followed by a one-hot encoding of
/// the reference label, so a score answers "is this label plausible here".
pub fn encode_model_input(features: &[f64], class_id: usize, vocab_size: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(features.len() + vocab_size);
    v.extend_from_slice(features);
    v.extend((0..vocab_size).map(|c| if c == class_id { 1.0 } else { 0.0 }));
    v
}

pub fn model_input_dim(cfg: &RelationConfig, vocab_size: usize) -> usize {
    feature_length(cfg, vocab_size) + vocab_size
}

/// Labeled samples, one row per detection in multi-object images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Array2<f64>,
    pub ref_classes: Vec<usize>,
    pub labels: Vec<bool>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows of `encode_model_input`.
    pub fn model_inputs(&self, vocab_size: usize) -> Array2<f64> {
        let (n, f) = self.features.dim();
        let mut x = Array2::zeros((n, f + vocab_size));
        for (i, row) in self.features.outer_iter().enumerate() {
            x.row_mut(i).slice_mut(ndarray::s![..f]).assign(&row);
            x[[i, f + self.ref_classes[i]]] = 1.0;
        }
        x
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }
}

pub fn build_training_set(
    detections: &BTreeMap<u64, Vec<Detection>>,
    ground_truth: &BTreeMap<u64, Vec<GroundTruth>>,
    cfg: &RelationConfig,
    vocab: &ClassVocabulary,
) -> Result<TrainingSet> {
    cfg.validate()?;
    let missing: Vec<u64> = detections
        .keys()
        .filter(|id| !ground_truth.contains_key(id))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownImages(missing));
    }

    let flen = feature_length(cfg, vocab.len());
    let mut data = Vec::new();
    let mut ref_classes = Vec::new();
    let mut labels = Vec::new();
    for (image_id, dets) in detections {
        if dets.len() < 2 {
            continue;
        }
        let gts = &ground_truth[image_id];
        let matched = match_detections(dets, gts, MATCH_IOU);
        for (det, fv) in dets.iter().zip(scene_features(dets, cfg, vocab.len())?) {
            data.extend_from_slice(fv.as_slice());
            ref_classes.push(det.class_id);
        }
        labels.extend_from_slice(&matched.correct);
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, flen), data)
        .expect("every row has the configured feature length");
    Ok(TrainingSet {
        features,
        ref_classes,
        labels,
    })
}

/// Class sets per image of the ground truth, in image-id order.
pub fn image_class_sets(ground_truth: &BTreeMap<u64, Vec<GroundTruth>>) -> Vec<Vec<usize>> {
    ground_truth
        .values()
        .map(|gts| gts.iter().map(|g| g.class_id).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RelationFamily;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn cooccurrence_toy_set() {
        let vocab = ClassVocabulary::synthetic(2);
        let (a, bb) = (0usize, 1usize);
        let m = build_cooccurrence(vec![vec![a, bb], vec![a], vec![a, bb]], &vocab).unwrap();
        assert!((m.value(a, bb) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.value(bb, a), 1.0);
        assert_eq!(m.value(a, a), 1.0);
    }

    #[test]
    fn cooccurrence_single_and_empty_class() {
        let vocab = ClassVocabulary::synthetic(3);
        let m = build_cooccurrence([[0usize]], &vocab).unwrap();
        assert_eq!(m.value(0, 0), 1.0);
        assert_eq!(m.value(0, 1), 0.0);
        assert!(m.rows().nth(2).unwrap().iter().all(|v| *v == 0.0));
        assert!(build_cooccurrence([[7usize]], &vocab).is_err());
        assert!(build_cooccurrence(Vec::<Vec<usize>>::new(), &vocab).is_err());
    }

    #[test]
    fn feature_lengths_for_coco() {
        use RelationFamily::*;
        let rows = [
            (vec![Cooccurrence], 81),
            (vec![Overlap], 161),
            (vec![Scale], 241),
            (vec![Boundary], 321),
            (vec![Central], 321),
            (vec![Distance], 161),
        ];
        for (fams, expected) in rows {
            assert_eq!(feature_length(&RelationConfig::only(&fams), 80), expected);
        }
        assert_eq!(feature_length(&RelationConfig::all(), 80), 1281);
    }

    #[test]
    fn empty_context_is_all_zero() {
        let r = Detection::new(1, 0, b(0., 0., 3., 4.), 0.7);
        let fv = build_feature_vector(&r, [], &RelationConfig::all(), 3).unwrap();
        assert_eq!(fv.len(), 49);
        assert!(fv.0[..48].iter().all(|v| *v == 0.0));
        assert_eq!(fv.0[48], 0.7);
    }

    #[test]
    fn single_context_object_block() {
        let r = Detection::new(1, 0, b(0., 0., 3., 4.), 0.8);
        let o = Detection::new(1, 2, b(0., 20., 6., 8.), 0.9);
        let fv = build_feature_vector(&r, [&o], &RelationConfig::all(), 3).unwrap();
        let mut expected = vec![0.0; 49];
        // class-2 block starts at 32: cooc, ov_yes, ov_no, larger, smaller, equal, b_above ...
        let block = 32;
        expected[block] = 1.0; // cooccur
        expected[block + 2] = 1.0; // overlap_no
        expected[block + 4] = 1.0; // smaller
        expected[block + 6] = 1.0; // boundary above
        expected[block + 10] = 1.0; // central above
        expected[block + 14] = 1.0; // near
        expected[48] = 0.8;
        assert_eq!(fv.0, expected);
    }

    #[test]
    fn same_class_context_is_or_aggregated() {
        let cfg = RelationConfig::only(&[RelationFamily::Distance]);
        let r = Detection::new(1, 0, b(100., 0., 3., 4.), 0.5);
        let near = Detection::new(1, 1, b(200., 0., 2., 2.), 0.5);
        let far = Detection::new(1, 1, b(0., 0., 2., 2.), 0.5);
        let fv = build_feature_vector(&r, [&near, &far], &cfg, 2).unwrap();
        assert_eq!(fv.0, vec![0.0, 0.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn rejects_out_of_vocabulary_class() {
        let r = Detection::new(1, 0, b(0., 0., 1., 1.), 0.5);
        let o = Detection::new(1, 9, b(0., 0., 1., 1.), 0.5);
        assert!(matches!(
            build_feature_vector(&r, [&o], &RelationConfig::all(), 3),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn training_set_labels_and_gating() {
        let vocab = ClassVocabulary::synthetic(3);
        let mut dets = BTreeMap::new();
        let mut gts = BTreeMap::new();
        dets.insert(
            1,
            vec![
                Detection::new(1, 1, b(0., 0., 10., 10.), 0.9),
                Detection::new(1, 2, b(50., 50., 10., 10.), 0.8),
            ],
        );
        gts.insert(
            1,
            vec![
                GroundTruth { image_id: 1, class_id: 1, bbox: b(0., 0., 10., 10.) },
                GroundTruth { image_id: 1, class_id: 0, bbox: b(50., 50., 10., 10.) },
            ],
        );
        dets.insert(2, vec![Detection::new(2, 0, b(0., 0., 5., 5.), 0.9)]);
        gts.insert(2, vec![]);
        let ts = build_training_set(&dets, &gts, &RelationConfig::all(), &vocab).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts.labels, vec![true, false]);
        assert_eq!(ts.feature_dim(), 49);
        assert_eq!(ts.model_inputs(3).ncols(), 52);

        dets.insert(3, vec![]);
        let err = build_training_set(&dets, &gts, &RelationConfig::all(), &vocab).unwrap_err();
        assert!(matches!(err, Error::UnknownImages(ids) if ids == vec![3]));
    }

    fn scene() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0usize..4, 0i32..100, 0i32..100, 1i32..40, 1i32..40, 0.0f64..=1.0),
            1..8,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(c, x, y, w, h, s)| {
                    Detection::new(0, c, b(x as f64, y as f64, w as f64, h as f64), s)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn vectors_are_binary_with_confidence_tail(dets in scene()) {
            let cfg = RelationConfig::all();
            for (d, fv) in dets.iter().zip(scene_features(&dets, &cfg, 4).unwrap()) {
                prop_assert_eq!(fv.len(), feature_length(&cfg, 4));
                let (last, body) = fv.0.split_last().unwrap();
                prop_assert_eq!(*last, d.confidence);
                prop_assert!(body.iter().all(|v| *v == 0.0 || *v == 1.0));
            }
        }

        #[test]
        fn context_order_does_not_matter(dets in scene()) {
            let cfg = RelationConfig::all();
            let (r, rest) = dets.split_first().unwrap();
            let fwd = build_feature_vector(r, rest.iter(), &cfg, 4).unwrap();
            let rev = build_feature_vector(r, rest.iter().rev(), &cfg, 4).unwrap();
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn cooc_values_are_count_ratios(sets in prop::collection::vec(prop::collection::vec(0usize..5, 0..6), 1..20)) {
            let vocab = ClassVocabulary::synthetic(5);
            let m = build_cooccurrence(&sets, &vocab).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let v = m.value(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    let recovered = v * m.count(i, i) as f64;
                    prop_assert!((recovered - recovered.round()).abs() < 1e-9);
                    prop_assert_eq!(recovered.round() as u64, if m.count(i, i) == 0 { 0 } else { m.count(i, j) });
                }
            }
        }
    }
}
