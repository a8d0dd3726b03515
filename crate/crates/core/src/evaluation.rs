//! Detection-correctness matching and the reported metrics: ROC AUC over
//! per-detection correctness, AP / mAP at a fixed IoU, and micro F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ClassVocabulary, Detection, GroundTruth};
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Correctness per detection, in input order.
    pub correct: Vec<bool>,
    /// Whether each ground truth was claimed, in input order.
    pub gt_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Indices of `dets` by descending confidence; ties keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy one-to-one matching within a single image. Each detection, in
/// confidence order, takes the unmatched same-class ground truth with the
/// highest IoU, provided that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MatchResult {
    let mut correct = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            correct[i] = true;
        }
    }
    let tp = correct.iter().filter(|c| **c).count();
    MatchResult {
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        tp,
        correct,
        gt_matched,
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// across the two classes count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order, counting negatives strictly below.
    let mut neg_below = 0u64;
    let mut wins2 = 0u64; // twice the U statistic, keeps ties exact
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(wins2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// AP from detections already reduced to `(confidence, correct)`, using the
/// all-point precision envelope.
pub fn average_precision_ranked(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));

    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if ranked[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn group_by_image<'a, T, F>(items: &'a [T], key: F) -> BTreeMap<u64, Vec<&'a T>>
where
    F: Fn(&T) -> u64,
{
    let mut out: BTreeMap<u64, Vec<&T>> = BTreeMap::new();
    for it in items {
        out.entry(key(it)).or_default().push(it);
    }
    out
}

/// AP for one class over any number of images. `dets` and `gts` may hold
/// other classes; they are filtered out.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> f64 {
    let dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == class_id).cloned().collect();
    let gts: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).cloned().collect();
    let gt_by_image = group_by_image(&gts, |g| g.image_id);
    let det_by_image = group_by_image(&dets, |d| d.image_id);

    let mut ranked = Vec::with_capacity(dets.len());
    for (image_id, image_dets) in det_by_image {
        let image_dets: Vec<Detection> = image_dets.into_iter().cloned().collect();
        let image_gts: Vec<GroundTruth> = gt_by_image
            .get(&image_id)
            .map(|v| v.iter().map(|g| (*g).clone()).collect())
            .unwrap_or_default();
        let m = match_detections(&image_dets, &image_gts, iou_thr);
        ranked.extend(image_dets.iter().map(|d| d.confidence).zip(m.correct));
    }
    average_precision_ranked(&ranked, gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Classes without ground truth, left out of the mean.
    pub skipped: Vec<usize>,
}

pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    vocab_size: usize,
    iou_thr: f64,
) -> MapResult {
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for c in 0..vocab_size {
        if gts.iter().any(|g| g.class_id == c) {
            per_class.insert(c, average_precision(dets, gts, c, iou_thr));
        } else {
            skipped.push(c);
        }
    }
    if !skipped.is_empty() {
        log::debug!("classes without ground truth excluded from mAP: {skipped:?}");
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapResult {
        map,
        per_class,
        skipped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> F1Score {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
    }
}

/// Metrics report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub mode: String,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub map50: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub detections: usize,
}

/// Inputs for one report: the surviving detections per image, plus any
/// removed detections that still count toward AUC with a score of zero.
#[derive(Debug, Clone, Default)]
pub struct EvalInput {
    pub kept: BTreeMap<u64, Vec<Detection>>,
    /// `(image_id, correct)` of detections dropped by a pipeline.
    pub removed: Vec<(u64, bool)>,
}

pub fn evaluate(
    input: &EvalInput,
    ground_truth: &BTreeMap<u64, Vec<GroundTruth>>,
    vocab: &ClassVocabulary,
    mode: &str,
    threshold: f64,
) -> MetricsReport {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let empty = Vec::new();
    for (image_id, gts) in ground_truth {
        let dets = input.kept.get(image_id).unwrap_or(&empty);
        let m = match_detections(dets, gts, 0.5);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        scores.extend(dets.iter().map(|d| d.confidence));
        labels.extend_from_slice(&m.correct);
    }
    for &(_, correct) in &input.removed {
        scores.push(0.0);
        labels.push(correct);
    }
    let auc = auc(&scores, &labels).ok();

    let all_dets: Vec<Detection> = input.kept.values().flatten().cloned().collect();
    let all_gts: Vec<GroundTruth> = ground_truth.values().flatten().cloned().collect();
    let map = mean_average_precision(&all_dets, &all_gts, vocab.len(), 0.5);
    let per_class_ap = map
        .per_class
        .iter()
        .map(|(c, ap)| (vocab.name(*c).unwrap_or("?").to_string(), *ap))
        .collect();
    let score = f1(tp, fp, fn_);
    MetricsReport {
        format_version: 1,
        mode: mode.to_string(),
        threshold,
        auc,
        map50: map.map,
        f1: score.f1,
        precision: score.precision,
        recall: score.recall,
        per_class_ap,
        detections: all_dets.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn gt(class_id: usize, bbox: BBox) -> GroundTruth {
        GroundTruth { image_id: 0, class_id, bbox }
    }

    /// Exhaustive pair counting.
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn matching_examples() {
        let g = vec![gt(1, b(0., 0., 10., 10.))];
        let m = match_detections(&[Detection::new(0, 1, b(0., 0., 10., 10.), 0.9)], &g, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));

        let two = [
            Detection::new(0, 1, b(0., 0., 10., 10.), 0.6),
            Detection::new(0, 1, b(0., 0., 10., 10.), 0.9),
        ];
        let m = match_detections(&two, &g, 0.5);
        assert_eq!((m.tp, m.fp), (1, 1));
        assert_eq!(m.correct, vec![false, true]);

        let m = match_detections(&[Detection::new(0, 2, b(0., 0., 10., 10.), 0.9)], &g, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 0.0);
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [true, false, true, false];
        assert_eq!(auc_pairs(&s, &l), 0.75);
        assert!((auc(&s, &l).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn auc_of_random_scores_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.gen()).collect();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_ranked(&[(0.9, true)], 1), 1.0);
        let ap = average_precision_ranked(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision_ranked(&[], 3), 0.0);

        let gts = vec![gt(0, b(0., 0., 10., 10.))];
        assert_eq!(average_precision(&[], &gts, 0, 0.5), 0.0);
        let d = [Detection::new(0, 0, b(0., 0., 10., 10.), 0.3)];
        assert_eq!(average_precision(&d, &gts, 0, 0.5), 1.0);
    }

    #[test]
    fn map_skips_classes_without_ground_truth() {
        let gts = vec![gt(0, b(0., 0., 10., 10.)), gt(2, b(20., 20., 5., 5.))];
        let dets = [Detection::new(0, 0, b(0., 0., 10., 10.), 0.9)];
        let r = mean_average_precision(&dets, &gts, 3, 0.5);
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(3, 0, 0).f1, 1.0);
        let s = f1(2, 1, 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1(0, 4, 2).f1, 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            if let Ok(v) = auc(&scores, &labels) {
                prop_assert!((v - auc_pairs(&scores, &labels)).abs() < 1e-12);
                let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
                prop_assert_eq!(v, auc(&squashed, &labels).unwrap());
            }
        }

        #[test]
        fn matching_ignores_input_order(
            boxes in prop::collection::vec((0usize..2, 0i32..30, 0i32..30, 5i32..15, 0u16..1000), 1..8),
            rot in 0usize..8,
        ) {
            // distinct confidences: tie order is input order by definition
            let dets: Vec<Detection> = boxes.iter().enumerate().map(|(i, &(c, x, y, s, conf))| {
                let conf = (conf as f64 * 8.0 + i as f64) / 8000.0;
                Detection::new(0, c, b(x as f64, y as f64, s as f64, s as f64), conf)
            }).collect();
            let gts: Vec<GroundTruth> = boxes.iter().step_by(2).map(|&(c, x, y, s, _)| {
                gt(c, b(x as f64 + 1.0, y as f64, s as f64, s as f64))
            }).collect();
            let mut shuffled = dets.clone();
            shuffled.rotate_left(rot % dets.len());
            let a = match_detections(&dets, &gts, 0.5);
            let c = match_detections(&shuffled, &gts, 0.5);
            prop_assert_eq!((a.tp, a.fp, a.fn_), (c.tp, c.fp, c.fn_));
            let mut back = c.correct.clone();
            back.rotate_right(rot % dets.len());
            prop_assert_eq!(a.correct, back);
            let ap = average_precision(&dets, &gts, 0, 0.5);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
