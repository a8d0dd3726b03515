//! Scene-level pipelines built on the context classifier: rescoring, and
//! relabeling of low scorers through their detector top-5 classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{match_detections, EvalInput};
use crate::features::{ClassVocabulary, Detection, GroundTruth, MATCH_IOU};
use crate::geometry::BBox;
use crate::model::ContextModel;

pub const DEFAULT_RELABEL_T: f64 = 0.4;

/// Detections of one image after detector-threshold gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub image_id: u64,
    pub detector_threshold: f64,
    pub detections: Vec<Detection>,
}

impl SceneDetections {
    pub fn new(image_id: u64, detector_threshold: f64, detections: Vec<Detection>) -> Self {
        Self {
            image_id,
            detector_threshold,
            detections,
        }
    }

    fn check(&self, model: &ContextModel) -> Result<()> {
        for d in &self.detections {
            if d.image_id != self.image_id {
                return Err(Error::Config(format!(
                    "detection of image {} inside scene {}",
                    d.image_id, self.image_id
                )));
            }
            model.vocab.check(d.class_id)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoreOutcome {
    pub scene: SceneDetections,
    /// Set for scenes with fewer than two detections, which pass through unchanged.
    pub skipped: bool,
}

/// Replaces every confidence with the classifier's probability of correctness.
pub fn rescore_scene(model: &ContextModel, scene: &SceneDetections) -> Result<RescoreOutcome> {
    scene.check(model)?;
    if scene.detections.len() < 2 {
        log::debug!("image {}: skipped (mono-object)", scene.image_id);
        return Ok(RescoreOutcome {
            scene: scene.clone(),
            skipped: true,
        });
    }
    let scores = model.score_scene(&scene.detections)?;
    let detections = scene
        .detections
        .iter()
        .zip(scores)
        .map(|(d, s)| Detection {
            confidence: s,
            ..d.clone()
        })
        .collect();
    Ok(RescoreOutcome {
        scene: SceneDetections {
            detections,
            ..scene.clone()
        },
        skipped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelStatus {
    Kept,
    Relabeled,
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub class_id: usize,
    pub score: f64,
}

/// What happened to one input detection.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabelRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub original_label: usize,
    pub original_score: f64,
    /// Score under the original label.
    pub rescored: f64,
    pub status: RelabelStatus,
    pub final_label: Option<usize>,
    pub final_score: Option<f64>,
    pub candidates_tried: Vec<Candidate>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelOutcome {
    /// One record per input detection, in input order.
    pub records: Vec<RelabelRecord>,
    /// Surviving detections with their final labels and scores.
    pub scene: SceneDetections,
    pub skipped: bool,
}

/// Best candidate strictly above `t`; ties go to the lower class id.
fn pick(candidates: &[Candidate], t: f64) -> Option<Candidate> {
    candidates
        .iter()
        .filter(|c| c.score > t)
        .copied()
        .reduce(|best, c| {
            if c.score > best.score || (c.score == best.score && c.class_id < best.class_id) {
                c
            } else {
                best
            }
        })
}

/// Rescore; send detections scoring below `t` through their top-5 classes
/// (each scored against the original labels of the rest of the scene); keep
/// the best candidate above `t` or drop the detection as background; finally
/// rescore the surviving scene under its new labels.
pub fn relabel_scene(model: &ContextModel, scene: &SceneDetections, t: f64) -> Result<RelabelOutcome> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("relabel threshold {t} outside [0, 1]")));
    }
    scene.check(model)?;
    let dets = &scene.detections;

    if dets.len() < 2 {
        let records = dets
            .iter()
            .map(|d| RelabelRecord {
                image_id: d.image_id,
                bbox: d.bbox,
                original_label: d.class_id,
                original_score: d.confidence,
                rescored: d.confidence,
                status: RelabelStatus::Kept,
                final_label: Some(d.class_id),
                final_score: Some(d.confidence),
                candidates_tried: Vec::new(),
                note: Some("skipped (mono-object)".into()),
            })
            .collect();
        return Ok(RelabelOutcome {
            records,
            scene: scene.clone(),
            skipped: true,
        });
    }

    // step 1
    let rescored = model.score_scene(dets)?;

    // steps 2 and 3
    let mut records = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let mut rec = RelabelRecord {
            image_id: d.image_id,
            bbox: d.bbox,
            original_label: d.class_id,
            original_score: d.confidence,
            rescored: rescored[i],
            status: RelabelStatus::Kept,
            final_label: Some(d.class_id),
            final_score: None,
            candidates_tried: Vec::new(),
            note: None,
        };
        if rescored[i] < t {
            match d.top5.as_deref() {
                Some(top) if !top.is_empty() => {
                    for &(class_id, det_score) in top {
                        let score = model.score_as(dets, i, class_id, det_score)?;
                        rec.candidates_tried.push(Candidate { class_id, score });
                    }
                    match pick(&rec.candidates_tried, t) {
                        Some(best) if best.class_id == d.class_id => {}
                        Some(best) => {
                            rec.status = RelabelStatus::Relabeled;
                            rec.final_label = Some(best.class_id);
                        }
                        None => {
                            rec.status = RelabelStatus::Removed;
                            rec.final_label = None;
                        }
                    }
                }
                _ => {
                    rec.status = RelabelStatus::Removed;
                    rec.final_label = None;
                    rec.note = Some("top5 unavailable".into());
                    log::warn!("image {}: top5 unavailable for a low-scoring detection", d.image_id);
                }
            }
        }
        records.push(rec);
    }

    // step 4
    let mut survivors = Vec::new();
    let mut owners = Vec::new();
    for (i, (d, rec)) in dets.iter().zip(&records).enumerate() {
        let Some(label) = rec.final_label else { continue };
        let confidence = if label == d.class_id {
            d.confidence
        } else {
            d.top5
                .as_deref()
                .and_then(|top| top.iter().find(|(c, _)| *c == label))
                .map_or(d.confidence, |(_, s)| *s)
        };
        survivors.push(Detection {
            class_id: label,
            confidence,
            ..d.clone()
        });
        owners.push(i);
    }
    let final_scores = if survivors.len() >= 2 {
        model.score_scene(&survivors)?
    } else {
        // too few survivors for context: keep the step-3 values
        owners
            .iter()
            .map(|&i| {
                let rec = &records[i];
                match rec.status {
                    RelabelStatus::Relabeled => pick(&rec.candidates_tried, t).map_or(rec.rescored, |c| c.score),
                    _ => rec.rescored,
                }
            })
            .collect()
    };
    for ((det, &owner), score) in survivors.iter_mut().zip(&owners).zip(final_scores) {
        det.confidence = score;
        records[owner].final_score = Some(score);
    }

    Ok(RelabelOutcome {
        records,
        scene: SceneDetections {
            detections: survivors,
            ..scene.clone()
        },
        skipped: false,
    })
}

/// Detections scoring at least `threshold`, per image.
pub fn gate(
    detections: &BTreeMap<u64, Vec<Detection>>,
    threshold: f64,
) -> BTreeMap<u64, Vec<Detection>> {
    detections
        .iter()
        .map(|(id, dets)| (*id, dets.iter().filter(|d| d.confidence >= threshold).cloned().collect()))
        .collect()
}

/// Rescores every image; returns the rescored detections and the number of
/// images skipped for having fewer than two detections.
pub fn rescore_all(
    model: &ContextModel,
    detections: &BTreeMap<u64, Vec<Detection>>,
    threshold: f64,
) -> Result<(BTreeMap<u64, Vec<Detection>>, usize)> {
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for (id, dets) in detections {
        let r = rescore_scene(model, &SceneDetections::new(*id, threshold, dets.clone()))?;
        skipped += usize::from(r.skipped);
        out.insert(*id, r.scene.detections);
    }
    Ok((out, skipped))
}

pub fn relabel_all(
    model: &ContextModel,
    detections: &BTreeMap<u64, Vec<Detection>>,
    threshold: f64,
    t: f64,
) -> Result<BTreeMap<u64, RelabelOutcome>> {
    detections
        .iter()
        .map(|(id, dets)| {
            relabel_scene(model, &SceneDetections::new(*id, threshold, dets.clone()), t).map(|o| (*id, o))
        })
        .collect()
}

/// Evaluation input for relabel outcomes. Removed detections enter AUC with
/// score zero and the correctness of their original label.
pub fn relabel_eval_input(
    original: &BTreeMap<u64, Vec<Detection>>,
    outcomes: &BTreeMap<u64, RelabelOutcome>,
    ground_truth: &BTreeMap<u64, Vec<GroundTruth>>,
) -> EvalInput {
    let mut input = EvalInput::default();
    for (id, outcome) in outcomes {
        let gts = ground_truth.get(id).map_or(&[][..], Vec::as_slice);
        let dets = original.get(id).map_or(&[][..], Vec::as_slice);
        let correct = match_detections(dets, gts, MATCH_IOU).correct;
        for (rec, ok) in outcome.records.iter().zip(correct) {
            if rec.status == RelabelStatus::Removed {
                input.removed.push((*id, ok));
            }
        }
        input.kept.insert(*id, outcome.scene.detections.clone());
    }
    input
}

/// Which output an evaluation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Detector,
    Rescore,
    Relabel,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Detector => "detector",
            Mode::Rescore => "rescore",
            Mode::Relabel => "relabel",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(Mode::Detector),
            "rescore" => Ok(Mode::Rescore),
            "relabel" => Ok(Mode::Relabel),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Gates the raw detections at `threshold` and runs the pipeline `mode`
/// asks for. Rescore and relabel need a model.
pub fn pipeline_eval_input(
    mode: Mode,
    model: Option<&ContextModel>,
    detections: &BTreeMap<u64, Vec<Detection>>,
    ground_truth: &BTreeMap<u64, Vec<GroundTruth>>,
    threshold: f64,
    t: f64,
) -> Result<EvalInput> {
    let dets = gate(detections, threshold);
    let need = || Error::Config(format!("{} mode needs a model", mode.name()));
    Ok(match mode {
        Mode::Detector => EvalInput {
            kept: dets,
            removed: Vec::new(),
        },
        Mode::Rescore => EvalInput {
            kept: rescore_all(model.ok_or_else(need)?, &dets, threshold)?.0,
            removed: Vec::new(),
        },
        Mode::Relabel => {
            let outcomes = relabel_all(model.ok_or_else(need)?, &dets, threshold, t)?;
            relabel_eval_input(&dets, &outcomes, ground_truth)
        }
    })
}

/// One line of the relabel audit log. Labels are external category ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub original_label: i64,
    pub original_score: f64,
    pub rescored: f64,
    pub status: RelabelStatus,
    pub final_label: Option<i64>,
    pub final_score: Option<f64>,
    pub candidates_tried: Vec<AuditCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCandidate {
    pub label: i64,
    pub score: f64,
}

impl RelabelRecord {
    pub fn to_audit(&self, vocab: &ClassVocabulary) -> AuditRecord {
        let ext = |c: usize| vocab.external_id(c).unwrap_or(c as i64);
        AuditRecord {
            image_id: self.image_id,
            bbox: self.bbox.to_array(),
            original_label: ext(self.original_label),
            original_score: self.original_score,
            rescored: self.rescored,
            status: self.status,
            final_label: self.final_label.map(ext),
            final_score: self.final_score,
            candidates_tried: self
                .candidates_tried
                .iter()
                .map(|c| AuditCandidate {
                    label: ext(c.class_id),
                    score: c.score,
                })
                .collect(),
            note: self.note.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::model_input_dim;
    use crate::geometry::RelationConfig;
    use crate::mlp::NetworkParams;

    /// A network whose score depends only on the label one-hot: class c
    /// scores sigmoid(bias[c]).
    fn label_model(bias: &[f64]) -> ContextModel {
        let vocab = ClassVocabulary::synthetic(bias.len());
        let rel = RelationConfig::all();
        let dim = model_input_dim(&rel, bias.len());
        let flen = dim - bias.len();
        let mut net = NetworkParams::zeros(dim, bias.len());
        for (c, b) in bias.iter().enumerate() {
            // hidden unit c fires for label c
            net.w1[[c, flen + c]] = 60.0;
            net.b1[c] = -30.0;
            net.w2[[0, c]] = *b;
        }
        ContextModel::new(vocab, rel, 0, net).unwrap()
    }

    fn det(class_id: usize, x: f64, conf: f64) -> Detection {
        Detection::new(7, class_id, BBox::new(x, 0.0, 10.0, 10.0).unwrap(), conf)
    }

    fn sigmoid(a: f64) -> f64 {
        1.0 / (1.0 + (-a).exp())
    }

    #[test]
    fn rescoring_changes_only_confidences() {
        let m = label_model(&[2.0, -2.0, 0.0]);
        let scene = SceneDetections::new(7, 0.5, vec![det(0, 0.0, 0.9), det(1, 20.0, 0.8)]);
        let out = rescore_scene(&m, &scene).unwrap();
        assert!(!out.skipped);
        for (a, b) in scene.detections.iter().zip(&out.scene.detections) {
            assert_eq!((a.class_id, a.bbox, a.image_id), (b.class_id, b.bbox, b.image_id));
        }
        assert!((out.scene.detections[0].confidence - sigmoid(2.0)).abs() < 1e-6);
        assert!((out.scene.detections[1].confidence - sigmoid(-2.0)).abs() < 1e-6);
    }

    #[test]
    fn mono_object_scenes_pass_through() {
        let m = label_model(&[1.0, 1.0]);
        let scene = SceneDetections::new(7, 0.5, vec![det(0, 0.0, 0.9)]);
        let out = rescore_scene(&m, &scene).unwrap();
        assert!(out.skipped);
        assert_eq!(out.scene, scene);
        assert!(relabel_scene(&m, &scene, 0.4).unwrap().skipped);
    }

    #[test]
    fn no_candidates_means_rescoring_twice() {
        let m = label_model(&[2.0, 3.0]);
        let scene = SceneDetections::new(7, 0.5, vec![det(0, 0.0, 0.9), det(1, 20.0, 0.8)]);
        let out = relabel_scene(&m, &scene, 0.4).unwrap();
        let rescored = rescore_scene(&m, &scene).unwrap().scene;
        assert_eq!(out.scene, rescored);
        assert!(out.records.iter().all(|r| r.status == RelabelStatus::Kept));
    }

    #[test]
    fn low_scorer_takes_best_candidate() {
        // class 0 scores low; classes 1 and 2 qualify, 2 is higher
        let m = label_model(&[-3.0, 0.5, 2.0, 0.0]);
        let low = det(0, 0.0, 0.9).with_top5(vec![(0, 0.9), (1, 0.05), (2, 0.03)]);
        let scene = SceneDetections::new(7, 0.5, vec![low, det(3, 30.0, 0.7)]);
        let out = relabel_scene(&m, &scene, 0.4).unwrap();
        let rec = &out.records[0];
        assert_eq!(rec.status, RelabelStatus::Relabeled);
        assert_eq!(rec.final_label, Some(2));
        assert_eq!(rec.candidates_tried.len(), 3);
        assert_eq!(out.scene.detections[0].class_id, 2);
        assert_eq!(out.scene.detections.len(), 2);
    }

    #[test]
    fn all_candidates_below_threshold_removes() {
        let m = label_model(&[-3.0, -2.0, 0.0]);
        let low = det(0, 0.0, 0.9).with_top5(vec![(0, 0.9), (1, 0.1)]);
        let scene = SceneDetections::new(7, 0.5, vec![low, det(2, 30.0, 0.7), det(2, 60.0, 0.6)]);
        let out = relabel_scene(&m, &scene, 0.4).unwrap();
        assert_eq!(out.records[0].status, RelabelStatus::Removed);
        assert_eq!(out.records[0].final_label, None);
        assert_eq!(out.scene.detections.len(), 2);

        let bare = det(0, 0.0, 0.9);
        let scene = SceneDetections::new(7, 0.5, vec![bare, det(2, 30.0, 0.7)]);
        let out = relabel_scene(&m, &scene, 0.4).unwrap();
        assert_eq!(out.records[0].status, RelabelStatus::Removed);
        assert_eq!(out.records[0].note.as_deref(), Some("top5 unavailable"));
    }

    #[test]
    fn zero_threshold_is_pure_rescoring() {
        let m = label_model(&[-5.0, -4.0]);
        let scene = SceneDetections::new(7, 0.5, vec![det(0, 0.0, 0.9), det(1, 20.0, 0.8)]);
        let out = relabel_scene(&m, &scene, 0.0).unwrap();
        assert_eq!(out.scene, rescore_scene(&m, &scene).unwrap().scene);
    }

    #[test]
    fn candidate_ties_prefer_lower_class() {
        let c = [
            Candidate { class_id: 3, score: 0.8 },
            Candidate { class_id: 1, score: 0.8 },
            Candidate { class_id: 2, score: 0.3 },
        ];
        assert_eq!(pick(&c, 0.4).unwrap().class_id, 1);
        assert!(pick(&c, 0.8).is_none());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Detector, Mode::Rescore, Mode::Relabel] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("rescored".parse::<Mode>().is_err());
    }

    #[test]
    fn model_free_modes_only() {
        let (dets, gts) = (BTreeMap::new(), BTreeMap::new());
        assert!(pipeline_eval_input(Mode::Detector, None, &dets, &gts, 0.5, 0.4).is_ok());
        assert!(pipeline_eval_input(Mode::Rescore, None, &dets, &gts, 0.5, 0.4).is_err());
        assert!(pipeline_eval_input(Mode::Relabel, None, &dets, &gts, 0.5, 0.4).is_err());
    }
}
