//! Synthetic scenes with planted contextual rules.
//!
//! A scene starts as real objects whose labels satisfy every rule among
//! themselves. Background false positives are added under labels that break
//! the rules, and some objects may get a planted wrong label that breaks them
//! too while the true label keeps holding. So without label noise a detection
//! is correct exactly when its label satisfies the rules against the rest of
//! the scene, and dropping background or fixing labels never invalidates a
//! real object. Boxes within a scene never overlap by IoU 0.3 or more, so
//! greedy IoU matching recovers the planted correctness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{DatasetBundle, ImageInfo};
use crate::error::{Error, Result};
use crate::features::{ClassVocabulary, Detection, GroundTruth};
use crate::geometry::{iou, relation_bits, BBox, Relation, RelationConfig};

const MAX_SCENE_IOU: f64 = 0.3;
const PLACEMENT_TRIES: usize = 200;
const REPAIR_SWEEPS: usize = 20;
const BACKGROUND_TRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// The subject is correct only if some object of the given class stands
    /// in the relation to it.
    Requires,
    /// The subject is incorrect if some object of the given class stands in
    /// the relation to it.
    Forbids,
}

/// `subject` (as reference) against any detection labeled `object`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
    pub effect: Effect,
}

impl Rule {
    pub fn new(subject: usize, relation: Relation, object: usize, effect: Effect) -> Self {
        Self {
            subject,
            relation,
            object,
            effect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub images: usize,
    pub first_image_id: u64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub box_min: f64,
    pub box_max: f64,
    pub rules: Vec<Rule>,
    /// Expected fraction of detections that are background false positives.
    pub background_fraction: f64,
    /// Probability of flipping the correctness of an object or background
    /// detection.
    pub label_noise: f64,
    /// Target fraction of detections given a wrong label whose true label
    /// stays in the detector top-5.
    pub mislabel_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            images: 100,
            first_image_id: 1,
            objects_min: 3,
            objects_max: 7,
            image_width: 640.0,
            image_height: 480.0,
            box_min: 24.0,
            box_max: 200.0,
            rules: Self::default_rules(),
            background_fraction: 0.3,
            label_noise: 0.0,
            mislabel_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// A rule set for six classes.
    pub fn default_rules() -> Vec<Rule> {
        use Effect::*;
        use Relation::*;
        vec![
            Rule::new(0, Cooccur, 1, Requires),
            Rule::new(1, Larger, 2, Forbids),
            Rule::new(2, BoundaryAbove, 3, Forbids),
            Rule::new(3, Near, 4, Requires),
            Rule::new(4, CentralLeft, 5, Forbids),
            Rule::new(5, Cooccur, 0, Requires),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes == 0 {
            return fail("the generator needs at least one class".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return fail(format!(
                "objects per image range {}..={} is invalid",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max) {
            return fail(format!("box size range {}..{} is invalid", self.box_min, self.box_max));
        }
        if self.box_max > self.image_width.min(self.image_height) {
            return fail("boxes larger than the image".into());
        }
        for (name, p) in [("label_noise", self.label_noise), ("mislabel_fraction", self.mislabel_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return fail(format!("background_fraction {} outside [0, 1)", self.background_fraction));
        }
        for r in &self.rules {
            let worst = r.subject.max(r.object);
            if worst >= self.classes {
                return fail(format!(
                    "rule references class {worst} but only {} classes are configured",
                    self.classes
                ));
            }
        }
        Ok(())
    }

    /// Whether `class` is a rule-consistent label for detection `idx`, given
    /// the current labels of the other detections.
    pub fn label_holds(&self, dets: &[Detection], idx: usize, class: usize) -> bool {
        let cfg = RelationConfig::all();
        let reference = &dets[idx].bbox;
        self.rules.iter().filter(|r| r.subject == class).all(|rule| {
            let found = dets.iter().enumerate().any(|(j, d)| {
                j != idx
                    && d.class_id == rule.object
                    && relation_bits(reference, &d.bbox, &cfg).get(rule.relation)
            });
            match rule.effect {
                Effect::Requires => found,
                Effect::Forbids => !found,
            }
        })
    }

    fn has_rules(&self, class: usize) -> bool {
        self.rules.iter().any(|r| r.subject == class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// A real object under its true label.
    Object,
    /// A real object under a planted wrong label.
    Mislabeled,
    /// A false positive on background.
    Background,
}

/// What the generator knows about one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionTruth {
    pub kind: Kind,
    /// The real object's class; `None` for background.
    pub true_class: Option<usize>,
    /// Whether the emitted label has a matching ground truth.
    pub correct: bool,
}

impl DetectionTruth {
    pub fn mislabeled(&self) -> bool {
        self.kind == Kind::Mislabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: usize,
    pub detections: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub mislabeled: usize,
    pub background: usize,
    /// All detections share one correctness value, so AUC is undefined.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub bundle: DatasetBundle,
    /// Aligned with `bundle.detections`.
    pub truth: BTreeMap<u64, Vec<DetectionTruth>>,
    pub summary: SynthSummary,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bundle = DatasetBundle {
        vocab: ClassVocabulary::synthetic(spec.classes),
        images: BTreeMap::new(),
        ground_truth: BTreeMap::new(),
        detections: BTreeMap::new(),
    };
    let mut truth = BTreeMap::new();
    let mut owed = Owed::default();
    for k in 0..spec.images {
        let image_id = spec.first_image_id + k as u64;
        let (dets, facts) = scene(spec, image_id, &mut owed, &mut rng);
        let gts = dets
            .iter()
            .zip(&facts)
            .filter_map(|(d, t)| {
                let class_id = match t.kind {
                    Kind::Mislabeled => t.true_class,
                    _ if t.correct => Some(t.true_class.unwrap_or(d.class_id)),
                    _ => None,
                }?;
                Some(GroundTruth {
                    image_id,
                    class_id,
                    bbox: d.bbox,
                })
            })
            .collect();
        bundle.images.insert(
            image_id,
            ImageInfo {
                id: image_id,
                file_name: format!("synthetic_{image_id:06}.png"),
                width: spec.image_width,
                height: spec.image_height,
            },
        );
        bundle.ground_truth.insert(image_id, gts);
        bundle.detections.insert(image_id, dets);
        truth.insert(image_id, facts);
    }
    let facts: Vec<&DetectionTruth> = truth.values().flatten().collect();
    let correct = facts.iter().filter(|t| t.correct).count();
    let detections = facts.len();
    let summary = SynthSummary {
        images: spec.images,
        detections,
        correct,
        incorrect: detections - correct,
        mislabeled: facts.iter().filter(|t| t.kind == Kind::Mislabeled).count(),
        background: facts.iter().filter(|t| t.kind == Kind::Background).count(),
        degenerate: correct == 0 || correct == detections,
    };
    if summary.degenerate {
        log::warn!("synthetic set has a single correctness class; AUC is undefined");
    }
    Ok(SynthOutput {
        bundle,
        truth,
        summary,
    })
}

/// Shortfalls of earlier scenes, carried forward so the dataset-level
/// fractions come out on target.
#[derive(Default)]
struct Owed {
    background: f64,
    mislabels: f64,
}

fn stochastic_round(x: f64, rng: &mut ChaCha8Rng) -> usize {
    let x = x.max(0.0);
    x.floor() as usize + usize::from(rng.gen_bool(x - x.floor()))
}

fn random_box(spec: &SynthSpec, taken: &[Detection], rng: &mut ChaCha8Rng) -> Option<BBox> {
    for _ in 0..PLACEMENT_TRIES {
        let w = rng.gen_range(spec.box_min..=spec.box_max).round();
        let h = rng.gen_range(spec.box_min..=spec.box_max).round();
        let x = rng.gen_range(0.0..=spec.image_width - w).round();
        let y = rng.gen_range(0.0..=spec.image_height - h).round();
        let b = BBox::new(x, y, w, h).expect("sizes are positive");
        if taken.iter().all(|o| iou(&b, &o.bbox) < MAX_SCENE_IOU) {
            return Some(b);
        }
    }
    None
}

/// Real objects labeled so that every rule holds among them alone.
fn real_objects(spec: &SynthSpec, image_id: u64, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut dets = Vec::with_capacity(n);
    for _ in 0..n {
        if let Some(b) = random_box(spec, &dets, rng) {
            dets.push(Detection::new(image_id, rng.gen_range(0..spec.classes), b, 0.0));
        }
    }
    let failing = |dets: &[Detection]| -> Vec<usize> {
        (0..dets.len())
            .filter(|&i| !spec.label_holds(dets, i, dets[i].class_id))
            .collect()
    };
    for _ in 0..REPAIR_SWEEPS {
        let bad = failing(&dets);
        if bad.is_empty() {
            break;
        }
        for i in bad {
            let options: Vec<usize> = (0..spec.classes).filter(|&c| spec.label_holds(&dets, i, c)).collect();
            if let Some(&c) = options.choose(rng) {
                dets[i].class_id = c;
            }
        }
    }
    while let Some(&i) = failing(&dets).first() {
        dets.remove(i);
    }
    dets
}

/// Objects satisfy their rules, background and planted labels break theirs,
/// and every planted object's true label still holds.
fn consistent(spec: &SynthSpec, dets: &[Detection], kinds: &[Kind], true_class: &[usize]) -> bool {
    (0..dets.len()).all(|i| {
        let holds = spec.label_holds(dets, i, dets[i].class_id);
        match kinds[i] {
            Kind::Object => holds,
            Kind::Background => !holds,
            Kind::Mislabeled => !holds && spec.label_holds(dets, i, true_class[i]),
        }
    })
}

fn scene(
    spec: &SynthSpec,
    image_id: u64,
    owed: &mut Owed,
    rng: &mut ChaCha8Rng,
) -> (Vec<Detection>, Vec<DetectionTruth>) {
    let mut dets = real_objects(spec, image_id, rng);
    let mut kinds = vec![Kind::Object; dets.len()];
    let mut true_class: Vec<usize> = dets.iter().map(|d| d.class_id).collect();

    if spec.background_fraction > 0.0 {
        let r = spec.background_fraction;
        let expected = r / (1.0 - r) * dets.len() as f64 + owed.background;
        let target = stochastic_round(expected, rng);
        let mut added = 0;
        'add: for _ in 0..target {
            for _ in 0..BACKGROUND_TRIES {
                let Some(b) = random_box(spec, &dets, rng) else { break 'add };
                dets.push(Detection::new(image_id, 0, b, 0.0));
                kinds.push(Kind::Background);
                true_class.push(0);
                let mut classes: Vec<usize> = (0..spec.classes).collect();
                classes.shuffle(rng);
                let last = dets.len() - 1;
                for c in classes {
                    dets[last].class_id = c;
                    true_class[last] = c;
                    if consistent(spec, &dets, &kinds, &true_class) {
                        added += 1;
                        continue 'add;
                    }
                }
                dets.pop();
                kinds.pop();
                true_class.pop();
            }
        }
        owed.background = expected - added as f64;
    }

    if spec.mislabel_fraction > 0.0 {
        let expected = spec.mislabel_fraction * dets.len() as f64 + owed.mislabels;
        let target = stochastic_round(expected, rng);
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| kinds[i] == Kind::Object).collect();
        order.shuffle(rng);
        let mut planted = 0;
        for i in order {
            if planted == target {
                break;
            }
            let mut wrong: Vec<usize> = (0..spec.classes)
                .filter(|&c| c != true_class[i] && spec.has_rules(c))
                .collect();
            wrong.shuffle(rng);
            kinds[i] = Kind::Mislabeled;
            let found = wrong.into_iter().any(|c| {
                dets[i].class_id = c;
                consistent(spec, &dets, &kinds, &true_class)
            });
            if found {
                planted += 1;
            } else {
                dets[i].class_id = true_class[i];
                kinds[i] = Kind::Object;
            }
        }
        owed.mislabels = expected - planted as f64;
    }

    let facts: Vec<DetectionTruth> = (0..dets.len())
        .map(|i| match kinds[i] {
            Kind::Object => DetectionTruth {
                kind: Kind::Object,
                true_class: Some(true_class[i]),
                correct: !rng.gen_bool(spec.label_noise),
            },
            Kind::Background => DetectionTruth {
                kind: Kind::Background,
                true_class: None,
                correct: rng.gen_bool(spec.label_noise),
            },
            Kind::Mislabeled => DetectionTruth {
                kind: Kind::Mislabeled,
                true_class: Some(true_class[i]),
                correct: false,
            },
        })
        .collect();

    // Alternatives in the detector top-5: anything for real objects; for
    // background and planted labels, only classes that fit no better.
    let fillers: Vec<Vec<usize>> = (0..dets.len())
        .map(|i| {
            let label = dets[i].class_id;
            let mut others: Vec<usize> = match kinds[i] {
                Kind::Object => (0..spec.classes).filter(|&c| c != label).collect(),
                _ => (0..spec.classes)
                    .filter(|&c| c != label && c != true_class[i])
                    .filter(|&c| !spec.label_holds(&dets, i, c))
                    .collect(),
            };
            others.shuffle(rng);
            others.truncate(if kinds[i] == Kind::Mislabeled { 3 } else { 4 });
            others
        })
        .collect();

    for (i, d) in dets.iter_mut().enumerate() {
        let t = facts[i];
        // both outcomes cover [0.5, 1); correct ones lean high half the time
        let conf = if t.correct && rng.gen_bool(0.5) {
            rng.gen_range(0.7..1.0)
        } else {
            rng.gen_range(0.5..1.0)
        };
        d.confidence = conf;
        let mut top = vec![(d.class_id, conf)];
        let mut s = conf;
        if t.kind == Kind::Mislabeled {
            s = 0.5 + (conf - 0.5) * rng.gen_range(0.7..1.0);
            top.push((true_class[i], s));
        }
        for &c in &fillers[i] {
            s *= rng.gen_range(0.5..0.9);
            top.push((c, s));
        }
        d.top5 = Some(top);
    }
    (dets, facts)
}
