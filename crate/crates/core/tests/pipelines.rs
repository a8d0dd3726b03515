use std::path::PathBuf;
use std::sync::OnceLock;

use ctxscore::coco;
use ctxscore::pipelines::{relabel_scene, rescore_scene, RelabelStatus, SceneDetections};
use ctxscore::synth::{synth_generate, SynthSpec};
use ctxscore::{build_training_set, BBox, ContextModel, Detection, RelationConfig, TrainConfig};
use proptest::prelude::*;

const CLASSES: usize = 6;

fn model() -> &'static ContextModel {
    static MODEL: OnceLock<ContextModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = synth_generate(&SynthSpec {
            images: 300,
            seed: 31,
            ..SynthSpec::default()
        })
        .unwrap()
        .bundle;
        let rel = RelationConfig::all();
        let set = build_training_set(&data.detections, &data.ground_truth, &rel, &data.vocab).unwrap();
        let cfg = TrainConfig {
            hidden: 32,
            max_epochs: 400,
            validation_fraction: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        ContextModel::train(&set, &data.vocab, &rel, &cfg).unwrap().0
    })
}

fn det(class_id: usize, x: f64, y: f64, w: f64, h: f64, confidence: f64) -> Detection {
    Detection::new(1, class_id, BBox::new(x, y, w, h).unwrap(), confidence)
}

#[test]
fn broken_rule_lowers_the_score() {
    // Class 0 requires a class 1 in the same image.
    let with = vec![det(0, 20.0, 20.0, 80.0, 80.0, 0.8), det(1, 400.0, 300.0, 80.0, 80.0, 0.8)];
    let without = vec![det(0, 20.0, 20.0, 80.0, 80.0, 0.8), det(4, 400.0, 300.0, 80.0, 80.0, 0.8)];
    let kept = model().score_scene(&with).unwrap()[0];
    let broken = model().score_scene(&without).unwrap()[0];
    assert!(kept > broken + 0.2, "with rule {kept}, without {broken}");
}

fn arb_scene() -> impl Strategy<Value = Vec<Detection>> {
    let one = (
        0..CLASSES,
        0.0f64..500.0,
        0.0f64..380.0,
        10.0f64..140.0,
        10.0f64..100.0,
        0.5f64..1.0,
        proptest::collection::vec(0.0f64..1.0, CLASSES),
    )
        .prop_map(|(c, x, y, w, h, conf, raw)| {
            let mut top: Vec<(usize, f64)> = raw.into_iter().enumerate().collect();
            top[c].1 = 2.0;
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            top.truncate(5);
            top[0].1 = conf;
            let mut prev = conf;
            for entry in &mut top[1..] {
                entry.1 = entry.1.min(prev);
                prev = entry.1;
            }
            det(c, x, y, w, h, conf).with_top5(top)
        });
    proptest::collection::vec(one, 0..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn final_labels_come_from_the_top5(dets in arb_scene(), t in 0.0f64..0.99) {
        let scene = SceneDetections::new(1, 0.5, dets.clone());
        let out = relabel_scene(model(), &scene, t).unwrap();
        prop_assert_eq!(out.records.len(), dets.len());
        for (rec, d) in out.records.iter().zip(&dets) {
            let top5 = d.top5.as_ref().unwrap();
            match rec.status {
                RelabelStatus::Removed => prop_assert!(rec.final_label.is_none()),
                _ => {
                    let label = rec.final_label.unwrap();
                    prop_assert!(label == d.class_id || top5.iter().any(|(c, _)| *c == label));
                    prop_assert!((0.0..=1.0).contains(&rec.final_score.unwrap()));
                }
            }
        }
        let kept = out.records.iter().filter(|r| r.status != RelabelStatus::Removed).count();
        prop_assert_eq!(out.scene.detections.len(), kept);
    }

    #[test]
    fn zero_threshold_relabel_is_rescore(dets in arb_scene()) {
        let scene = SceneDetections::new(1, 0.5, dets);
        let relabeled = relabel_scene(model(), &scene, 0.0).unwrap();
        let rescored = rescore_scene(model(), &scene).unwrap();
        prop_assert!(relabeled.records.iter().all(|r| r.status == RelabelStatus::Kept));
        prop_assert_eq!(relabeled.scene.detections, rescored.scene.detections);
    }

    #[test]
    fn higher_threshold_never_loads_more(a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ann, det) = files();
        let mut x = coco::load_annotations(&ann).unwrap();
        let mut y = coco::load_annotations(&ann).unwrap();
        let n_lo = coco::load_detections(&det, &mut x, lo).unwrap();
        let n_hi = coco::load_detections(&det, &mut y, hi).unwrap();
        prop_assert!(n_hi <= n_lo);
        for (id, dets) in &y.detections {
            prop_assert!(dets.iter().all(|d| d.confidence >= hi));
            prop_assert!(dets.iter().all(|d| x.detections[id].contains(d)));
        }
    }
}

fn files() -> (PathBuf, PathBuf) {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&SynthSpec {
            images: 30,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let b = &out.bundle;
        std::fs::write(dir.path().join("a.json"), coco::annotations_json(b).unwrap()).unwrap();
        let results = coco::results_json(b.detections.values().flatten(), &b.vocab).unwrap();
        std::fs::write(dir.path().join("d.json"), results).unwrap();
        dir
    });
    let p = dir.path();
    (p.join("a.json"), p.join("d.json"))
}
