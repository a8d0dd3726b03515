"""Smoke test of the Python bindings: build with
`maturin develop -m crates/python/Cargo.toml --release`, then run this file."""

import json
import sys
import tempfile
from pathlib import Path

import ctxscore


def main() -> int:
    a = ctxscore.BBox(0, 0, 10, 10)
    b = ctxscore.BBox(5, 0, 10, 10)
    assert abs(ctxscore.iou(a, b) - 50 / 150) < 1e-12
    bits = ctxscore.relation_bits(a, b)
    assert len(bits) == 16 and bits["cooccur"] and bits["central_left"] and not bits["boundary_left"]
    assert ctxscore.feature_length(80) == 1281
    assert ctxscore.feature_length(80, ["cooccurrence"]) == 81
    assert ctxscore.auc([0.9, 0.1], [True, False]) == 1.0
    assert ctxscore.f1(1, 1, 0)[2] == 2 / 3

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        images, dets, correct, _ = ctxscore.synth(tmp / "train", images=150, seed=1)
        assert images == 150 and 0 < correct < dets
        ctxscore.synth(tmp / "test", images=60, seed=2, first_image_id=10_000)
        model = ctxscore.train(
            tmp / "train" / "annotations.json",
            tmp / "train" / "detections.json",
            hidden=16,
            validation_fraction=0.0,
        )
        assert model.feature_length == 6 * 16 + 1
        model.save(tmp / "model.json")
        again = ctxscore.ContextModel.load(tmp / "model.json")
        assert again.to_json() == model.to_json()

        scores = model.score_scene([(0, (10, 10, 50, 50), 0.9), (1, (200, 100, 40, 80), 0.8)])
        assert len(scores) == 2 and all(0 <= s <= 1 for s in scores)

        ann, det = tmp / "test" / "annotations.json", tmp / "test" / "detections.json"
        reports = {
            mode: ctxscore.evaluate_files(ann, det, mode=mode, model=None if mode == "detector" else model)
            for mode in ("detector", "rescore", "relabel")
        }
        print(json.dumps({m: round(r["auc"], 4) for m, r in reports.items()}))
        assert reports["rescore"]["auc"] > reports["detector"]["auc"]
        try:
            ctxscore.evaluate_files(ann, det, mode="rescore")
        except ValueError:
            pass
        else:
            raise AssertionError("rescore without a model must fail")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
