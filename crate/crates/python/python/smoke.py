"""Smoke test for the `tas` extension module.

Build and install first, e.g. `maturin develop --release` in crates/python,
then run `python python/smoke.py [CHECKPOINT_DIR]`. With a checkpoint trained
on the default synthetic dataset, inference is exercised too.
"""

import math
import sys
import tempfile

import tas


def main():
    probs = [[0.9, 0.05], [0.8, 0.1], [0.1, 0.8]]
    labels, durations, score = tas.viterbi_align(probs, [0, 1])
    assert labels == [0, 0, 1], labels
    assert durations == [2, 1], durations
    assert math.isclose(score, math.log(0.9) + math.log(0.8) + math.log(0.8))

    gt = [0, 0, 1, 1, 1, 2, 0]
    assert tas.frame_accuracy(gt, gt) == 100.0
    assert tas.edit_score([0, 1], [0]) == 50.0
    assert tas.f1_at(gt, gt, 0.5) == 100.0
    report = tas.evaluate([gt], [gt])
    assert all(v == 100.0 for v in report.values()), report

    rows = tas.categorical_label_smooth([0, 2], 0.1, 3)
    assert all(math.isclose(sum(r), 1.0) for r in rows)
    assert tas.temporal_label_smooth([4] * 10, 3, seed=1) == [4] * 10

    with tempfile.TemporaryDirectory() as root:
        videos = tas.synth(seed=7, out=root)
        assert len(videos) == 25 and len(videos[0]["features"][0]) == 16
        assert [v["id"] for v in videos] == [v["id"] for v in tas.synth(seed=7)]

    try:
        tas.viterbi_align(probs, [0, 1, 0, 1])
    except ValueError as e:
        assert "infeasible" in str(e)
    else:
        raise AssertionError("expected an infeasible alignment error")

    if len(sys.argv) > 1:
        model = tas.Model.load(sys.argv[1])
        video = tas.synth(seed=7)[-1]
        out = model.predict(video["features"])
        assert len(out["labels"]) == len(video["labels"])
        assert all(0 <= c < model.num_classes for c in out["transcript"])
        print("val accuracy of one video: %.1f" % tas.frame_accuracy(out["labels"], video["labels"]))
    print("tas smoke test passed")


if __name__ == "__main__":
    main()
