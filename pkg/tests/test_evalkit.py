import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yoss.datamodel import BoundingBox, Detection, ValidationError, read_manifest
from yoss.evalkit import (
    METRICS_SCHEMA,
    LeakageError,
    average_precision,
    cap_predictions,
    check_holdout_leakage,
    coco_eval,
    lvis_eval,
    match_detections,
    retrieval_recall,
    retrieval_recall_folds,
    write_report,
)
from yoss.grounding import nms, read_predictions, write_predictions

from conftest import tiny_config
from oracles import (
    ap_oracle,
    cap_oracle,
    check_metric_oracles,
    match_oracle,
    nms_oracle,
    perfect_predictions,
    random_boxes,
    random_detections,
    recall_oracle,
)


# ---------------------------------------------------------------------------
# oracles


def test_all_metric_oracles_agree():
    assert check_metric_oracles(200, seed=1) == {k: 0 for k in ("average_precision", "match_detections", "nms", "retrieval_recall")}


@settings(max_examples=60, deadline=None)
@given(flags=st.lists(st.booleans(), max_size=10), extra=st.integers(0, 5))
def test_average_precision_oracle(flags, extra):
    n_gt = sum(flags) + extra
    assert average_precision(flags, n_gt) == ap_oracle(flags, n_gt)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 10), m=st.integers(0, 10))
def test_match_oracle(seed, n, m):
    rng = np.random.default_rng(seed)
    p, g = random_boxes(rng, n), random_boxes(rng, m)
    scores = np.sort(rng.random(n))[::-1]
    assert list(match_detections(p, scores, g, 0.3)) == match_oracle(p.tolist(), g.tolist(), 0.3)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 10), cap=st.integers(1, 10))
def test_nms_oracle(seed, n, cap):
    dets = random_detections(np.random.default_rng(seed), n)
    assert nms(dets, 0.5, cap) == nms_oracle(dets, 0.5, cap)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 20))
def test_retrieval_oracle(seed, b):
    sim = np.random.default_rng(seed).integers(-2, 3, size=(b, b)).astype(float)
    r = retrieval_recall(sim)
    assert (r.audio_to_image, r.image_to_audio) == recall_oracle(sim.tolist())


# ---------------------------------------------------------------------------
# closed forms


def test_ap_closed_forms():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, False], 2) == 0.0
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    # one TP at rank 2 of 1 GT: precision 1/2 at every recall point
    assert average_precision([False, True], 1) == pytest.approx(0.5)
    # half recall at precision 1: grid points 0..50
    assert average_precision([True], 2) == 51 / 101


def test_match_requires_sorted_scores():
    with pytest.raises(ValidationError, match="sorted"):
        match_detections(np.zeros((2, 4)) + [0, 0, 1, 1], [0.1, 0.9], np.zeros((0, 4)), 0.5)


def test_match_prefers_highest_iou_and_is_one_to_one():
    gt = np.array([[0, 0, 10, 10], [0, 0, 11, 10]], float)
    pred = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10]], float)
    assert list(match_detections(pred, [0.9, 0.8, 0.7], gt, 0.5)) == [True, True, False]


def test_retrieval_identity_and_folds():
    r = retrieval_recall(np.eye(5))
    assert r.audio_to_image[1] == 1.0 and r.image_to_audio[1] == 1.0
    # all-equal similarities: only the first pair ranks first
    r = retrieval_recall(np.zeros((4, 4)))
    assert r.audio_to_image[1] == 0.25
    e = np.eye(7)
    folds = retrieval_recall_folds(e, e, fold=3)
    assert folds.audio_to_image[1] == 1.0
    with pytest.raises(ValidationError):
        retrieval_recall(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# detection eval on a corpus


@pytest.fixture(scope="module")
def pair_corpus(tmp_path_factory):
    from yoss.synthdata import generate_corpus

    root = generate_corpus(tiny_config(objects_per_image=(2, 2), n_val=8), tmp_path_factory.mktemp("pairs") / "c")
    val, vocab = read_manifest(root, "val")
    return root, val, vocab


def test_perfect_predictions_score_one(pair_corpus):
    _, val, vocab = pair_corpus
    res = coco_eval(perfect_predictions(val), val)
    assert res.AP == 1.0 and res.AP50 == 1.0 and res.AP75 == 1.0


@pytest.mark.parametrize("cap", [1, 2, 1000])
def test_lvis_cap_matches_oracle(pair_corpus, cap):
    _, val, vocab = pair_corpus
    preds = perfect_predictions(val)
    res = lvis_eval(preds, val, vocab, max_predictions=cap)
    want = cap_oracle(val, cap)
    assert res.AP == pytest.approx(want["AP"], abs=1e-12)
    for c, ap in want["per_class"].items():
        assert res.per_class[c]["AP"] == pytest.approx(ap, abs=1e-12)
        assert res.per_class[c]["R50"] == want["recall"][c]
    assert res.R50 == pytest.approx(want["R50"], abs=1e-12)
    capped = cap_predictions(preds, cap)
    assert sum(len(v) for v in capped.values()) == min(cap, 2) * len(val)


def test_lvis_buckets_and_unknown_image(pair_corpus):
    _, val, vocab = pair_corpus
    res = lvis_eval(perfect_predictions(val), val, vocab)
    assert {res.AP_r, res.AP_c, res.AP_f} - {None} <= {1.0}
    with pytest.raises(ValidationError, match="image id"):
        coco_eval({"nope": []}, val)


def test_leakage_check(tiny_corpus):
    train, vocab = read_manifest(tiny_corpus, "train")
    check_holdout_leakage(train, vocab.unseen_ids)
    some = train[0].objects[0].class_id
    with pytest.raises(LeakageError):
        check_holdout_leakage(train, [some])


def test_predictions_roundtrip_and_report_schema(tmp_path, pair_corpus):
    _, val, _ = pair_corpus
    preds = perfect_predictions(val)
    write_predictions(tmp_path / "p.jsonl", preds)
    assert read_predictions(tmp_path / "p.jsonl") == preds
    (tmp_path / "bad.jsonl").write_text('{"image_id": "a", "detections": [{"box": [0, 0, 1]}]}\n')
    with pytest.raises(ValidationError, match="line 1"):
        read_predictions(tmp_path / "bad.jsonl")

    rep = write_report(tmp_path / "m.json", "coco", coco_eval(preds, val).to_json(), max_predictions=100)
    jsonschema.validate(json.loads((tmp_path / "m.json").read_text()), METRICS_SCHEMA)
    assert rep["metrics"]["AP"] == 1.0


def test_nms_suppresses_same_class_only():
    b = BoundingBox(0, 0, 10, 10)
    dets = [Detection(b, 0, 0.9), Detection(b, 0, 0.8), Detection(b, 1, 0.7)]
    assert nms(dets, 0.6) == [dets[0], dets[2]]
    assert nms(dets, 0.6, max_predictions=1) == [dets[0]]
