"""Retrieval recall, COCO-style AP and LVIS-style bucketed AP."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import BUCKETS, ClassVocab, Detection, GroundingSample, ValidationError, atomic_write_text
from .grounding import pairwise_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2).tolist())
RECALL_GRID = np.arange(101) / 100.0


class LeakageError(RuntimeError):
    """Held-out classes were found in a training split."""


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True)
class RetrievalResult:
    audio_to_image: dict[int, float]
    image_to_audio: dict[int, float]

    def flat(self) -> dict[str, float]:
        out = {f"a2i_R@{k}": v for k, v in self.audio_to_image.items()}
        out.update({f"i2a_R@{k}": v for k, v in self.image_to_audio.items()})
        return out


def diagonal_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of ``sim[j, j]`` within row ``j``; ties go to lower index."""
    sim = np.asarray(sim, dtype=np.float64)
    diag = np.diag(sim)[:, None]
    cols = np.arange(sim.shape[1])[None, :]
    rows = np.arange(sim.shape[0])[:, None]
    return ((sim > diag) | ((sim == diag) & (cols < rows))).sum(1)


def retrieval_recall(sim: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    """R@k in both directions for a square similarity matrix.

    Rows are audio queries, columns images; the true match is the diagonal.
    Image-to-audio ranks each column.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise ValidationError(f"similarity: expected a non-empty square matrix, got {sim.shape}")
    a2i = diagonal_ranks(sim)
    i2a = diagonal_ranks(sim.T)
    return RetrievalResult(
        {k: float(np.mean(a2i < k)) for k in ks},
        {k: float(np.mean(i2a < k)) for k in ks},
    )


def retrieval_recall_folds(e_a: np.ndarray, e_i: np.ndarray, fold: int, ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    """Average R@k over consecutive galleries of ``fold`` pairs.

    A trailing partial fold is merged into the previous one.
    """
    n = e_a.shape[0]
    if n == 0:
        raise ValidationError("retrieval: no pairs")
    fold = max(1, min(fold, n))
    starts = list(range(0, n - fold + 1, fold))
    bounds = [(s, s + fold) for s in starts]
    bounds[-1] = (bounds[-1][0], n)
    a2i = {k: 0.0 for k in ks}
    i2a = {k: 0.0 for k in ks}
    for lo, hi in bounds:
        r = retrieval_recall(e_a[lo:hi] @ e_i[lo:hi].T, ks)
        for k in ks:
            a2i[k] += r.audio_to_image[k] * (hi - lo) / n
            i2a[k] += r.image_to_audio[k] * (hi - lo) / n
    return RetrievalResult(a2i, i2a)


# ---------------------------------------------------------------------------
# matching and AP


def match_detections(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
) -> np.ndarray:
    """Greedy one-to-one matching of score-sorted predictions (one class, one image).

    Each prediction takes the highest-IoU still-unmatched GT with
    IoU >= ``iou_threshold`` (ties: lower GT index). Returns TP flags.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    if np.any(np.diff(pred_scores) > 0):
        raise ValidationError("predictions: must be sorted by score descending")
    n_pred = pred_scores.size
    flags = np.zeros(n_pred, dtype=bool)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if n_pred == 0 or gt_boxes.shape[0] == 0:
        return flags
    ious = pairwise_iou(pred_boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for p in range(n_pred):
        cand = np.where(taken, -1.0, ious[p])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            flags[p] = True
            taken[g] = True
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> float | None:
    """101-point interpolated AP of a score-ordered TP/FP sequence.

    Returns None when the class has no ground truth (excluded from means).
    """
    if n_gt == 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    recall = tp / n_gt
    precision = tp / np.arange(1, flags.size + 1)
    # running max from the right gives the interpolated precision envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(pos < flags.size, envelope[np.minimum(pos, flags.size - 1)], 0.0)
    # exactly rounded sum so results do not depend on summation order
    return math.fsum(vals.tolist()) / RECALL_GRID.size


# ---------------------------------------------------------------------------
# detection evaluation


@dataclass
class DetectionEvalResult:
    AP: float | None
    AP50: float | None
    AP75: float | None
    AP_r: float | None = None
    AP_c: float | None = None
    AP_f: float | None = None
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    n_classes: int = 0
    R50: float | None = None  # class-mean final recall at IoU 0.5

    def to_json(self) -> dict:
        out = {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75, "R50": self.R50, "n_classes": self.n_classes}
        for k in ("AP_r", "AP_c", "AP_f"):
            out[k] = getattr(self, k)
        out["per_class"] = {str(k): v for k, v in sorted(self.per_class.items())}
        return out


def _gt_by_image(gt: Sequence[GroundingSample]) -> dict[str, list[tuple[list[float], int]]]:
    return {s.sample_id: [(o.box.as_list(), o.class_id) for o in s.objects] for s in gt}


def cap_predictions(preds: Mapping[str, Sequence[Detection]], max_predictions: int | None) -> dict[str, list[Detection]]:
    out = {}
    for image_id, dets in preds.items():
        order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
        if max_predictions is not None:
            order = order[:max_predictions]
        out[image_id] = [dets[k] for k in order]
    return out


def per_class_ap(
    preds: Mapping[str, Sequence[Detection]],
    gt: Sequence[GroundingSample],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    classes: Sequence[int] | None = None,
) -> dict[int, dict[float, float]]:
    """AP per (class, IoU threshold) for classes that have ground truth."""
    return _class_tables(preds, gt, iou_thresholds, classes)[0]


def _class_tables(preds, gt, iou_thresholds, classes=None):
    """Per (class, IoU threshold) AP and final recall."""
    gts = _gt_by_image(gt)
    unknown = set(preds) - set(gts)
    if unknown:
        raise ValidationError(f"predictions: unknown image id {sorted(unknown)[0]!r}")
    gt_classes = sorted({c for objs in gts.values() for _, c in objs})
    if classes is not None:
        gt_classes = [c for c in gt_classes if c in set(classes)]
    image_ids = list(gts)
    out: dict[int, dict[float, float]] = {}
    rec: dict[int, dict[float, float]] = {}
    for c in gt_classes:
        n_gt = sum(1 for objs in gts.values() for _, k in objs if k == c)
        # gather this class's predictions across images in global score order
        entries = []
        for order_img, image_id in enumerate(image_ids):
            for k, d in enumerate(preds.get(image_id, ())):
                if d.class_id == c:
                    entries.append((-d.score, order_img, k, image_id, d))
        entries.sort(key=lambda e: e[:3])
        out[c], rec[c] = {}, {}
        for thr in iou_thresholds:
            flags = np.zeros(len(entries), dtype=bool)
            by_image: dict[str, list[int]] = {}
            for pos, e in enumerate(entries):
                by_image.setdefault(e[3], []).append(pos)
            for image_id, positions in by_image.items():
                g = np.array([b for b, k in gts[image_id] if k == c]).reshape(-1, 4)
                boxes = np.array([entries[p][4].box.as_list() for p in positions])
                scores = np.array([entries[p][4].score for p in positions])
                flags[positions] = match_detections(boxes, scores, g, thr)
            out[c][thr] = average_precision(flags, n_gt)
            rec[c][thr] = float(flags.sum()) / n_gt
    return out, rec


def _mean(vals) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(
    table: Mapping[int, Mapping[float, float]],
    classes: Sequence[int] | None = None,
    recall: Mapping[int, Mapping[float, float]] | None = None,
) -> DetectionEvalResult:
    keys = sorted(table) if classes is None else [c for c in sorted(table) if c in set(classes)]
    if not keys:
        return DetectionEvalResult(None, None, None)
    per_class = {c: {"AP": _mean(table[c].values()), "AP50": table[c][0.5], "AP75": table[c][0.75]} for c in keys}
    if recall is not None:
        for c in keys:
            per_class[c]["R50"] = recall[c][0.5]
    return DetectionEvalResult(
        _mean(per_class[c]["AP"] for c in keys),
        _mean(per_class[c]["AP50"] for c in keys),
        _mean(per_class[c]["AP75"] for c in keys),
        per_class=per_class,
        n_classes=len(keys),
        R50=None if recall is None else _mean(recall[c][0.5] for c in keys),
    )


def coco_eval(
    preds: Mapping[str, Sequence[Detection]] | str | os.PathLike,
    gt: Sequence[GroundingSample],
    classes: Sequence[int] | None = None,
    max_predictions: int | None = 100,
) -> DetectionEvalResult:
    """AP averaged over IoU 0.50:0.05:0.95 and classes, plus AP50 / AP75."""
    if not isinstance(preds, Mapping):
        from .grounding import read_predictions

        preds = read_predictions(preds)
    missing = set(preds) - {s.sample_id for s in gt}
    if missing:
        raise ValidationError(f"predictions: image id {sorted(missing)[0]!r} not in ground truth")
    table, recall = _class_tables(cap_predictions(preds, max_predictions), gt, IOU_THRESHOLDS, classes)
    return summarize(table, recall=recall)


def lvis_eval(
    preds: Mapping[str, Sequence[Detection]] | str | os.PathLike,
    gt: Sequence[GroundingSample],
    vocab: ClassVocab,
    max_predictions: int = 1000,
) -> DetectionEvalResult:
    """COCO-style AP with a per-image prediction cap and rare/common/frequent buckets."""
    if any(e.bucket is None for e in vocab.entries):
        raise ValidationError("vocab: missing frequency bucket labels")
    res = coco_eval(preds, gt, max_predictions=max_predictions)
    for bucket, attr in zip(BUCKETS, ("AP_r", "AP_c", "AP_f")):
        ids = [c for c in res.per_class if vocab[c].bucket == bucket]
        setattr(res, attr, _mean(res.per_class[c]["AP"] for c in ids))
    return res


# ---------------------------------------------------------------------------
# zero-shot protocol


def check_holdout_leakage(train: Sequence[GroundingSample], holdout: Sequence[int]) -> None:
    bad = sorted({o.class_id for s in train for o in s.objects} & set(holdout))
    if bad:
        raise LeakageError(f"held-out classes {bad} occur in the training split")


def predict_split(model, samples: Sequence[GroundingSample], vocab: ClassVocab, score_threshold: float = 0.05,
                  max_predictions: int = 100, iou_threshold: float = 0.6, class_ids: Sequence[int] | None = None,
                  class_emb=None) -> dict[str, list[Detection]]:
    """Run the detector over a split with spoken prompts for ``class_ids`` (default all)."""
    import torch

    from .encoders import images_to_tensor
    from .grounding import class_embeddings, detect

    ids = list(range(len(vocab))) if class_ids is None else list(class_ids)
    if class_emb is None:
        class_emb = class_embeddings(vocab, model.speech, class_ids=ids)
    out = {}
    with torch.no_grad():
        for start in range(0, len(samples), 64):
            chunk = samples[start : start + 64]
            _, pyr = model.image(images_to_tensor([s.image for s in chunk]))
            for k, s in enumerate(chunk):
                out[s.sample_id] = detect(
                    None, class_emb, model.head, model.image, score_threshold, iou_threshold,
                    max_predictions, ids, pyramid=pyr.select(slice(k, k + 1)),
                )
    return out


@dataclass
class ZeroShotResult:
    seen: DetectionEvalResult
    heldout: DetectionEvalResult | None
    excluded: list[int]

    def to_json(self) -> dict:
        return {
            "seen": self.seen.to_json(),
            "heldout": None if self.heldout is None else self.heldout.to_json(),
            "excluded_heldout": self.excluded,
        }


def zero_shot_protocol(
    model,
    manifest: str | os.PathLike,
    holdout: Sequence[int] | None = None,
    score_threshold: float = 0.05,
    max_predictions: int = 100,
    predictions: Mapping[str, Sequence[Detection]] | None = None,
) -> ZeroShotResult:
    """Prompt with ALL classes, evaluate seen and held-out groups separately."""
    from .datamodel import read_manifest

    train, vocab = read_manifest(manifest, "train")
    val, _ = read_manifest(manifest, "val")
    holdout = vocab.unseen_ids if holdout is None else list(holdout)
    check_holdout_leakage(train, holdout)
    if predictions is None:
        predictions = predict_split(model, val, vocab, score_threshold, max_predictions)
    table, recall = _class_tables(cap_predictions(predictions, max_predictions), val, IOU_THRESHOLDS)
    present = set(table)
    excluded = [c for c in holdout if c not in present]
    seen_ids = [c for c in present if c not in set(holdout)]
    held_ids = [c for c in holdout if c in present]
    return ZeroShotResult(
        summarize(table, seen_ids, recall), summarize(table, held_ids, recall) if held_ids else None, excluded
    )


# ---------------------------------------------------------------------------
# report

METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["mode", "metrics"],
    "properties": {
        "mode": {"enum": ["retrieval", "coco", "lvis", "zeroshot"]},
        "max_predictions": {"type": ["integer", "null"]},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "anyOf": [
                    {"type": "number", "minimum": 0, "maximum": 1},
                    {"type": "null"},
                    {"type": "integer"},
                    {"type": "object"},
                    {"type": "array", "items": {"type": "integer"}},
                ]
            },
        },
    },
}


def write_report(path: str | os.PathLike, mode: str, metrics: Mapping, **extra) -> dict:
    report = {"mode": mode, "metrics": dict(metrics), **extra}
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
