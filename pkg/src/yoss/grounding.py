"""Audio-prompted detection: cross-modal logits, DFL + IoU box regression.

Cells are ordered level by level (stride 4, 8, 16), row-major inside each
level. Every cell predicts one region embedding and four side-distance
distributions over ``reg_max`` bins, in units of the level's stride.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import BoundingBox, ClassVocab, Detection, ValidationError, atomic_write_text
from .encoders import FeaturePyramid, SpeechEncoder, encode_audio

FG_CLIP_EPS = 1e-3


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class CellGrid:
    centers: np.ndarray  # (N, 2) x, y in pixels
    strides: np.ndarray  # (N,)
    level: np.ndarray  # (N,)
    shapes: tuple[tuple[int, int], ...]
    image_size: tuple[int, int]  # H, W

    def __len__(self) -> int:
        return len(self.strides)

    def level_slice(self, k: int) -> slice:
        start = sum(h * w for h, w in self.shapes[:k])
        h, w = self.shapes[k]
        return slice(start, start + h * w)


def make_grid(image_size: tuple[int, int], strides: Sequence[int] = (4, 8, 16)) -> CellGrid:
    h_img, w_img = image_size
    centers, st, lv, shapes = [], [], [], []
    for k, s in enumerate(strides):
        h, w = h_img // s, w_img // s
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        centers.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], 1))
        st.append(np.full(h * w, s, dtype=np.float64))
        lv.append(np.full(h * w, k))
        shapes.append((h, w))
    return CellGrid(np.concatenate(centers).astype(np.float64), np.concatenate(st), np.concatenate(lv), tuple(shapes), (h_img, w_img))


# ---------------------------------------------------------------------------
# head


class QueryHead(nn.Module):
    """Conv stems feeding a region-embedding and a box branch.

    A light top-down pass adds upsampled coarser features to finer ones
    before the stems, so small cells see some context. With ``shared_stem``
    one stem serves every level (RetinaNet-style), which keeps the head small.
    """

    def __init__(
        self,
        in_channels: int = 32,
        hidden: int = 32,
        embed_dim: int = 64,
        reg_max: int = 8,
        levels: int = 3,
        shared_stem: bool = True,
    ):
        super().__init__()
        self.config = dict(
            in_channels=in_channels, hidden=hidden, embed_dim=embed_dim, reg_max=reg_max, levels=levels,
            shared_stem=shared_stem,
        )
        self.reg_max = reg_max
        self.lateral = nn.ModuleList(nn.Conv2d(in_channels, hidden, 1) for _ in range(levels))
        self.stems = nn.ModuleList(
            nn.Sequential(nn.Conv2d(hidden, hidden, 3, 1, 1), nn.SiLU(), nn.Conv2d(hidden, hidden, 3, 1, 1), nn.SiLU())
            for _ in range(1 if shared_stem else levels)
        )
        self.region = nn.Conv2d(hidden, embed_dim, 1)
        self.box = nn.Conv2d(hidden, 4 * reg_max, 1)
        self.logit_scale = nn.Parameter(torch.tensor(10.0))

    def forward(self, pyr: FeaturePyramid) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(region_emb (B, N, d), box_logits (B, N, 4, reg_max))``."""
        lat = [f(x.to(self.region.weight.dtype)) for f, x in zip(self.lateral, pyr.levels)]
        for k in range(len(lat) - 2, -1, -1):
            lat[k] = lat[k] + F.interpolate(lat[k + 1], size=lat[k].shape[-2:], mode="nearest")
        regions, boxes = [], []
        for k, x in enumerate(lat):
            h = self.stems[k % len(self.stems)](x)
            b = h.shape[0]
            regions.append(self.region(h).flatten(2).transpose(1, 2))
            boxes.append(self.box(h).flatten(2).transpose(1, 2).reshape(b, -1, 4, self.reg_max))
        region = F.normalize(torch.cat(regions, 1), dim=-1)
        return region, torch.cat(boxes, 1)


def cross_modal_logits(pyr: FeaturePyramid, class_emb: torch.Tensor, head: QueryHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell class logits ``s * <region, class_emb>`` and box logits."""
    if class_emb.ndim != 2 or class_emb.shape[0] < 1:
        raise ValidationError("class_emb: need a K x d matrix with K >= 1")
    region, box_logits = head(pyr)
    if region.shape[-1] != class_emb.shape[1]:
        raise ValidationError(f"class_emb: dimension {class_emb.shape[1]} != region dimension {region.shape[-1]}")
    logits = head.logit_scale * region @ class_emb.to(region.dtype).T
    return logits, box_logits


# ---------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class TargetAssignment:
    """Per-cell targets; ``matched == -1`` marks background."""

    matched: np.ndarray  # (N,) object index or -1
    labels: np.ndarray  # (N,) logit column or -1
    ltrb: np.ndarray  # (N, 4) side distances in stride units (0 on background)
    boxes: np.ndarray  # (N, 4) matched GT box in pixels (0 on background)
    levels: tuple[int, ...]  # assigned level per object

    @property
    def foreground(self) -> np.ndarray:
        return self.matched >= 0

    @staticmethod
    def concat(items: Sequence["TargetAssignment"]) -> "TargetAssignment":
        return TargetAssignment(
            np.concatenate([t.matched for t in items]),
            np.concatenate([t.labels for t in items]),
            np.concatenate([t.ltrb for t in items]),
            np.concatenate([t.boxes for t in items]),
            tuple(l for t in items for l in t.levels),
        )


def choose_level(longest: float, strides: Sequence[int], reg_max: int) -> int:
    """Smallest stride whose size-in-units lies in ``[reg_max/4, reg_max-1]``.

    Sizes that fit no level go to the nearest one.
    """
    lo, hi = reg_max / 4, reg_max - 1
    best, best_gap = 0, float("inf")
    for k, s in enumerate(strides):
        units = longest / s
        gap = max(lo - units, units - hi, 0.0)
        if gap == 0.0:
            return k
        if gap < best_gap:
            best, best_gap = k, gap
    return best


def assign_targets(
    objects: Sequence[tuple[BoundingBox, int]],
    image_size: tuple[int, int],
    strides: Sequence[int] = (4, 8, 16),
    reg_max: int = 8,
    grid: CellGrid | None = None,
) -> TargetAssignment:
    """Centre-inside assignment on a single level per object.

    ``objects`` pairs each box with the logit column it should light up.
    Cells inside several boxes of the same level go to the smallest box.
    """
    grid = grid or make_grid(image_size, strides)
    n = len(grid)
    matched = np.full(n, -1)
    best_area = np.full(n, np.inf)
    levels = []
    for j, (box, _) in enumerate(objects):
        k = choose_level(max(box.x2 - box.x1, box.y2 - box.y1), strides, reg_max)
        levels.append(k)
        sl = grid.level_slice(k)
        cx, cy = grid.centers[sl, 0], grid.centers[sl, 1]
        inside = (cx > box.x1) & (cx < box.x2) & (cy > box.y1) & (cy < box.y2)
        idx = np.flatnonzero(inside) + sl.start
        if idx.size == 0:
            # force the cell containing the box centre
            s = strides[k]
            h, w = grid.shapes[k]
            gx = min(max(int(((box.x1 + box.x2) / 2) // s), 0), w - 1)
            gy = min(max(int(((box.y1 + box.y2) / 2) // s), 0), h - 1)
            idx = np.array([sl.start + gy * w + gx])
        area = box.area
        take = idx[area < best_area[idx]]
        matched[take] = j
        best_area[take] = area
    labels = np.full(n, -1)
    ltrb = np.zeros((n, 4))
    boxes = np.zeros((n, 4))
    fg = np.flatnonzero(matched >= 0)
    for c in fg:
        box, label = objects[matched[c]]
        x, y = grid.centers[c]
        s = grid.strides[c]
        d = np.array([x - box.x1, y - box.y1, box.x2 - x, box.y2 - y]) / s
        ltrb[c] = np.clip(d, 0.0, reg_max - 1 - FG_CLIP_EPS)
        boxes[c] = box.as_list()
        labels[c] = label
    return TargetAssignment(matched, labels, ltrb, boxes, tuple(levels))


# ---------------------------------------------------------------------------
# losses


def cls_loss(logits: torch.Tensor, assignment: TargetAssignment | np.ndarray) -> torch.Tensor:
    """Softmax CE over K classes plus an implicit zero-logit background.

    ``logits`` may be ``(N, K)`` or ``(B, N, K)``; the mean is over all cells.
    """
    labels = assignment.labels if isinstance(assignment, TargetAssignment) else assignment
    flat = logits.reshape(-1, logits.shape[-1])
    full = torch.cat([flat, flat.new_zeros(flat.shape[0], 1)], 1)
    target = torch.as_tensor(np.asarray(labels).reshape(-1), dtype=torch.long).clone()
    target[target < 0] = flat.shape[1]
    return F.cross_entropy(full, target)


def dfl_loss(box_logits: torch.Tensor, assignment: TargetAssignment) -> torch.Tensor:
    """Distribution focal loss on the two bins bracketing each target side."""
    flat = box_logits.reshape(-1, 4, box_logits.shape[-1])
    fg = torch.as_tensor(assignment.foreground.reshape(-1))
    if not fg.any():
        return flat.sum() * 0.0
    reg_max = flat.shape[-1]
    logp = flat[fg].log_softmax(-1)  # (F, 4, R)
    y = torch.as_tensor(assignment.ltrb.reshape(-1, 4)[fg.numpy()], dtype=logp.dtype)
    if (y < 0).any() or (y > reg_max - 1).any():
        raise ValidationError("dfl_loss: targets outside [0, reg_max - 1]")
    lo = y.floor().long().clamp(max=reg_max - 2)
    hi = lo + 1
    w_lo = hi.to(y.dtype) - y
    w_hi = y - lo.to(y.dtype)
    loss = -(w_lo * logp.gather(-1, lo[..., None])[..., 0] + w_hi * logp.gather(-1, hi[..., None])[..., 0])
    return loss.mean()


def box_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of matched ``(P, 4)`` xyxy boxes; zero-area boxes give 0."""
    iw = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp_min(0)
    ih = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp_min(0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]).clamp_min(0) * (a[:, 3] - a[:, 1]).clamp_min(0)
    area_b = (b[:, 2] - b[:, 0]).clamp_min(0) * (b[:, 3] - b[:, 1]).clamp_min(0)
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(union))


def iou_loss(pred_boxes: torch.Tensor, target_boxes: torch.Tensor, log: bool = False) -> torch.Tensor:
    """Mean ``1 - IoU`` over matched pairs (``-ln IoU`` with ``log=True``)."""
    if pred_boxes.shape[0] == 0:
        return pred_boxes.sum() * 0.0
    iou = box_iou_tensor(pred_boxes, target_boxes.to(pred_boxes.dtype))
    if log:
        return -torch.log(iou.clamp_min(1e-9)).mean()
    return (1.0 - iou).mean()


def expected_distances(box_logits: torch.Tensor) -> torch.Tensor:
    bins = torch.arange(box_logits.shape[-1], dtype=box_logits.dtype)
    return (box_logits.softmax(-1) * bins).sum(-1)


def decode_boxes(
    box_logits: torch.Tensor,
    centers,
    strides,
    image_size: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Expected side distances -> xyxy boxes, clipped to the image if given."""
    centers = torch.as_tensor(np.asarray(centers), dtype=box_logits.dtype)
    strides = torch.as_tensor(np.asarray(strides), dtype=box_logits.dtype)
    d = expected_distances(box_logits) * strides[..., None]
    x1 = centers[..., 0] - d[..., 0]
    y1 = centers[..., 1] - d[..., 1]
    x2 = centers[..., 0] + d[..., 2]
    y2 = centers[..., 1] + d[..., 3]
    boxes = torch.stack([x1, y1, x2, y2], -1)
    if image_size is not None:
        h, w = image_size
        lim = torch.tensor([w, h, w, h], dtype=boxes.dtype)
        boxes = torch.minimum(boxes.clamp_min(0), lim)
    return boxes


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    dfl: float = 1.0
    iou: float = 1.0
    log_iou: bool = False


def stage2_loss(
    pyr: FeaturePyramid,
    targets: Sequence[TargetAssignment],
    class_emb: torch.Tensor,
    head: QueryHead,
    weights: LossWeights = LossWeights(),
    grid: CellGrid | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Grounding loss on a batch: classification + DFL + IoU.

    ``pyr`` comes from the (frozen) backbone; ``targets`` holds one
    assignment per image. Returns the total and a float breakdown.
    """
    logits, box_logits = cross_modal_logits(pyr, class_emb, head)
    b = logits.shape[0]
    if len(targets) != b:
        raise ValidationError(f"targets: {len(targets)} assignments for a batch of {b}")
    h, w = pyr.levels[0].shape[-2] * pyr.strides[0], pyr.levels[0].shape[-1] * pyr.strides[0]
    grid = grid or make_grid((h, w), pyr.strides)
    allt = TargetAssignment.concat(targets)
    l_cls = cls_loss(logits, allt)
    l_dfl = dfl_loss(box_logits, allt)
    fg = allt.foreground
    if fg.any():
        centers = np.tile(grid.centers, (b, 1))[fg]
        strides = np.tile(grid.strides, b)[fg]
        pred = decode_boxes(box_logits.reshape(-1, 4, box_logits.shape[-1])[torch.as_tensor(fg)], centers, strides)
        l_iou = iou_loss(pred, torch.as_tensor(allt.boxes[fg]), log=weights.log_iou)
    else:
        l_iou = box_logits.sum() * 0.0
    parts = {"cls": weights.cls * l_cls, "dfl": weights.dfl * l_dfl, "iou": weights.iou * l_iou}
    total = parts["cls"] + parts["dfl"] + parts["iou"]
    return total, {k: float(v.detach()) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# inference


def class_embeddings(
    vocab: ClassVocab,
    enc: SpeechEncoder,
    recipe=None,
    class_ids: Sequence[int] | None = None,
    jitter_seed: int | None = 0,
) -> torch.Tensor:
    """Embed each class's spoken name with the speech encoder (K x d)."""
    from .synthdata import ToneRecipe, speak_token

    if recipe is None:
        if vocab.tone_recipe is None:
            raise ValidationError("vocab: no tone recipe to speak class names")
        recipe = ToneRecipe.from_json(vocab.tone_recipe)
    ids = list(range(len(vocab))) if class_ids is None else list(class_ids)
    spoken = [vocab[k].spoken_token for k in ids]
    if len(set(spoken)) != len(spoken):
        warnings.warn("duplicate spoken tokens: identical class embeddings")
    clips = [speak_token(tok, recipe, jitter_seed) for tok in spoken]
    with torch.no_grad():
        return encode_audio(clips, enc)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(n, 4)`` and ``(m, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.6, max_predictions: int = 100) -> list[Detection]:
    """Class-wise greedy suppression, then a global score-ordered cap.

    A detection is dropped when its IoU with a kept, higher-scoring detection
    of the same class exceeds ``iou_threshold``. Equal scores keep input order.
    """
    if not detections:
        return []
    scores = np.array([d.score for d in detections])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([d.box.as_list() for d in detections])
    classes = np.array([d.class_id for d in detections])
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        ious = pairwise_iou(boxes[idx], boxes[idx])
        alive = np.ones(idx.size, bool)
        for i in range(idx.size):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    keep = sorted(keep, key=lambda k: (-scores[k], k))
    return [detections[k] for k in keep[:max_predictions]]


def detect(
    image,
    class_emb: torch.Tensor,
    head: QueryHead,
    backbone,
    score_threshold: float = 0.05,
    iou_threshold: float = 0.6,
    max_predictions: int = 100,
    class_ids: Sequence[int] | None = None,
    pyramid: FeaturePyramid | None = None,
) -> list[Detection]:
    """Run the full audio-prompted detector on one image.

    Scores are per-class softmax probabilities (background excluded); every
    (cell, class) pair scoring above ``score_threshold`` becomes a candidate.
    ``class_ids`` maps logit columns back to vocabulary ids.
    """
    from .encoders import encode_image

    with torch.no_grad():
        if pyramid is None:
            _, pyramid = encode_image([image] if not isinstance(image, (list, torch.Tensor)) else image, backbone)
        logits, box_logits = cross_modal_logits(pyramid, class_emb, head)
        logits = logits[0].to(torch.float64)
        box_logits = box_logits[0].to(torch.float64)
        h = pyramid.levels[0].shape[-2] * pyramid.strides[0]
        w = pyramid.levels[0].shape[-1] * pyramid.strides[0]
        grid = make_grid((h, w), pyramid.strides)
        full = torch.cat([logits, logits.new_zeros(logits.shape[0], 1)], 1)
        probs = full.softmax(-1)[:, :-1].numpy()
        cells, cols = np.nonzero(probs > score_threshold)
        if cells.size == 0:
            return []
        boxes = decode_boxes(box_logits[torch.as_tensor(cells)], grid.centers[cells], grid.strides[cells], (h, w)).numpy()
    ids = np.arange(probs.shape[1]) if class_ids is None else np.asarray(class_ids)
    dets = []
    for c, k, bx in zip(cells, cols, boxes):
        if not (bx[0] < bx[2] and bx[1] < bx[3]):
            continue
        dets.append(Detection(BoundingBox(*map(float, bx)), int(ids[k]), float(probs[c, k])))
    return nms(dets, iou_threshold, max_predictions)


# ---------------------------------------------------------------------------
# predictions file


def write_predictions(path: str | os.PathLike, predictions: Mapping[str, Sequence[Detection]]) -> None:
    """JSONL, one ``{image_id, detections: [{box, class_id, score}]}`` per image."""
    lines = []
    for image_id, dets in predictions.items():
        dets = sorted(dets, key=lambda d: -d.score)
        lines.append(json.dumps({"image_id": image_id, "detections": [d.to_json() for d in dets]}, sort_keys=True))
    atomic_write_text(path, "".join(l + "\n" for l in lines))


def read_predictions(path: str | os.PathLike) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [Detection.from_json(d) for d in rec["detections"]]
                out[str(rec["image_id"])] = dets
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{Path(path).name} line {lineno}: {exc}") from exc
            if any(a.score < b.score for a, b in zip(dets, dets[1:])):
                raise ValidationError(f"{Path(path).name} line {lineno}: scores not sorted descending")
    return out
