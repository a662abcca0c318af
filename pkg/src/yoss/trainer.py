"""Two-stage training driver, model bundle and gradient-check harness."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from .alignment import stage1_loss
from .datamodel import (
    AudioClip,
    BoundingBox,
    ClassVocab,
    GroundingSample,
    HyperParams,
    ValidationError,
    atomic_write_text,
    read_manifest,
)
from .encoders import (
    ImageBackbone,
    LogMel,
    SpeechEncoder,
    TextEncoder,
    clip_features,
    images_to_tensor,
    load_state,
    read_checkpoint,
    save_checkpoint,
)
from .grounding import LossWeights, QueryHead, TargetAssignment, assign_targets, class_embeddings, make_grid, stage2_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 1e-6
    seed: int = 0
    warmup_steps: int = 0
    hparams: HyperParams = field(default_factory=HyperParams)
    freeze_image_stem: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    shuffle_labels: bool = False
    retrieval_fold: int = 50
    head_hidden: int = 32
    augment: bool = True
    lr_schedule: str = "constant"  # or "cosine"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError("stage: must be 1 or 2")
        if self.epochs < 0:
            raise ValidationError("epochs: must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate: must be > 0")
        if self.weight_decay <= 0:
            raise ValidationError("weight_decay: must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size: must be >= 1")
        if self.stage == 1 and self.hparams.eta_align and self.hparams.lambda_coral and self.batch_size < 2:
            raise ValidationError("batch_size: CORAL needs batch_size >= 2")
        if self.warmup_steps < 0:
            raise ValidationError("warmup_steps: must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError("lr_schedule: must be 'constant' or 'cosine'")

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any], stage: int | None = None) -> "TrainConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        hp_fields = set(HyperParams.__dataclass_fields__)
        lw_fields = set(LossWeights.__dataclass_fields__)
        hp = dict(obj.pop("hparams", {}))
        lw = dict(obj.pop("loss_weights", {}))
        for key in list(obj):
            if key in known:
                continue
            if key in hp_fields:
                hp[key] = obj.pop(key)
            elif key in lw_fields:
                lw[key] = obj.pop(key)
            else:
                raise ValidationError(f"{key}: unknown training config field")
        if stage is not None:
            obj["stage"] = stage
        if "strides" in hp:
            hp["strides"] = tuple(hp["strides"])
        return cls(hparams=HyperParams(**hp), loss_weights=LossWeights(**lw), **obj)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hparams"] = self.hparams.to_json()
        return d


PAPER_STAGE1 = TrainConfig(stage=1, learning_rate=1e-4, weight_decay=1e-6)
PAPER_STAGE2 = TrainConfig(stage=2, learning_rate=1e-5, weight_decay=0.025)


FREEZE_POLICY = {
    1: ("head",),
    2: ("speech", "image", "text"),
}


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class YossModel:
    speech: SpeechEncoder
    image: ImageBackbone
    text: TextEncoder
    head: QueryHead | None
    hparams: HyperParams
    extra: dict = field(default_factory=dict)

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"speech": self.speech, "image": self.image, "text": self.text, "head": self.head}

    def eval(self) -> "YossModel":
        for m in self.modules().values():
            if m is not None:
                m.eval()
        return self

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.modules(), self.hparams, self.extra)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "YossModel":
        header, arrays = read_checkpoint(path)
        cfg = header["modules"]
        hp = HyperParams.from_json(header["hparams"])
        speech = SpeechEncoder(**cfg["speech"])
        image = ImageBackbone(**cfg["image"])
        text = TextEncoder(**cfg["text"])
        head = QueryHead(**cfg["head"]) if "head" in cfg else None
        for name, mod in (("speech", speech), ("image", image), ("text", text), ("head", head)):
            if mod is not None:
                load_state(mod, name, arrays)
        return cls(speech, image, text, head, hp, header.get("extra", {})).eval()


def build_model(vocab: ClassVocab, hparams: HyperParams, seed: int, sample_rate: int = 16000, head_hidden: int = 32) -> YossModel:
    torch.manual_seed(seed)
    d = hparams.embed_dim
    speech = SpeechEncoder(embed_dim=d, sample_rate=sample_rate)
    image = ImageBackbone(embed_dim=d)
    text = TextEncoder(vocab.text_tokens, embed_dim=d)
    head = QueryHead(in_channels=image.config["channels"], hidden=head_hidden, embed_dim=d, reg_max=hparams.reg_max)
    return YossModel(speech, image, text, head, hparams)


def param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def configure_determinism(seed: int) -> None:
    threads = os.environ.get("YOSS_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# metric log


@dataclass
class MetricLog:
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for e, s, m, v in self.rows if s == split and m == metric]

    def last(self, split: str, metric: str) -> float:
        return self.series(split, metric)[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for e, s, m, v in self.rows:
            w.writerow([e, s, m, repr(v)])
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_csv())


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class AudioBank:
    """Pre-computed log-mel features (the frontend has no parameters)."""

    feats: list[torch.Tensor]

    @classmethod
    def from_samples(cls, samples: Sequence[GroundingSample], frontend: LogMel) -> "AudioBank":
        feats = []
        for s in samples:
            f, m = clip_features([s.caption_audio], frontend)
            feats.append(f[0, : int(m.sum())].to(torch.float32))
        return cls(feats)

    def batch(self, idx: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        items = [self.feats[i] for i in idx]
        t = max(x.shape[0] for x in items)
        out = torch.zeros(len(items), t, items[0].shape[1])
        mask = torch.zeros(len(items), t, dtype=torch.bool)
        for k, x in enumerate(items):
            out[k, : x.shape[0]] = x
            mask[k, : x.shape[0]] = True
        return out, mask


@dataclass
class Stage1Data:
    images: torch.Tensor
    audio: AudioBank
    text_ids: torch.Tensor
    text_mask: torch.Tensor
    samples: list[GroundingSample] = field(default_factory=list)  # raw audio and boxes, for augmentation

    @classmethod
    def from_samples(cls, samples, model: YossModel) -> "Stage1Data":
        ids, mask = model.text.token_ids([s.caption_text for s in samples])
        return cls(
            images_to_tensor([s.image for s in samples]),
            AudioBank.from_samples(samples, model.speech.frontend),
            ids, mask, list(samples),
        )

    def __len__(self) -> int:
        return self.images.shape[0]


def batches(n: int, batch_size: int, generator: torch.Generator | None) -> list[list[int]]:
    order = torch.randperm(n, generator=generator).tolist() if generator is not None else list(range(n))
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def augment_images(images: torch.Tensor, generator: torch.Generator, max_shift: int = 8) -> torch.Tensor:
    """Random horizontal flip and wrap-around shift per image.

    Neither changes which objects are present, so the caption stays valid.
    """
    out = images.clone()
    flips = torch.rand(len(out), generator=generator) < 0.5
    out[flips] = out[flips].flip(-1)
    shifts = torch.randint(-max_shift, max_shift + 1, (len(out), 2), generator=generator)
    for k, (dy, dx) in enumerate(shifts.tolist()):
        out[k] = out[k].roll((dy, dx), dims=(-2, -1))
    return out


def erase_object(image: torch.Tensor, box: BoundingBox, generator: torch.Generator, tol: float = 0.2) -> torch.Tensor:
    """Repaint one object's pixels (in place) with background noise.

    Object pixels are those inside ``box`` whose colour is close to the box's
    dominant foreground colour.
    """
    x1, y1 = int(box.x1), int(box.y1)
    x2, y2 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    patch = image[:, y1:y2, x1:x2]
    fg = (patch - 0.5).abs().amax(0) > 0.1
    if not fg.any():
        return image
    colour = patch[:, fg].median(1).values
    own = (patch - colour[:, None, None]).abs().amax(0) < tol
    noise = 0.45 + 0.1 * torch.rand(patch.shape, generator=generator, dtype=patch.dtype)
    patch[:, own] = noise[:, own]
    return image


def recompose_caption(sample: GroundingSample, order: Sequence[int]) -> AudioClip:
    """Re-join the spoken tokens of ``sample`` in ``order`` (a subset of object
    indices), separated by the caption's own inter-token gap."""
    clip = sample.caption_audio
    spans = [o.span for o in sample.objects]
    gap = spans[1].start_sample - spans[0].end_sample if len(spans) > 1 else 0
    pieces = []
    for k, j in enumerate(order):
        if k:
            pieces.append(np.zeros(gap))
        pieces.append(clip.samples[spans[j].start_sample : spans[j].end_sample])
    return AudioClip(np.concatenate(pieces), clip.sample_rate)


def augment_pairs(
    data: Stage1Data, idx, generator: torch.Generator, frontend, p_drop: float = 0.5, p_shuffle: float = 0.5
):
    """Caption-consistent augmentation of a batch.

    With probability ``p_drop`` one object is removed from the image, the
    audio and the text; with probability ``p_shuffle`` the remaining spoken
    tokens are re-ordered. Returns ``(images, feats, mask, captions)``.
    """
    images = data.images[idx].clone()
    clips, captions = [], []
    draws = torch.rand(len(idx), 2, generator=generator).tolist()
    for k, i in enumerate(idx):
        s = data.samples[i]
        order = list(range(len(s.objects)))
        if not order:
            clips.append(s.caption_audio)
            captions.append(tuple(s.caption_text))
            continue
        if len(order) >= 2 and draws[k][0] < p_drop:
            j = int(torch.randint(len(order), (1,), generator=generator))
            erase_object(images[k], s.objects[j].box, generator)
            order.pop(j)
        if len(order) >= 2 and draws[k][1] < p_shuffle:
            order = [order[t] for t in torch.randperm(len(order), generator=generator).tolist()]
        clips.append(recompose_caption(s, order))
        captions.append(tuple(s.caption_text[j] for j in order))
    feats, mask = clip_features(clips, frontend)
    return images, feats.to(torch.float32), mask, captions


def embed_stage1(
    model: YossModel, data: Stage1Data, idx, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Embed a batch; passing ``generator`` turns on training augmentation."""
    if generator is None:
        feats, mask = data.audio.batch(idx)
        images = data.images[idx]
        ids, tmask = data.text_ids[idx], data.text_mask[idx]
    else:
        images, feats, mask, captions = augment_pairs(data, idx, generator, model.speech.frontend)
        images = augment_images(images, generator)
        ids, tmask = model.text.token_ids(captions)
    e_a = model.speech(feats, mask)
    e_i, _ = model.image(images)
    e_t = model.text(ids, tmask)
    return e_i, e_a, e_t


def lr_factor(step: int, total: int, warmup: int = 0, schedule: str = "constant") -> float:
    """Linear warmup, then constant or cosine decay to zero over ``total`` steps."""
    warm = 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)
    if schedule == "cosine" and total > 0:
        return warm * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return warm


# ---------------------------------------------------------------------------
# stage 1


def _stage1_eval_loss(model, data, config) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in batches(len(data), config.batch_size, None):
            if len(idx) < 2 and config.hparams.lambda_coral and config.hparams.eta_align:
                continue
            loss = stage1_loss(*embed_stage1(model, data, idx), config.hparams)
            total += float(loss) * len(idx)
            count += len(idx)
    return total / max(count, 1)


def retrieval_metrics(model: YossModel, data: Stage1Data, fold: int) -> dict[str, float]:
    from .evalkit import retrieval_recall_folds

    with torch.no_grad():
        idx = list(range(len(data)))
        e_a, e_i = [], []
        for chunk in batches(len(data), 128, None):
            ei, ea, _ = embed_stage1(model, data, chunk)
            e_a.append(ea)
            e_i.append(ei)
        res = retrieval_recall_folds(torch.cat(e_a).double().numpy(), torch.cat(e_i).double().numpy(), fold)
    return res.flat()


def pretrain_stage1(
    manifest: str | os.PathLike,
    config: TrainConfig,
    model: YossModel | None = None,
) -> tuple[YossModel, MetricLog]:
    """Contrastive + alignment pretraining of speech, image and text encoders.

    Logs ``train/loss`` (full deterministic pass, epoch 0 = initialization)
    and validation retrieval recall each epoch.
    """
    if config.stage != 1:
        raise ValidationError("stage: pretrain_stage1 needs a stage-1 config")
    configure_determinism(config.seed)
    train, vocab = read_manifest(manifest, "train")
    val, _ = read_manifest(manifest, "val") if (Path(manifest) / "val.jsonl").exists() else ([], vocab)
    if not train:
        raise ValidationError("manifest: empty training split")
    rate = train[0].caption_audio.sample_rate
    if model is None:
        model = build_model(vocab, config.hparams, config.seed, rate, config.head_hidden)
    model.hparams = config.hparams
    tr = Stage1Data.from_samples(train, model)
    va = Stage1Data.from_samples(val, model) if val else None

    params = []
    for name in ("speech", "image", "text"):
        mod = model.modules()[name]
        for pname, p in mod.named_parameters():
            frozen = name == "image" and config.freeze_image_stem and pname.startswith("stem.")
            p.requires_grad_(not frozen)
            if not frozen:
                params.append(p)
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    mlog = MetricLog()

    def evaluate(epoch):
        for m in (model.speech, model.image, model.text):
            m.eval()
        mlog.add(epoch, "train", "loss", _stage1_eval_loss(model, tr, config))
        if va is not None and len(va) >= 2:
            for k, v in retrieval_metrics(model, va, config.retrieval_fold).items():
                mlog.add(epoch, "val", k, v)

    evaluate(0)
    step = 0
    total = config.epochs * len(batches(len(tr), config.batch_size, None))
    for epoch in range(1, config.epochs + 1):
        for m in (model.speech, model.image, model.text):
            m.train()
        for idx in batches(len(tr), config.batch_size, gen):
            if len(idx) < 2:
                continue
            for g in opt.param_groups:
                g["lr"] = config.learning_rate * lr_factor(step, total, config.warmup_steps, config.lr_schedule)
            loss = stage1_loss(*embed_stage1(model, tr, idx, gen if config.augment else None), config.hparams)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        evaluate(epoch)
        log.info("stage1 epoch %d loss %.4f", epoch, mlog.last("train", "loss"))
    for p in model.speech.parameters():
        p.requires_grad_(True)
    for p in model.image.parameters():
        p.requires_grad_(True)
    model.extra = {"stage": 1, "config": config.to_json()}
    return model.eval(), mlog


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Data:
    pyramids: list[torch.Tensor]  # one tensor per level, all images
    targets: list[TargetAssignment]

    def __len__(self) -> int:
        return len(self.targets)


def seen_class_ids(samples: Sequence[GroundingSample]) -> list[int]:
    return sorted({o.class_id for s in samples for o in s.objects})


def prepare_stage2(samples, model: YossModel, column_of: Mapping[int, int]) -> Stage2Data:
    hp = model.hparams
    with torch.no_grad():
        levels = [[], [], []]
        for chunk in batches(len(samples), 64, None):
            _, pyr = model.image(images_to_tensor([samples[i].image for i in chunk]))
            for k, lv in enumerate(pyr.levels):
                levels[k].append(lv)
    pyramids = [torch.cat(lv) for lv in levels]
    h, w = samples[0].image.height, samples[0].image.width
    grid = make_grid((h, w), hp.strides)
    targets = [
        assign_targets([(o.box, column_of[o.class_id]) for o in s.objects], (h, w), hp.strides, hp.reg_max, grid)
        for s in samples
    ]
    return Stage2Data(pyramids, targets)


def finetune_stage2(
    manifest: str | os.PathLike,
    model: YossModel | str | os.PathLike,
    config: TrainConfig,
) -> tuple[YossModel, MetricLog]:
    """Train only the query head; speech encoder and backbone stay frozen.

    Class embeddings come from the frozen speech encoder, recomputed each
    epoch. With ``shuffle_labels`` the class-to-prompt mapping is permuted
    (a control that should destroy transfer).
    """
    from .encoders import FeaturePyramid

    if config.stage != 2:
        raise ValidationError("stage: finetune_stage2 needs a stage-2 config")
    if not isinstance(model, YossModel):
        model = YossModel.load(model)
    configure_determinism(config.seed)
    train, vocab = read_manifest(manifest, "train")
    if not any(s.objects for s in train):
        raise ValidationError("manifest: no object annotations in training split")
    if model.head is None or model.head.reg_max != config.hparams.reg_max:
        torch.manual_seed(config.seed)
        model.head = QueryHead(model.image.config["channels"], config.head_hidden, model.hparams.embed_dim, config.hparams.reg_max)
    model.hparams = replace(model.hparams, reg_max=config.hparams.reg_max, strides=config.hparams.strides)

    seen = seen_class_ids(train)
    leaked = [k for k in seen if not vocab[k].seen_in_train]
    if leaked:
        raise ValidationError(f"manifest: held-out classes {leaked} appear in training split")
    prompt_ids = list(seen)
    if config.shuffle_labels:
        rng = np.random.default_rng([config.seed, 0x5AFF])
        while True:
            perm = list(rng.permutation(seen))
            if all(a != b for a, b in zip(perm, seen)) or len(seen) < 2:
                break
        prompt_ids = [int(p) for p in perm]
    column_of = {cid: k for k, cid in enumerate(seen)}

    frozen = {name: model.modules()[name] for name in FREEZE_POLICY[2]}
    before = {name: param_digest(m) for name, m in frozen.items()}
    for m in frozen.values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)

    data = prepare_stage2(train, model, column_of)
    opt = torch.optim.AdamW(model.head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    mlog = MetricLog()
    h, w = train[0].image.height, train[0].image.width
    grid = make_grid((h, w), model.hparams.strides)

    def epoch_pass(train_mode: bool, class_emb) -> dict[str, float]:
        sums = {"loss": 0.0, "cls": 0.0, "dfl": 0.0, "iou": 0.0}
        order = batches(len(data), config.batch_size, gen if train_mode else None)
        for idx in order:
            pyr = FeaturePyramid([lv[idx] for lv in data.pyramids], model.hparams.strides)
            targets = [data.targets[i] for i in idx]
            if train_mode:
                total, parts = stage2_loss(pyr, targets, class_emb, model.head, config.loss_weights, grid)
                opt.zero_grad()
                total.backward()
                opt.step()
            else:
                with torch.no_grad():
                    total, parts = stage2_loss(pyr, targets, class_emb, model.head, config.loss_weights, grid)
            sums["loss"] += float(total.detach()) * len(idx)
            for k, v in parts.items():
                sums[k] += v * len(idx)
        return {k: v / len(data) for k, v in sums.items()}

    def class_emb_now():
        return class_embeddings(vocab, model.speech, class_ids=prompt_ids)

    model.head.eval()
    for k, v in epoch_pass(False, class_emb_now()).items():
        mlog.add(0, "train", k, v)
    for epoch in range(1, config.epochs + 1):
        class_emb = class_emb_now()
        model.head.train()
        epoch_pass(True, class_emb)
        model.head.eval()
        for k, v in epoch_pass(False, class_emb).items():
            mlog.add(epoch, "train", k, v)
        log.info("stage2 epoch %d loss %.4f", epoch, mlog.last("train", "loss"))

    after = {name: param_digest(m) for name, m in frozen.items()}
    if after != before:
        raise RuntimeError("freeze policy violated: frozen parameters changed during stage 2")
    for m in frozen.values():
        for p in m.parameters():
            p.requires_grad_(True)
    model.extra = {
        "stage": 2,
        "config": config.to_json(),
        "seen_class_ids": seen,
        "frozen_digests": before,
    }
    return model.eval(), mlog


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    loss_name: str
    trials: int
    tolerance: float
    max_rel_err: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def __str__(self) -> str:
        groups = ", ".join(f"{k}={v:.2e}" for k, v in sorted(self.max_rel_err.items()))
        return f"{self.loss_name}: {'PASS' if self.passed else 'FAIL'} ({groups})"


# A probe maps an rng to (fn, inputs): fn(**inputs) -> scalar tensor.
# Inputs are float64 leaf tensors, one "parameter group" each.
Probe = Callable[[np.random.Generator], tuple[Callable[..., torch.Tensor], dict[str, torch.Tensor]]]
PROBES: dict[str, Probe] = {}
# Parameter groups larger than this are checked on a random coordinate subset.
FD_MAX_COORDS = 24


def register_probe(name: str):
    def deco(fn: Probe) -> Probe:
        PROBES[name] = fn
        return fn

    return deco


def _unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True), dtype=torch.float64)


def _normalize_rows(x):
    return x / x.norm(dim=1, keepdim=True)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; two (near-)zero gradients agree."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(diff)
    return float(diff / scale)


def finite_difference(fn, inputs: dict[str, torch.Tensor], name: str, coords, step: float = 1e-5) -> np.ndarray:
    x = inputs[name]
    flat = x.detach().view(-1)
    out = np.zeros(len(coords))
    with torch.no_grad():
        for k, c in enumerate(coords):
            orig = float(flat[c])
            flat[c] = orig + step
            up = float(fn(**inputs))
            flat[c] = orig - step
            down = float(fn(**inputs))
            flat[c] = orig
            out[k] = (up - down) / (2 * step)
    return out


def grad_check(loss_name: str, trials: int = 20, tolerance: float = 1e-4, seed: int = 0, step: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients against central differences in float64."""
    if loss_name not in PROBES:
        raise KeyError(f"unknown loss {loss_name!r}; registered: {sorted(PROBES)}")
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        fn, inputs = PROBES[loss_name](rng)
        for t in inputs.values():
            t.requires_grad_(True)
            t.grad = None
        fn(**inputs).backward()
        for name, t in inputs.items():
            n = t.numel()
            coords = np.arange(n) if n <= FD_MAX_COORDS else np.sort(rng.choice(n, FD_MAX_COORDS, replace=False))
            analytic = (t.grad if t.grad is not None else torch.zeros_like(t)).detach().reshape(-1).numpy()[coords]
            numeric = finite_difference(fn, inputs, name, coords, step)
            worst[name] = max(worst.get(name, 0.0), relative_error(analytic, numeric))
    return GradCheckReport(loss_name, trials, tolerance, worst)


# -- loss probes -----------------------------------------------------------


@register_probe("contrastive_loss")
def _probe_contrastive(rng):
    from .alignment import contrastive_loss

    tau = float(rng.uniform(0.2, 1.0))
    b, d = 4, 6
    inputs = {"a": torch.tensor(rng.normal(size=(b, d))), "i": torch.tensor(rng.normal(size=(b, d)))}
    return (lambda a, i: contrastive_loss(_normalize_rows(a), _normalize_rows(i), tau)), inputs


@register_probe("pair_loss")
def _probe_pair(rng):
    from .alignment import pair_loss

    inputs = {"t": torch.tensor(rng.normal(size=(4, 6))), "a": torch.tensor(rng.normal(size=(4, 6)))}
    return (lambda t, a: pair_loss(_normalize_rows(t), _normalize_rows(a))), inputs


@register_probe("coral_loss")
def _probe_coral(rng):
    from .alignment import coral_loss

    inputs = {"t": torch.tensor(rng.normal(size=(5, 4))), "a": torch.tensor(rng.normal(size=(5, 4)))}
    return (lambda t, a: coral_loss(t, a)), inputs


@register_probe("alignment_loss")
def _probe_alignment(rng):
    from .alignment import alignment_loss

    lam = float(rng.uniform(0.1, 2.0))
    inputs = {"t": torch.tensor(rng.normal(size=(5, 4))), "a": torch.tensor(rng.normal(size=(5, 4)))}
    return (lambda t, a: alignment_loss(_normalize_rows(t), _normalize_rows(a), lam)), inputs


@register_probe("stage1_loss")
def _probe_stage1(rng):
    from .alignment import stage1_loss

    hp = HyperParams(tau=float(rng.uniform(0.2, 1.0)), lambda_coral=0.5, eta_align=float(rng.uniform(0.5, 2.0)))
    inputs = {k: torch.tensor(rng.normal(size=(4, 5))) for k in ("i", "a", "t")}
    return (lambda i, a, t: stage1_loss(_normalize_rows(i), _normalize_rows(a), _normalize_rows(t), hp)), inputs


def _random_assignment(rng, n_cells, reg_max, n_labels, p_fg=0.4):
    labels = np.where(rng.random(n_cells) < p_fg, rng.integers(0, n_labels, n_cells), -1)
    if not (labels >= 0).any():
        labels[0] = 0
    matched = np.where(labels >= 0, 0, -1)
    # keep targets away from integer bin edges where DFL has kinks in y only
    ltrb = np.where(labels[:, None] >= 0, rng.uniform(0.1, reg_max - 1.1, (n_cells, 4)), 0.0)
    centers = rng.uniform(20, 40, (n_cells, 2))
    boxes = np.concatenate([centers - rng.uniform(4, 12, (n_cells, 2)), centers + rng.uniform(4, 12, (n_cells, 2))], 1)
    boxes = np.where(labels[:, None] >= 0, boxes, 0.0)
    return TargetAssignment(matched, labels, ltrb, boxes, ())


@register_probe("cls_loss")
def _probe_cls(rng):
    from .grounding import cls_loss

    asg = _random_assignment(rng, 6, 8, 3)
    inputs = {"logits": torch.tensor(rng.normal(scale=3.0, size=(6, 3)))}
    return (lambda logits: cls_loss(logits, asg)), inputs


@register_probe("dfl_loss")
def _probe_dfl(rng):
    from .grounding import dfl_loss

    asg = _random_assignment(rng, 5, 8, 2)
    inputs = {"box_logits": torch.tensor(rng.normal(size=(5, 4, 8)))}
    return (lambda box_logits: dfl_loss(box_logits, asg)), inputs


@register_probe("iou_loss")
def _probe_iou(rng):
    from .grounding import iou_loss

    n = 4
    c = rng.uniform(10, 30, (n, 2))
    target = torch.tensor(np.concatenate([c - rng.uniform(3, 8, (n, 2)), c + rng.uniform(3, 8, (n, 2))], 1))
    jitter = rng.normal(scale=1.5, size=(n, 4))
    pred0 = target.numpy() + jitter
    pred0[:, 2:] = np.maximum(pred0[:, 2:], pred0[:, :2] + 1.0)
    inputs = {"pred": torch.tensor(pred0)}
    return (lambda pred: iou_loss(pred, target)), inputs


class _Stage2Probe(torch.nn.Module):
    def __init__(self, head: QueryHead):
        super().__init__()
        self.head = head

    def forward(self, pyr, emb, asg):
        return stage2_loss(pyr, [asg], emb, self.head)[0]


@register_probe("stage2_loss")
def _probe_stage2(rng):
    from .datamodel import BoundingBox
    from .encoders import FeaturePyramid

    torch.manual_seed(int(rng.integers(2**31)))
    probe = _Stage2Probe(QueryHead(in_channels=4, hidden=4, embed_dim=6, reg_max=8).double())
    size = 32
    objects = []
    for _ in range(int(rng.integers(1, 3))):
        x1, y1 = rng.uniform(0, 14, 2)
        w, h = rng.uniform(9, 17, 2)
        objects.append((BoundingBox(x1, y1, min(x1 + w, size), min(y1 + h, size)), int(rng.integers(0, 3))))
    asg = assign_targets(objects, (size, size), (4, 8, 16), 8)
    names = [k for k, _ in probe.named_parameters()]

    def fn(emb, p0, p1, p2, **weights):
        params = {n: weights[n.replace(".", "__")] for n in names}
        pyr = FeaturePyramid([p0, p1, p2])
        return torch.func.functional_call(probe, params, (pyr, _normalize_rows(emb), asg))

    inputs = {"emb": torch.tensor(rng.normal(size=(3, 6)))}
    inputs.update({f"p{k}": torch.tensor(rng.normal(size=(1, 4, size // s, size // s))) for k, s in enumerate((4, 8, 16))})
    inputs.update({n.replace(".", "__"): p.detach().clone() for n, p in probe.named_parameters()})
    return fn, inputs


@register_probe("constant")
def _probe_constant(rng):
    inputs = {"x": torch.tensor(rng.normal(size=(3,)))}
    return (lambda x: (x * 0.0).sum() + 1.5), inputs


class _BrokenSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x**2).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3.0 * x  # deliberately wrong: d/dx x^2 = 2x


@register_probe("corrupted")
def _probe_corrupted(rng):
    inputs = {"x": torch.tensor(rng.normal(size=(4,)))}
    return (lambda x: _BrokenSquare.apply(x)), inputs
