"""Deterministic compositional audio-image-text grounding corpora.

Classes are ``color x shape`` combinations. Spoken class names are tone
codes: each character of the token becomes a short sinusoid at a fixed
frequency, so the audio carries exactly the information in the text.
"""
from __future__ import annotations

import json
import os
import shutil
import string
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .datamodel import (
    AudioClip,
    BoundingBox,
    ClassVocab,
    GroundedObject,
    GroundingSample,
    ImageSample,
    TokenSpan,
    ValidationError,
    VocabEntry,
    atomic_write_text,
    write_manifest,
)

SHAPES = ("circle", "square", "triangle", "cross")

DEFAULT_COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.9),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}

TONE_ALPHABET = string.ascii_lowercase + " "
AMPLITUDE = 0.8
BACKGROUND = 0.5
BACKGROUND_NOISE = 0.05
MAX_PLACEMENT_IOU = 0.3
PLACEMENT_ATTEMPTS = 100
MIN_SEPARATION = 1  # pixels of background kept between object rasters
SCENE_RETRIES = 10


class PlacementError(RuntimeError):
    """Rejection sampling could not place the requested objects."""


def default_frequencies(alphabet: str = TONE_ALPHABET, lo: float = 300.0, hi: float = 6000.0) -> dict[str, float]:
    # geometric spacing keeps neighbouring characters ~12% apart
    n = len(alphabet)
    return {ch: float(lo * (hi / lo) ** (k / (n - 1))) for k, ch in enumerate(alphabet)}


@dataclass(frozen=True)
class ToneRecipe:
    frequencies: Mapping[str, float] = field(default_factory=default_frequencies)
    tone_ms: float = 30.0
    gap_ms: float = 10.0
    sample_rate: int = 16000
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "frequencies", dict(self.frequencies))
        nyquist = self.sample_rate / 2
        for ch, f in self.frequencies.items():
            if not (0 < f < nyquist):
                raise ValidationError(f"frequencies: {ch!r} -> {f} Hz not below Nyquist {nyquist}")
        if self.tone_ms <= 0 or self.gap_ms <= 0 or self.sample_rate <= 0:
            raise ValidationError("tone_ms/gap_ms/sample_rate: must be positive")
        if self.jitter < 0:
            raise ValidationError("jitter: must be >= 0")
        # the jittered frequency must still respect Nyquist
        if max(self.frequencies.values()) * (1 + self.jitter) >= nyquist:
            raise ValidationError("jitter: jittered frequencies exceed Nyquist")

    @property
    def tone_samples(self) -> int:
        return int(round(self.tone_ms * self.sample_rate / 1000))

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap_ms * self.sample_rate / 1000))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToneRecipe":
        return cls(**obj)


@dataclass(frozen=True)
class CorpusConfig:
    colors: Mapping[str, tuple[float, float, float]] = field(
        default_factory=lambda: {k: DEFAULT_COLORS[k] for k in ("red", "green", "blue")}
    )
    shapes: tuple[str, ...] = SHAPES
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (10, 24)
    n_train: int = 500
    n_val: int = 100
    holdout_combos: tuple[tuple[str, str], ...] = ()
    speaker_jitter: float = 0.02
    seed: int = 0
    tone_ms: float = 30.0
    gap_ms: float = 10.0
    sample_rate: int = 16000
    rare_max: int = 10
    frequent_min: int = 100

    def __post_init__(self):
        object.__setattr__(self, "colors", {str(k): tuple(map(float, v)) for k, v in dict(self.colors).items()})
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "object_size", tuple(int(v) for v in self.object_size))
        object.__setattr__(self, "holdout_combos", tuple(tuple(c) for c in self.holdout_combos))
        for name, rgb in self.colors.items():
            if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
                raise ValidationError(f"colors: {name!r} needs three channels in [0, 1]")
            if set(name) - set(TONE_ALPHABET):
                raise ValidationError(f"colors: {name!r} has characters outside a-z")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValidationError(f"shapes: unknown shape {s!r}")
        if len(set(self.shapes)) != len(self.shapes):
            raise ValidationError("shapes: duplicates")
        if len(self.colors) * len(self.shapes) < 4:
            raise ValidationError("colors: need |colors| x |shapes| >= 4")
        if self.image_size <= 0 or self.image_size % 16:
            raise ValidationError("image_size: must be a positive multiple of 16")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi <= 4):
            raise ValidationError("objects_per_image: need 1 <= lo <= hi <= 4")
        smin, smax = self.object_size
        if not (4 <= smin <= smax <= self.image_size // 2):
            raise ValidationError("object_size: need 4 <= min <= max <= image_size / 2")
        if self.n_train < 0 or self.n_val < 0:
            raise ValidationError("n_train/n_val: must be >= 0")
        combos = set(self.combos())
        for c in self.holdout_combos:
            if c not in combos:
                raise ValidationError(f"holdout_combos: {c} is not a (color, shape) combo")
        if len(set(self.holdout_combos)) >= len(combos):
            raise ValidationError("holdout_combos: at least one combo must remain for training")
        if self.speaker_jitter < 0:
            raise ValidationError("speaker_jitter: must be >= 0")
        if not (0 < self.rare_max <= self.frequent_min):
            raise ValidationError("rare_max/frequent_min: need 0 < rare_max <= frequent_min")

    def combos(self) -> list[tuple[str, str]]:
        return [(c, s) for c in self.colors for s in self.shapes]

    def tone_recipe(self) -> ToneRecipe:
        return ToneRecipe(
            tone_ms=self.tone_ms, gap_ms=self.gap_ms, sample_rate=self.sample_rate, jitter=self.speaker_jitter
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["colors"] = {k: list(v) for k, v in self.colors.items()}
        d["holdout_combos"] = [list(c) for c in self.holdout_combos]
        return d

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "CorpusConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"{sorted(unknown)[0]}: unknown corpus config field")
        obj = dict(obj)
        colors = obj.get("colors")
        if isinstance(colors, (list, tuple)):
            try:
                obj["colors"] = {name: DEFAULT_COLORS[name] for name in colors}
            except KeyError as exc:
                raise ValidationError(f"colors: no default RGB for {exc.args[0]!r}") from None
        for key in ("shapes", "objects_per_image", "object_size"):
            if isinstance(obj.get(key), list):
                obj[key] = tuple(obj[key])
        if "holdout_combos" in obj:
            obj["holdout_combos"] = tuple(tuple(c) for c in obj["holdout_combos"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# vocabulary


def build_vocab(config: CorpusConfig) -> ClassVocab:
    """One class per (color, shape) combo; holdout combos flagged unseen."""
    holdout = set(config.holdout_combos)
    entries = []
    for k, (color, shape) in enumerate(config.combos()):
        token = f"{color} {shape}"
        entries.append(VocabEntry(k, token, token, None, 0, (color, shape) not in holdout))
    return ClassVocab(tuple(entries), config.tone_recipe().to_json())


# ---------------------------------------------------------------------------
# audio


def _jitter_factor(recipe: ToneRecipe, jitter_seed: int | None) -> float:
    if recipe.jitter == 0 or jitter_seed is None:
        return 1.0
    rng = np.random.default_rng([int(jitter_seed), 0x70E])
    return 1.0 + float(rng.uniform(-recipe.jitter, recipe.jitter))


def _tone(freq: float, n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    return AMPLITUDE * np.sin(2 * np.pi * freq * t)


def speak_token(token: str, recipe: ToneRecipe, jitter_seed: int | None = 0) -> AudioClip:
    """Tone-code ``token``: one sinusoid per character, silent gaps between."""
    if not token:
        raise ValidationError("token: empty")
    missing = sorted(set(token) - set(recipe.frequencies))
    if missing:
        raise ValidationError(f"token: unmapped character {missing[0]!r} in {token!r}")
    scale = _jitter_factor(recipe, jitter_seed)
    tone, gap = recipe.tone_samples, recipe.gap_samples
    out = np.zeros(len(token) * tone + (len(token) - 1) * gap)
    for k, ch in enumerate(token):
        start = k * (tone + gap)
        out[start : start + tone] = _tone(recipe.frequencies[ch] * scale, tone, recipe.sample_rate)
    return AudioClip(out, recipe.sample_rate)


def speak_caption(
    tokens: Sequence[str], recipe: ToneRecipe, seed: int | None = 0
) -> tuple[AudioClip, list[TokenSpan]]:
    """Concatenate spoken tokens separated by one gap; return per-token spans."""
    if not tokens:
        raise ValidationError("tokens: caption must contain at least one token")
    gap = np.zeros(recipe.gap_samples)
    pieces, spans, pos = [], [], 0
    for k, tok in enumerate(tokens):
        if k:
            pieces.append(gap)
            pos += gap.size
        clip = speak_token(tok, recipe, seed)
        pieces.append(clip.samples)
        spans.append(TokenSpan(tok, pos, pos + len(clip)))
        pos += len(clip)
    return AudioClip(np.concatenate(pieces), recipe.sample_rate), spans


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    shape: str
    rgb: tuple[float, float, float]
    size: int


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of a shape, sampled at pixel centres."""
    c = (np.arange(size) + 0.5) - size / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    half = size / 2
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "circle":
        m = xx**2 + yy**2 <= half**2
    elif shape == "triangle":
        # apex at the top centre, base along the bottom row
        frac = (yy + half) / size
        m = np.abs(xx) <= half * frac + 0.25
    elif shape == "cross":
        arm = max(size / 6, 1.0)
        m = (np.abs(xx) <= arm) | (np.abs(yy) <= arm)
    else:
        raise ValidationError(f"shape: unknown shape {shape!r}")
    return m


def _tight_box(mask: np.ndarray, x0: int, y0: int) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    """Square dilation by ``r`` pixels; the output grows by ``r`` on each side."""
    h, w = mask.shape
    out = np.zeros((h + 2 * r, w + 2 * r), bool)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out[dy : dy + h, dx : dx + w] |= mask
    return out


def render_scene(
    specs: Sequence[ObjectSpec],
    image_size: int,
    seed: int | np.random.Generator,
    separation: int | None = MIN_SEPARATION,
) -> tuple[ImageSample, list[tuple[BoundingBox, int]]]:
    """Place and rasterize objects on a noisy gray canvas.

    Placement rejects a position when the new box overlaps an earlier one
    with IoU above 0.3, or when its raster comes within ``separation`` pixels
    of an earlier raster (so no object is occluded or merged with a
    neighbour). ``separation=None`` keeps only the IoU rule. Returned boxes
    are the tight extents of each object's own raster, in spec order.
    """
    if not (1 <= len(specs) <= 4):
        raise ValidationError("objects: need 1-4 objects per scene")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    canvas = BACKGROUND + rng.uniform(-BACKGROUND_NOISE, BACKGROUND_NOISE, (image_size, image_size, 3))
    r = 0 if separation is None else int(separation)
    occupied = np.zeros((image_size + 2 * r, image_size + 2 * r), bool)
    placed: list[tuple[BoundingBox, int]] = []
    for spec in specs:
        if not (1 <= spec.size <= image_size):
            raise ValidationError(f"size: {spec.size} does not fit a {image_size}px canvas")
        mask = shape_mask(spec.shape, spec.size)
        halo = _dilate(mask, r)
        for _ in range(PLACEMENT_ATTEMPTS):
            x0 = int(rng.integers(0, image_size - spec.size + 1))
            y0 = int(rng.integers(0, image_size - spec.size + 1))
            box = _tight_box(mask, x0, y0)
            if not all(box_iou(box, other) <= MAX_PLACEMENT_IOU for other, _ in placed):
                continue
            # occupied is padded by r, so the halo window starts at (y0, x0)
            if separation is not None and (occupied[y0 : y0 + halo.shape[0], x0 : x0 + halo.shape[1]] & halo).any():
                continue
            break
        else:
            raise PlacementError(f"could not place {len(specs)} objects after {PLACEMENT_ATTEMPTS} attempts")
        region = canvas[y0 : y0 + spec.size, x0 : x0 + spec.size]
        region[mask] = spec.rgb
        occupied[y0 + r : y0 + r + spec.size, x0 + r : x0 + r + spec.size] |= mask
        placed.append((box, spec.class_id))
    return ImageSample(np.clip(canvas, 0.0, 1.0)), placed


# ---------------------------------------------------------------------------
# corpus

_SPLIT_CODES = {"train": 1, "val": 2}


def _sample_seed(config_seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(config_seed), _SPLIT_CODES[split], int(index)])


def generate_sample(config: CorpusConfig, vocab: ClassVocab, split: str, index: int) -> GroundingSample:
    """Build one sample; a pure function of (config, split, index)."""
    rng = _sample_seed(config.seed, split, index)
    allowed = vocab.seen_ids if split == "train" else list(range(len(vocab)))
    lo, hi = config.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    combos = config.combos()
    specs = []
    for _ in range(n_obj):
        cid = int(allowed[int(rng.integers(len(allowed)))])
        color, shape = combos[cid]
        size = int(rng.integers(config.object_size[0], config.object_size[1] + 1))
        specs.append(ObjectSpec(cid, shape, config.colors[color], size))
    for attempt in range(SCENE_RETRIES):
        try:
            image, placed = render_scene(specs, config.image_size, rng)
            break
        except PlacementError:
            if attempt == SCENE_RETRIES - 1:
                raise
    # caption reads objects left to right
    placed.sort(key=lambda bc: (bc[0].x1, bc[0].y1))
    tokens = [vocab[cid].spoken_token for _, cid in placed]
    speaker = int(rng.integers(2**31))
    audio, spans = speak_caption(tokens, config.tone_recipe(), speaker)
    objects = tuple(GroundedObject(box, cid, span) for (box, cid), span in zip(placed, spans))
    text = tuple(vocab[cid].text_token for _, cid in placed)
    return GroundingSample(f"{split}_{index:06d}", image, audio, text, objects)


def assign_buckets(vocab: ClassVocab, counts: Sequence[int], rare_max: int = 10, frequent_min: int = 100) -> ClassVocab:
    """LVIS-style buckets from realized training counts."""
    entries = []
    for e, n in zip(vocab.entries, counts):
        bucket = "rare" if n < rare_max else ("frequent" if n > frequent_min else "common")
        entries.append(VocabEntry(e.class_id, e.text_token, e.spoken_token, bucket, int(n), e.seen_in_train))
    return ClassVocab(tuple(entries), vocab.tone_recipe)


def generate_corpus(config: CorpusConfig, out_dir: str | os.PathLike) -> Path:
    """Write train/val manifests for ``config`` into ``out_dir`` atomically."""
    out = Path(out_dir)
    vocab = build_vocab(config)
    if len(set(e.spoken_token for e in vocab.entries)) != len(vocab):
        warnings.warn("two classes share a spoken token; their audio embeddings will coincide")
    train = [generate_sample(config, vocab, "train", i) for i in range(config.n_train)]
    val = [generate_sample(config, vocab, "val", i) for i in range(config.n_val)]
    counts = np.zeros(len(vocab), dtype=int)
    for s in train:
        for o in s.objects:
            counts[o.class_id] += 1
    vocab = assign_buckets(vocab, counts, config.rare_max, config.frequent_min)

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        write_manifest(train, vocab, tmp, "train")
        write_manifest(val, vocab, tmp, "val", write_vocab=False)
        meta = {
            "config": config.to_json(),
            "train_counts": [int(c) for c in counts],
            "holdout_class_ids": vocab.unseen_ids,
        }
        atomic_write_text(tmp / "corpus.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def token_spectrum(clip: AudioClip, n_bins: int = 256) -> np.ndarray:
    """Unit-norm log-binned magnitude spectrum (identifiability feature)."""
    mag = np.abs(np.fft.rfft(clip.samples))
    freqs = np.fft.rfftfreq(len(clip), 1 / clip.sample_rate)
    edges = np.geomspace(100.0, clip.sample_rate / 2, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, freqs) - 1, 0, n_bins - 1)
    feat = np.bincount(idx, weights=mag, minlength=n_bins)
    return feat / (np.linalg.norm(feat) + 1e-12)
