"""Core domain types and the on-disk manifest format.

A manifest directory looks like::

    vocab.json
    train.jsonl / val.jsonl
    images/<id>.png
    audio/<id>.wav

Each JSONL record carries ``id``, ``image``, ``audio``, ``caption_text`` and
``objects: [{box: [x1, y1, x2, y2], class_id, span: [start, end], token}]``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

MAX_STRIDE = 16
BUCKETS = ("rare", "common", "frequent")
PCM_SCALE = 32767.0


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


class ManifestError(ValueError):
    """A manifest on disk is malformed or refers to missing media."""


def _frozen_array(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box: non-finite coordinate in {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"box: expected x1 < x2 and y1 < y2, got {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    def check_within(self, width: float, height: float) -> None:
        if self.x1 < 0 or self.y1 < 0 or self.x2 > width or self.y2 > height:
            raise ValidationError(
                f"box: {self.as_list()} outside image bounds {width}x{height}"
            )


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = _frozen_array(self.samples, np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValidationError("audio: samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(arr)) or np.abs(arr).max() > 1.0:
            raise ValidationError("audio: samples must lie within [-1, 1]")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValidationError(f"audio: bad sample_rate {self.sample_rate}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioClip):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(
            self.samples, other.samples
        )

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class TokenSpan:
    token: str
    start_sample: int
    end_sample: int

    def __post_init__(self):
        if not (0 <= self.start_sample < self.end_sample):
            raise ValidationError(
                f"token_span: need 0 <= start < end, got "
                f"[{self.start_sample}, {self.end_sample})"
            )

    def check_within(self, clip_length: int) -> None:
        if self.end_sample > clip_length:
            raise ValidationError(
                f"token_span: end {self.end_sample} beyond clip length {clip_length}"
            )


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.pixels, np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"image: expected HxWx3 pixels, got {arr.shape}")
        h, w = arr.shape[:2]
        if h % MAX_STRIDE or w % MAX_STRIDE or h == 0 or w == 0:
            raise ValidationError(
                f"image: H and W must be positive multiples of {MAX_STRIDE}, got {h}x{w}"
            )
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("image: pixels must lie within [0, 1]")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageSample):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class GroundedObject:
    box: BoundingBox
    class_id: int
    span: TokenSpan


@dataclass(frozen=True)
class GroundingSample:
    sample_id: str
    image: ImageSample
    caption_audio: AudioClip
    caption_text: tuple[str, ...]
    objects: tuple[GroundedObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "caption_text", tuple(self.caption_text))
        object.__setattr__(self, "objects", tuple(self.objects))
        if not self.sample_id or "/" in self.sample_id:
            raise ValidationError(f"id: bad sample id {self.sample_id!r}")
        n = len(self.caption_audio)
        prev_end = 0
        for obj in self.objects:
            obj.box.check_within(self.image.width, self.image.height)
            obj.span.check_within(n)
            if obj.span.start_sample < prev_end:
                raise ValidationError("token_span: spans overlap or are unsorted")
            prev_end = obj.span.end_sample
            if int(obj.class_id) != obj.class_id or obj.class_id < 0:
                raise ValidationError(f"class_id: bad class id {obj.class_id!r}")

    def check_vocab(self, vocab: "ClassVocab") -> None:
        for obj in self.objects:
            if obj.class_id >= len(vocab):
                raise ValidationError(f"class_id: {obj.class_id} not in vocabulary")


@dataclass(frozen=True)
class VocabEntry:
    class_id: int
    text_token: str
    spoken_token: str
    bucket: str | None = None
    train_count: int = 0
    seen_in_train: bool = True

    def __post_init__(self):
        if self.bucket is not None and self.bucket not in BUCKETS:
            raise ValidationError(f"bucket: unknown frequency bucket {self.bucket!r}")


@dataclass(frozen=True)
class ClassVocab:
    """Class list plus the tone recipe used to speak class names.

    ``tone_recipe`` is stored as a plain mapping so the data model does not
    depend on the generator; :class:`yoss.synthdata.ToneRecipe` round-trips it.
    """

    entries: tuple[VocabEntry, ...]
    tone_recipe: Mapping[str, Any] | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValidationError("vocab: class ids must be dense 0..K-1 in order")
        tokens = [e.text_token for e in self.entries]
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocab: text tokens must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, class_id: int) -> VocabEntry:
        return self.entries[class_id]

    @property
    def text_tokens(self) -> list[str]:
        return [e.text_token for e in self.entries]

    @property
    def seen_ids(self) -> list[int]:
        return [e.class_id for e in self.entries if e.seen_in_train]

    @property
    def unseen_ids(self) -> list[int]:
        return [e.class_id for e in self.entries if not e.seen_in_train]

    def to_json(self) -> dict:
        return {
            "classes": [
                {
                    "class_id": e.class_id,
                    "text_token": e.text_token,
                    "spoken_token": e.spoken_token,
                    "bucket": e.bucket,
                    "train_count": e.train_count,
                    "seen_in_train": e.seen_in_train,
                }
                for e in self.entries
            ],
            "tone_recipe": None if self.tone_recipe is None else dict(self.tone_recipe),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClassVocab":
        try:
            entries = [
                VocabEntry(
                    class_id=int(c["class_id"]),
                    text_token=str(c["text_token"]),
                    spoken_token=str(c["spoken_token"]),
                    bucket=c.get("bucket"),
                    train_count=int(c.get("train_count", 0)),
                    seen_in_train=bool(c.get("seen_in_train", True)),
                )
                for c in obj["classes"]
            ]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"vocab.json: missing field {exc}") from exc
        return cls(tuple(entries), obj.get("tone_recipe"))


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Row-aligned image / audio / text embeddings (any subset may be absent)."""

    e_i: Any = None
    e_a: Any = None
    e_t: Any = None
    normalized: bool = False

    def __post_init__(self):
        shapes = [tuple(m.shape) for m in (self.e_i, self.e_a, self.e_t) if m is not None]
        if not shapes:
            raise ValidationError("embeddings: at least one matrix required")
        if any(len(s) != 2 for s in shapes) or len(set(shapes)) != 1:
            raise ValidationError(f"embeddings: matrices must share B x d, got {shapes}")
        if self.normalized:
            for m in (self.e_i, self.e_a, self.e_t):
                if m is None:
                    continue
                norms = np.linalg.norm(np.asarray(_to_numpy(m), dtype=np.float64), axis=1)
                if np.any(np.abs(norms - 1.0) > 1e-6):
                    raise ValidationError("embeddings: rows are not unit-norm")

    @property
    def batch_size(self) -> int:
        m = next(m for m in (self.e_i, self.e_a, self.e_t) if m is not None)
        return int(m.shape[0])


def _to_numpy(m):
    if hasattr(m, "detach"):
        return m.detach().cpu().numpy()
    return m


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score: {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "class_id": int(self.class_id), "score": float(self.score)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Detection":
        return cls(BoundingBox(*map(float, obj["box"])), int(obj["class_id"]), float(obj["score"]))


@dataclass(frozen=True)
class HyperParams:
    tau: float = 1.0
    lambda_coral: float = 0.5
    eta_align: float = 1.0
    reg_max: int = 8
    strides: tuple[int, ...] = (4, 8, 16)
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.tau <= 0:
            raise ValidationError("tau: must be > 0")
        # loss weights may be zero (ablations switch terms off)
        if self.lambda_coral < 0 or self.eta_align < 0:
            raise ValidationError("lambda_coral/eta_align: must be >= 0")
        if self.reg_max < 2:
            raise ValidationError("reg_max: must be >= 2")
        if self.embed_dim <= 0:
            raise ValidationError("embed_dim: must be > 0")
        if len(self.strides) != 3 or list(self.strides) != sorted(self.strides) or min(self.strides) <= 0:
            raise ValidationError("strides: need three positive strides sorted ascending")

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_coral": self.lambda_coral,
            "eta_align": self.eta_align,
            "reg_max": self.reg_max,
            "strides": list(self.strides),
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "HyperParams":
        return cls(**{k: (tuple(v) if k == "strides" else v) for k, v in obj.items()})


def extract_segment(clip: AudioClip, span: TokenSpan) -> AudioClip:
    """Cut ``samples[start:end)`` out of a caption clip."""
    span.check_within(len(clip))
    return AudioClip(clip.samples[span.start_sample : span.end_sample], clip.sample_rate)


# ---------------------------------------------------------------------------
# media I/O


def write_wav(path: Path, clip: AudioClip) -> None:
    pcm = np.round(clip.samples * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: Path) -> AudioClip:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ManifestError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(np.clip(pcm / PCM_SCALE, -1.0, 1.0), rate)


def write_png(path: Path, image: ImageSample) -> None:
    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path: Path) -> ImageSample:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageSample(arr)


# ---------------------------------------------------------------------------
# manifest


def sample_to_record(sample: GroundingSample) -> dict:
    return {
        "id": sample.sample_id,
        "image": f"images/{sample.sample_id}.png",
        "audio": f"audio/{sample.sample_id}.wav",
        "caption_text": list(sample.caption_text),
        "objects": [
            {
                "box": o.box.as_list(),
                "class_id": int(o.class_id),
                "span": [int(o.span.start_sample), int(o.span.end_sample)],
                "token": o.span.token,
            }
            for o in sample.objects
        ],
    }


def write_manifest(
    samples: Sequence[GroundingSample],
    vocab: ClassVocab,
    path: str | os.PathLike,
    split: str = "train",
    write_vocab: bool = True,
) -> Path:
    """Write ``samples`` as ``{split}.jsonl`` plus sidecar PNG/WAV media."""
    root = Path(path)
    for i, s in enumerate(samples):
        try:
            s.check_vocab(vocab)
        except ValidationError as exc:
            raise ValidationError(f"sample {i}: {exc}") from exc
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("sample ids must be unique within a split")
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create manifest directory {root}: {exc}") from exc
    lines = []
    for s in samples:
        write_png(root / "images" / f"{s.sample_id}.png", s.image)
        write_wav(root / "audio" / f"{s.sample_id}.wav", s.caption_audio)
        lines.append(json.dumps(sample_to_record(s), sort_keys=True))
    atomic_write_text(root / f"{split}.jsonl", "".join(line + "\n" for line in lines))
    if write_vocab:
        atomic_write_text(root / "vocab.json", json.dumps(vocab.to_json(), indent=2, sort_keys=True) + "\n")
    return root


def read_vocab(path: str | os.PathLike) -> ClassVocab:
    p = Path(path) / "vocab.json"
    if not p.exists():
        raise ManifestError(f"missing media file {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"vocab.json: invalid JSON ({exc})") from exc
    try:
        return ClassVocab.from_json(obj)
    except ValidationError as exc:
        raise ManifestError(f"vocab.json: {exc}") from exc


def iter_records(path: str | os.PathLike, split: str = "train") -> Iterable[tuple[int, dict]]:
    p = Path(path) / f"{split}.jsonl"
    if not p.exists():
        raise ManifestError(f"missing split file {p}")
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{split}.jsonl line {lineno}: invalid JSON ({exc})") from exc


def record_to_sample(root: Path, rec: Mapping, where: str, load_media: bool = True) -> GroundingSample:
    def fail(fieldname, msg):
        raise ManifestError(f"{where}: {fieldname}: {msg}")

    for key in ("id", "image", "audio", "caption_text", "objects"):
        if key not in rec:
            fail(key, "missing field")
    img_path = root / rec["image"]
    wav_path = root / rec["audio"]
    for media in (img_path, wav_path):
        if not media.is_file():
            raise ManifestError(f"{where}: missing media file {media}")
    try:
        image = read_png(img_path)
    except ValidationError as exc:
        fail("image", exc)
    try:
        audio = read_wav(wav_path)
    except ValidationError as exc:
        fail("audio", exc)
    objects = []
    for k, o in enumerate(rec["objects"]):
        try:
            box = BoundingBox(*map(float, o["box"]))
            box.check_within(image.width, image.height)
        except (ValidationError, TypeError, KeyError) as exc:
            fail("box", f"object {k}: {exc}")
        try:
            start, end = (int(v) for v in o["span"])
            span = TokenSpan(str(o["token"]), start, end)
            span.check_within(len(audio))
        except (ValidationError, TypeError, KeyError, ValueError) as exc:
            fail("token_span", f"object {k}: {exc}")
        cid = o.get("class_id")
        if not isinstance(cid, int) or cid < 0:
            fail("class_id", f"object {k}: bad class id {cid!r}")
        objects.append(GroundedObject(box, cid, span))
    try:
        return GroundingSample(str(rec["id"]), image, audio, tuple(rec["caption_text"]), tuple(objects))
    except ValidationError as exc:
        msg = str(exc)
        fail(msg.split(":", 1)[0], msg)


def read_manifest(path: str | os.PathLike, split: str = "train") -> tuple[list[GroundingSample], ClassVocab]:
    """Load and fully validate one split of a manifest directory (file order)."""
    root = Path(path)
    vocab = read_vocab(root)
    samples = []
    for lineno, rec in iter_records(root, split):
        where = f"{split}.jsonl line {lineno}"
        s = record_to_sample(root, rec, where)
        try:
            s.check_vocab(vocab)
        except ValidationError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        samples.append(s)
    return samples, vocab


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
