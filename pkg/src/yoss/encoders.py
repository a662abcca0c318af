"""Small trainable encoders and the checkpoint format.

The speech encoder stands in for HuBERT: a fixed log-mel frontend, a strided
conv feature extractor and a short transformer stack. Its utterance
embedding is produced by the aggregation branch::

    e_a = proj(mean_t(transformer(sum_l softmax(w)_l * h_l)))

where ``h_l`` are the hidden states of every encoder layer (conv output
included).
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import AudioClip, HyperParams, ImageSample, ValidationError, atomic_write_bytes

N_MELS = 64
WIN_MS = 25
HOP_MS = 10
LOG_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"YOSS1\n"


# ---------------------------------------------------------------------------
# audio frontend


def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


class LogMel(nn.Module):
    """Log-mel frames (25 ms window, 10 ms hop, no centre padding).

    Without centre padding a frame depends only on its own samples, which is
    what makes trailing padding invisible to valid frames.
    """

    def __init__(self, sample_rate: int = 16000, n_mels: int = N_MELS):
        super().__init__()
        self.sample_rate = sample_rate
        self.win = int(sample_rate * WIN_MS / 1000)
        self.hop = int(sample_rate * HOP_MS / 1000)
        self.n_fft = 1 << (self.win - 1).bit_length()
        self.register_buffer("window", torch.hann_window(self.win, dtype=torch.float64), persistent=False)
        fb = mel_filterbank(self.n_fft, n_mels, sample_rate)
        self.register_buffer("fb", torch.as_tensor(fb), persistent=False)

    def n_frames(self, n_samples: int) -> int:
        return max(1, 1 + (n_samples - self.win) // self.hop) if n_samples >= self.win else 1

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """``(B, N)`` waveform -> ``(B, T, n_mels)`` log-mel."""
        wave = wave.to(torch.float64)
        if wave.shape[-1] < self.win:
            wave = F.pad(wave, (0, self.win - wave.shape[-1]))
        frames = wave.unfold(-1, self.win, self.hop) * self.window
        spec = torch.fft.rfft(frames, n=self.n_fft).abs() ** 2
        return torch.log(spec @ self.fb.T + LOG_FLOOR)


def clip_features(clips: Sequence[AudioClip], frontend: LogMel) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a batch of clips and return ``(features, frame_mask)``.

    ``frame_mask`` is True on valid frames. Features at padded frames are
    zeroed.
    """
    if not clips:
        raise ValidationError("clips: empty batch")
    rates = {c.sample_rate for c in clips}
    if len(rates) != 1:
        raise ValidationError(f"clips: mixed sample rates {sorted(rates)}")
    if rates.pop() != frontend.sample_rate:
        raise ValidationError("clips: sample rate does not match the encoder frontend")
    n_max = max(len(c) for c in clips)
    wave = torch.zeros(len(clips), max(n_max, frontend.win), dtype=torch.float64)
    for k, c in enumerate(clips):
        wave[k, : len(c)] = torch.from_numpy(np.array(c.samples))
    feats = frontend(wave)
    lengths = torch.tensor([frontend.n_frames(len(c)) for c in clips])
    mask = torch.arange(feats.shape[1])[None, :] < lengths[:, None]
    return feats * mask[..., None], mask


# ---------------------------------------------------------------------------
# transformer pieces


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block with an explicit key padding mask."""

    def __init__(self, width: int, heads: int = 4, ff_mult: int = 2):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).view(b, t, 3, h, c // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(c // h)
        att = att.masked_fill(~mask[:, None, None, :], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, c)
        x = x + self.out(y)
        return x + self.ff(self.norm2(x))


def sinusoidal_positions(t: int, width: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    pe = torch.zeros(t, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe.to(dtype)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)[..., None]
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


# ---------------------------------------------------------------------------
# speech encoder


class SpeechEncoder(nn.Module):
    def __init__(
        self,
        embed_dim: int = 64,
        width: int = 64,
        n_layers: int = 2,
        heads: int = 4,
        sample_rate: int = 16000,
        conv_stages: int = 1,
    ):
        super().__init__()
        self.config = dict(
            embed_dim=embed_dim, width=width, n_layers=n_layers, heads=heads, sample_rate=sample_rate, conv_stages=conv_stages
        )
        self.frontend = LogMel(sample_rate)
        self.in_norm = nn.LayerNorm(N_MELS)
        self.conv = nn.Conv1d(N_MELS, width, kernel_size=3, stride=2, padding=1)
        # later stages are depthwise-separable: wider receptive field for few parameters
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Conv1d(width, width, 5, stride=2, padding=2, groups=width), nn.Conv1d(width, width, 1))
            for _ in range(conv_stages - 1)
        )
        self.layers = nn.ModuleList(TransformerLayer(width, heads) for _ in range(n_layers))
        self.layer_weights = nn.Parameter(torch.zeros(n_layers + 1))
        self.aggregate = TransformerLayer(width, heads)
        self.proj = nn.Linear(width, embed_dim)

    @staticmethod
    def downsample_mask(mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(1)
        t = (mask.shape[1] + 1) // 2
        return torch.arange(t)[None, :] < ((lengths + 1) // 2)[:, None]

    def hidden_states(self, feats: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack of conv output and every transformer layer, ``(L+1, B, T', C)``."""
        x = self.in_norm(feats.to(self.conv.weight.dtype)) * mask[..., None]
        x = F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)
        mask = self.downsample_mask(mask)
        for conv in self.convs:
            # zero padded steps so they cannot leak into valid ones
            x = F.gelu(conv((x * mask[..., None]).transpose(1, 2))).transpose(1, 2)
            mask = self.downsample_mask(mask)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        states = [x]
        for layer in self.layers:
            x = layer(x, mask)
            states.append(x)
        return torch.stack(states), mask

    def weighted_sum(self, states: torch.Tensor) -> torch.Tensor:
        w = self.layer_weights.softmax(0)
        return torch.einsum("l,lbtc->btc", w, states)

    def pool(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.aggregate(x, mask)
        return F.normalize(self.proj(masked_mean(x, mask)), dim=-1)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        states, mask = self.hidden_states(feats, mask)
        return self.pool(self.weighted_sum(states), mask)


def encode_audio(clips: Sequence[AudioClip], enc: SpeechEncoder) -> torch.Tensor:
    """Embed a batch of clips; rows are L2-normalized."""
    feats, mask = clip_features(clips, enc.frontend)
    return enc(feats, mask)


# ---------------------------------------------------------------------------
# image backbone


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    strides: tuple[int, ...] = (4, 8, 16)

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValidationError("pyramid: exactly 3 levels required")
        if len({lv.shape[1] for lv in self.levels}) != 1:
            raise ValidationError("pyramid: channel count must match across levels")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def select(self, idx) -> "FeaturePyramid":
        return FeaturePyramid([lv[idx] for lv in self.levels], self.strides)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.SiLU())


class ImageBackbone(nn.Module):
    """Strided conv stages at strides 4/8/16 plus a pooled global head."""

    def __init__(self, embed_dim: int = 64, channels: int = 32, stem_channels: int = 16):
        super().__init__()
        self.config = dict(embed_dim=embed_dim, channels=channels, stem_channels=stem_channels)
        c = channels
        self.stem = _conv(3, stem_channels, 2)
        self.stage1 = nn.Sequential(_conv(stem_channels, c, 2), _conv(c, c))
        self.stage2 = nn.Sequential(_conv(c, c, 2), _conv(c, c))
        self.stage3 = nn.Sequential(_conv(c, c, 2))
        self.global_head = nn.Sequential(nn.Linear(6 * c, c), nn.SiLU(), nn.Linear(c, embed_dim))

    def pyramid(self, x: torch.Tensor) -> FeaturePyramid:
        x = (x.to(self.stem[0].weight.dtype) - 0.5) / 0.25
        p3 = self.stage1(self.stem(x))
        p4 = self.stage2(p3)
        p5 = self.stage3(p4)
        return FeaturePyramid([p3, p4, p5])

    def embed(self, pyr: FeaturePyramid) -> torch.Tensor:
        pooled = [torch.cat([lv.mean((2, 3)), lv.amax((2, 3))], 1) for lv in pyr.levels]
        return F.normalize(self.global_head(torch.cat(pooled, 1)), dim=-1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        pyr = self.pyramid(x)
        return self.embed(pyr), pyr


def images_to_tensor(images: Sequence[ImageSample]) -> torch.Tensor:
    if not images:
        raise ValidationError("images: empty batch")
    shapes = {im.pixels.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"images: mixed shapes {sorted(shapes)}")
    h, w, _ = shapes.pop()
    if h % 16 or w % 16:
        raise ValidationError(f"images: {h}x{w} not divisible by 16")
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float32)


def encode_image(images, backbone: ImageBackbone) -> tuple[torch.Tensor, FeaturePyramid]:
    """Global embeddings and the 3-level pyramid for a batch of images.

    Accepts a list of :class:`ImageSample` or a ``(B, 3, H, W)`` tensor.
    """
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    if x.shape[-1] % 16 or x.shape[-2] % 16:
        raise ValidationError(f"images: {x.shape[-2]}x{x.shape[-1]} not divisible by 16")
    return backbone(x)


# ---------------------------------------------------------------------------
# text encoder


class TextEncoder(nn.Module):
    def __init__(self, tokens: Sequence[str], embed_dim: int = 64, width: int = 64):
        super().__init__()
        self.tokens = list(tokens)
        self.index = {t: k for k, t in enumerate(self.tokens)}
        self.config = dict(tokens=self.tokens, embed_dim=embed_dim, width=width)
        self.table = nn.Embedding(len(self.tokens), width)
        self.proj = nn.Linear(width, embed_dim)

    def token_ids(self, seqs: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        n = max((len(s) for s in seqs), default=0)
        ids = torch.zeros(len(seqs), max(n, 1), dtype=torch.long)
        mask = torch.zeros(len(seqs), max(n, 1), dtype=torch.bool)
        for b, seq in enumerate(seqs):
            if not seq:
                raise ValidationError("tokens: empty token sequence")
            for k, tok in enumerate(seq):
                if tok not in self.index:
                    raise ValidationError(f"tokens: unknown token {tok!r}")
                ids[b, k] = self.index[tok]
                mask[b, k] = True
        return ids, mask

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(masked_mean(self.table(ids), mask)), dim=-1)


def encode_text(seqs: Sequence[Sequence[str]], enc: TextEncoder) -> torch.Tensor:
    ids, mask = enc.token_ids(seqs)
    return enc(ids, mask)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | os.PathLike, modules: dict[str, nn.Module], hparams: HyperParams, extra: dict | None = None) -> None:
    """Write named parameter arrays plus metadata.

    Layout: magic ``YOSS1\\n``, u64 header length, JSON header, raw
    little-endian array bytes in header order.
    """
    arrays, index, offset = [], [], 0
    configs = {}
    for prefix, mod in modules.items():
        if mod is None:
            continue
        configs[prefix] = getattr(mod, "config", {})
        for name, t in mod.state_dict().items():
            a = t.detach().cpu().numpy()
            a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
            buf = a.tobytes()
            index.append({"name": f"{prefix}.{name}", "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(buf)})
            arrays.append(buf)
            offset += len(buf)
    header = json.dumps(
        {"hparams": hparams.to_json(), "modules": configs, "arrays": index, "extra": extra or {}}, sort_keys=True
    ).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(arrays)
    atomic_write_bytes(path, blob)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValidationError(f"{path}: not a YOSS1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    header = json.loads(data[pos + 8 : pos + 8 + hlen])
    base = pos + 8 + hlen
    arrays = {}
    for ent in header["arrays"]:
        raw = data[base + ent["offset"] : base + ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return header, arrays


def load_state(mod: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    sd = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")}
    mod.load_state_dict(sd)
