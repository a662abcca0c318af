"""Stage-1 objectives: audio-image InfoNCE, text-audio pair + CORAL alignment."""
from __future__ import annotations

import torch

from .datamodel import HyperParams, ValidationError


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ValidationError(f"{what}: expected matching B x d inputs, got {tuple(a.shape)} and {tuple(b.shape)}")


def cosine_similarity_matrix(e_a: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
    """``S[j, h] = <e_a[j], e_i[h]>``; rows are audio, columns images.

    Inputs are expected to be L2-normalized already, so the inner product is
    the cosine.
    """
    if e_a.ndim != 2 or e_i.ndim != 2 or e_a.shape[1] != e_i.shape[1]:
        raise ValidationError(f"similarity: dimension mismatch {tuple(e_a.shape)} vs {tuple(e_i.shape)}")
    return e_a @ e_i.T


def _info_nce_rows(logits: torch.Tensor) -> torch.Tensor:
    # -mean_j log softmax(logits[j])[j], via logsumexp
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def contrastive_loss(e_a: torch.Tensor, e_i: torch.Tensor, tau: float = 1.0, symmetric: bool = True) -> torch.Tensor:
    """InfoNCE over a batch of matched audio/image pairs.

    With ``symmetric=False`` only the audio-anchored direction (each audio
    against every image) is used.
    """
    _check_pair(e_a, e_i, "contrastive_loss")
    if e_a.shape[0] == 0:
        raise ValidationError("contrastive_loss: empty batch")
    if tau <= 0:
        raise ValidationError("contrastive_loss: tau must be > 0")
    logits = cosine_similarity_matrix(e_a, e_i) / tau
    a2i = _info_nce_rows(logits)
    if not symmetric:
        return a2i
    return 0.5 * (a2i + _info_nce_rows(logits.T))


def pair_loss(e_t: torch.Tensor, e_a: torch.Tensor) -> torch.Tensor:
    """Batch mean of squared distances between paired text/audio rows."""
    _check_pair(e_t, e_a, "pair_loss")
    if e_t.shape[0] == 0:
        raise ValidationError("pair_loss: empty batch")
    return ((e_t - e_a) ** 2).sum(1).mean()


def covariance(x: torch.Tensor) -> torch.Tensor:
    xc = x - x.mean(0, keepdim=True)
    return xc.T @ xc / (x.shape[0] - 1)


def coral_loss(e_t: torch.Tensor, e_a: torch.Tensor) -> torch.Tensor:
    """Deep-CORAL: ``||C_t - C_a||_F^2 / (4 d^2)`` with unbiased covariances."""
    _check_pair(e_t, e_a, "coral_loss")
    b, d = e_t.shape
    if b < 2:
        raise ValidationError("coral_loss: needs a batch of at least 2")
    diff = covariance(e_t) - covariance(e_a)
    return (diff**2).sum() / (4 * d * d)


def alignment_loss(e_t: torch.Tensor, e_a: torch.Tensor, lambda_coral: float = 0.5) -> torch.Tensor:
    loss = pair_loss(e_t, e_a)
    if lambda_coral:
        loss = loss + lambda_coral * coral_loss(e_t, e_a)
    return loss


def stage1_loss(
    e_i: torch.Tensor, e_a: torch.Tensor, e_t: torch.Tensor, params: HyperParams, symmetric: bool = True
) -> torch.Tensor:
    """Contrastive term plus ``eta``-weighted text-audio alignment."""
    loss = contrastive_loss(e_a, e_i, params.tau, symmetric)
    if params.eta_align:
        loss = loss + params.eta_align * alignment_loss(e_t, e_a, params.lambda_coral)
    return loss


def stage1_components(e_i, e_a, e_t, params: HyperParams) -> dict[str, torch.Tensor]:
    """Individual stage-1 terms, for logging."""
    out = {"contrastive": contrastive_loss(e_a, e_i, params.tau), "pair": pair_loss(e_t, e_a)}
    if e_t.shape[0] >= 2:
        out["coral"] = coral_loss(e_t, e_a)
    return out
