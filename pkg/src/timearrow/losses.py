"""Time arrow classification loss and the channel decorrelation regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    tau: float = 0.2
    normalize_channels: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean two-way cross-entropy ``-log softmax(logits)[label]``."""
    if logits.ndim == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels, device=logits.device).reshape(-1).long()
    return F.cross_entropy(logits, labels)


def decorrelation_loss(z: torch.Tensor, tau: float = 0.2, normalize_channels: bool = False,
                       reduction: str = "mean") -> torch.Tensor:
    """``-(1/c) log sum_i A_ii`` with ``A = softmax_j(z_i . z_j / tau)`` per sample.

    ``z`` is ``(B, 2, c, h, w)`` (or a single ``(2, c, h, w)`` sample); channels
    are flattened over both slots and all pixels, i.e. each ``z_i`` has
    ``2 h w`` entries.
    """
    if z.ndim == 4:
        z = z[None]
    b, _, c = z.shape[:3]
    if c < 2:
        raise ValueError(f"decorrelation needs at least 2 channels, got {c}")
    flat = z.transpose(1, 2).reshape(b, c, -1)
    if normalize_channels:
        flat = F.normalize(flat, dim=-1)
    sim = flat @ flat.transpose(1, 2) / tau
    if not torch.all(torch.isfinite(sim)):
        raise ValueError("non-finite channel dot products; rescale the features")
    log_a = torch.log_softmax(sim, dim=-1)
    per_sample = -torch.logsumexp(torch.diagonal(log_a, dim1=-2, dim2=-1), dim=-1) / c
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def decorrelation_lower_bound(c: int) -> float:
    return -math.log(c) / c


def total_loss(logits, labels, z, config: LossConfig = LossConfig()) -> torch.Tensor:
    cls = classification_loss(logits, labels)
    if config.lam == 0:
        return cls
    return cls + config.lam * decorrelation_loss(z, config.tau, config.normalize_channels)
