"""Bias-expansion and classification losses.

All functions take batched torch tensors and return 0-dim tensors so they can
be back-propagated directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

EPS_PROB = 1e-7
OBJECTIVES = ("be", "rl", "ce")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    lam: float = 0.5
    l3_temperature: float = 1.0
    # use the sign as printed (-L2); only for comparison runs
    printed_l2_sign: bool = False

    def __post_init__(self):
        if not (isinstance(self.margin, (int, float)) and self.margin > 0 and math.isfinite(self.margin)):
            raise ConfigError(f"loss.margin must be a positive finite number, got {self.margin!r}")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"loss.lam must lie in [0, 1], got {self.lam!r}")
        if not self.l3_temperature > 0:
            raise ConfigError(f"loss.l3_temperature must be positive, got {self.l3_temperature!r}")


@dataclass
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l3: Tensor
    l_be: Tensor
    l_c: Tensor
    total: Tensor
    objective: str = "be"

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "l2", "l3", "l_be", "l_c", "total")}


def _flat(bias: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
    if bias.shape[0] == 0:
        raise InputError("empty batch")
    if labels.shape != (bias.shape[0],):
        raise InputError(f"labels shape {tuple(labels.shape)} does not match batch {bias.shape[0]}")
    return bias.reshape(bias.shape[0], -1), labels.to(bias.dtype)


def loss_real_invariance(bias: Tensor, labels: Tensor) -> Tensor:
    """Mean squared bias norm over the batch, counting real samples only."""
    flat, y = _flat(bias, labels)
    return ((1 - y) * flat.pow(2).sum(1)).mean()


def loss_fake_margin(bias: Tensor, labels: Tensor, margin: float) -> Tensor:
    """Squared hinge pushing each fake sample's bias norm up to ``margin``."""
    if not margin > 0:
        raise ConfigError(f"margin must be positive, got {margin!r}")
    flat, y = _flat(bias, labels)
    norm = torch.linalg.vector_norm(flat, dim=1)
    return (y * F.relu(margin - norm).pow(2)).mean()


def loss_alignment(bias: Tensor, labels: Tensor, temperature: float = 1.0) -> Tensor:
    """Supervised-contrastive term over unit-normalised bias vectors.

    Anchors without a same-class partner are skipped; the mean runs over the
    remaining anchors (0 when none remain).
    """
    flat, _ = _flat(bias, labels)
    n = flat.shape[0]
    norms = torch.linalg.vector_norm(flat, dim=1)
    if bool((norms == 0).any()):
        log.warning("zero-norm bias vector in alignment loss; treating it as the zero vector")
    u = F.normalize(flat, dim=1, eps=1e-12)
    sim = u @ u.T / temperature
    eye = torch.eye(n, dtype=torch.bool, device=flat.device)
    lse = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - lse

    same = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~eye
    m = same.sum(1)
    valid = m > 0
    if not bool(valid.any()):
        return flat.new_zeros(())
    # where() keeps the -inf diagonal out of the graph
    per_anchor = -torch.where(same, log_prob, torch.zeros_like(log_prob)).sum(1)
    per_anchor = per_anchor[valid] / m[valid].to(flat.dtype)
    return per_anchor.mean()


def loss_cross_entropy(prob: Tensor, labels: Tensor) -> Tensor:
    if prob.shape[0] == 0:
        raise InputError("empty batch")
    if prob.shape != labels.shape:
        raise InputError(f"prob shape {tuple(prob.shape)} does not match labels {tuple(labels.shape)}")
    p = prob.clamp(EPS_PROB, 1 - EPS_PROB)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def total_loss(
    bias: Optional[Tensor],
    prob: Tensor,
    labels: Tensor,
    config: LossConfig,
    objective: str = "be",
) -> LossBreakdown:
    """Compute every term and combine them per ``objective``.

    ``"be"``: ``lam * L_c + (1 - lam) * (L1 + L2 + L3)``;
    ``"rl"``: ``lam * L_c + (1 - lam) * L1``;
    ``"ce"``: ``L_c`` alone.
    The individual terms are always reported (zeros when ``bias`` is None).
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    if not (0.0 <= config.lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {config.lam!r}")
    l_c = loss_cross_entropy(prob, labels)
    if bias is None:
        zero = l_c.new_zeros(())
        l1 = l2 = l3 = zero
    else:
        l1 = loss_real_invariance(bias, labels)
        l2 = loss_fake_margin(bias, labels, config.margin)
        if config.printed_l2_sign:
            l2 = -l2
        l3 = loss_alignment(bias, labels, config.l3_temperature)
    l_be = l1 + l2 + l3
    lam = config.lam
    if objective == "be":
        total = lam * l_c + (1 - lam) * l_be
    elif objective == "rl":
        total = lam * l_c + (1 - lam) * l1
    else:
        total = l_c
    return LossBreakdown(l1, l2, l3, l_be, l_c, total, objective)
