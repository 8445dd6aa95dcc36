"""Cross-domain detector: a bias threshold that overrides the classifier.

Samples whose mean absolute bias exceeds ``tau`` are declared fake outright;
the rest keep the classifier's decision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, InputError, StateError

STATISTIC = "mean_abs_bias"
ROUTE_CLASSIFIER = "classifier"
ROUTE_REJECTED = "rejected"


@dataclass
class DetectorState:
    tau: Optional[float] = None
    coverage: float = 0.95
    statistic: str = STATISTIC
    calibration_size: int = 0

    def __post_init__(self):
        if not (0.0 < self.coverage <= 1.0):
            raise ConfigError(f"detector.coverage must lie in (0, 1], got {self.coverage!r}")
        if self.tau is not None and not self.tau >= 0:
            raise ConfigError(f"tau must be nonnegative, got {self.tau!r}")

    @property
    def calibrated(self) -> bool:
        return self.tau is not None

    @classmethod
    def disabled(cls) -> "DetectorState":
        """A detector that never rejects (classifier-only prediction)."""
        return cls(tau=math.inf, calibration_size=0)


def bias_statistic(bias) -> float:
    """Mean of all elements of one bias image."""
    return float(np.asarray(bias.detach().cpu() if isinstance(bias, Tensor) else bias, dtype=np.float64).mean())


def batch_bias_statistic(bias: Tensor) -> Tensor:
    """Per-sample mean absolute bias, shape ``(N,)``."""
    return bias.reshape(bias.shape[0], -1).mean(1)


def calibrate_threshold(values: Sequence[float], coverage: float = 0.95) -> float:
    """Smallest calibration value ``tau`` with ``#{v <= tau} / K >= coverage``.

    This is the ``ceil(coverage * K)``-th order statistic; the index is
    settled with the same ``count / K`` comparison callers use to check it.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InputError("cannot calibrate a threshold on an empty list")
    if not np.isfinite(v).all():
        raise InputError("calibration values must be finite")
    if not (0.0 < coverage <= 1.0):
        raise ConfigError(f"coverage must lie in (0, 1], got {coverage!r}")
    k_total = v.size
    k = max(1, min(k_total, math.ceil(coverage * k_total)))
    while k > 1 and (k - 1) / k_total >= coverage:
        k -= 1
    while k < k_total and k / k_total < coverage:
        k += 1
    return float(v[k - 1])


def decide(stats, probs, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the override rule to precomputed statistics and probabilities.

    Returns ``(labels, scores, routes)``; rejected samples score 1.0.
    """
    stats = np.asarray(stats, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if stats.shape != probs.shape:
        raise InputError("statistics and probabilities differ in shape")
    rejected = stats > tau
    labels = np.where(rejected, 1, (probs > 0.5).astype(np.int64))
    scores = np.where(rejected, 1.0, probs)
    routes = np.where(rejected, ROUTE_REJECTED, ROUTE_CLASSIFIER)
    return labels, scores, routes


@dataclass
class Prediction:
    labels: np.ndarray
    scores: np.ndarray
    routes: np.ndarray
    statistics: np.ndarray
    probs: np.ndarray


@torch.no_grad()
def predict(model, x: Tensor, state: DetectorState, feed: str = "bias_lsa") -> Prediction:
    """Run the network on a batch and apply the detector override."""
    if not state.calibrated:
        raise StateError("detector is not calibrated")
    bundle = model(x, feed=feed)
    probs = bundle.prob.double().cpu().numpy()
    if bundle.bias is None:
        stats = np.zeros_like(probs)
    else:
        stats = batch_bias_statistic(bundle.bias).double().cpu().numpy()
    labels, scores, routes = decide(stats, probs, state.tau)
    return Prediction(labels, scores, routes, stats, probs)
