"""Detection metrics: Acc, AUC, APCER, BPCER.

Label convention throughout: 0 = real (bona fide), 1 = fake (attack).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, UndefinedMetricError


def _pair(labels, other, what: str) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(np.int64).ravel()
    o = np.asarray(other).ravel()
    if y.size == 0:
        raise InputError("empty input")
    if y.size != o.size:
        raise InputError(f"labels ({y.size}) and {what} ({o.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 (real) or 1 (fake)")
    return y, o


def accuracy(labels, predictions) -> float:
    y, pred = _pair(labels, predictions, "predictions")
    return float(np.mean(y == pred.astype(np.int64)))


def auc(labels, scores) -> float:
    """Probability that a random fake outscores a random real (ties count 1/2).

    Computed from average ranks (Mann-Whitney U), O(n log n).
    """
    y, s = _pair(labels, scores, "scores")
    s = s.astype(np.float64)
    n_fake = int(y.sum())
    n_real = y.size - n_fake
    if n_fake == 0 or n_real == 0:
        raise UndefinedMetricError("AUC needs at least one real and one fake sample")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_fake * (n_fake + 1) / 2.0
    return float(u / (n_fake * n_real))


def apcer_bpcer(labels, predictions) -> tuple[float, float]:
    """APCER = fakes predicted real / fakes; BPCER = reals predicted fake / reals."""
    y, pred = _pair(labels, predictions, "predictions")
    pred = pred.astype(np.int64)
    fake = y == 1
    real = ~fake
    if not fake.any() or not real.any():
        raise UndefinedMetricError("APCER/BPCER need both real and fake samples")
    return float(np.mean(pred[fake] == 0)), float(np.mean(pred[real] == 1))


@dataclass
class MetricsReport:
    acc: float
    auc: float
    apcer: float
    bpcer: float
    n_real: int
    n_fake: int
    threshold_used: Optional[float] = None
    route_counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self, **extra) -> dict:
        d = asdict(self)
        d.update(extra)
        return d


def evaluate(
    labels: Sequence[int],
    scores: Sequence[float],
    predictions: Sequence[int],
    routes: Optional[Sequence[str]] = None,
    threshold: Optional[float] = None,
) -> MetricsReport:
    y = np.asarray(labels).astype(np.int64)
    counts: Mapping[str, int] = {}
    if routes is not None:
        names, c = np.unique(np.asarray(routes, dtype=object).astype(str), return_counts=True)
        counts = {str(k): int(v) for k, v in zip(names, c)}
    apcer, bpcer = apcer_bpcer(y, predictions)
    return MetricsReport(
        acc=accuracy(y, predictions),
        auc=auc(y, scores),
        apcer=apcer,
        bpcer=bpcer,
        n_real=int((y == 0).sum()),
        n_fake=int((y == 1).sum()),
        threshold_used=threshold,
        route_counts=dict(counts),
    )
