"""Server-side aggregation rules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySelectionError, ShapeError

AGGREGATORS = ("fedavg", "trimmed_mean", "coord_median", "multi_krum")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise EmptySelectionError("no updates to aggregate")
    try:
        u = np.asarray(np.stack([np.asarray(w, dtype=np.float64) for w in updates]))
    except ValueError as exc:
        raise ShapeError("updates have different lengths") from exc
    if u.ndim != 2:
        raise ShapeError("updates must be 1-D vectors")
    return u


def fedavg(updates, weights=None) -> np.ndarray:
    """Sample-count weighted mean, sum_k (n_k / sum n) w_k."""
    u = _stack(updates)
    if weights is None:
        weights = np.ones(u.shape[0])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (u.shape[0],):
        raise ShapeError(f"{u.shape[0]} updates but {w.shape} weights")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return (w / w.sum()) @ u


def coord_median(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def trimmed_mean(updates, b: int) -> np.ndarray:
    """Per coordinate: drop the b smallest and b largest values, average the rest."""
    u = _stack(updates)
    n = u.shape[0]
    if b < 0 or 2 * b >= n:
        raise ValueError(f"trim count b={b} needs 0 <= 2b < {n}")
    s = np.sort(u, axis=0)
    return s[b:n - b].mean(axis=0)


def krum_scores(updates, f: int) -> np.ndarray:
    u = _stack(updates)
    n = u.shape[0]
    k = n - f - 2
    if k < 1:
        raise ValueError(f"multi_krum needs N - f - 2 >= 1 (N={n}, f={f})")
    d2 = np.array([np.sum((u - row) ** 2, axis=1) for row in u])
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(d2, axis=1)[:, :k]
    return nearest.sum(axis=1)


def multi_krum(updates, f: int, selection_size: int):
    """Krum-score the updates and average the ``selection_size`` best.

    Returns ``(aggregate, selected)`` with ``selected`` a sorted list of
    indices. Ties in score go to the lower index.
    """
    n = len(updates)
    if not 1 <= selection_size <= n:
        raise ValueError(f"selection_size={selection_size} outside [1, {n}]")
    scores = krum_scores(updates, f)
    order = np.lexsort((np.arange(n), scores))
    selected = sorted(int(i) for i in order[:selection_size])
    u = _stack(updates)
    return u[selected].mean(axis=0), selected


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    trim_count: int | None = None
    byzantine_count: int | None = None
    selection_size: int | None = None
    knowledge: str = "partial"

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if self.knowledge not in ("full", "partial"):
            raise ValueError("knowledge must be 'full' or 'partial'")

    def resolve_f(self, n_clients: int, n_malicious: int) -> int:
        if self.byzantine_count is not None:
            return self.byzantine_count
        return n_malicious if self.knowledge == "full" else n_clients // 2


def aggregate(spec: AggregatorSpec, updates, weights, n_malicious: int = 0):
    """Apply ``spec`` to all updates; returns ``(aggregate, selected ids)``."""
    n = len(updates)
    everyone = list(range(n))
    if spec.kind == "fedavg":
        return fedavg(updates, weights), everyone
    if spec.kind == "coord_median":
        return coord_median(updates), everyone
    if spec.kind == "trimmed_mean":
        b = spec.trim_count if spec.trim_count is not None else n // 4
        return trimmed_mean(updates, b), everyone
    f = spec.resolve_f(n, n_malicious)
    size = spec.selection_size if spec.selection_size is not None else n - f
    return multi_krum(updates, f, size)
